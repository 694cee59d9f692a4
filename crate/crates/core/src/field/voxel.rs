use std::sync::Arc;

use rand::Rng;

use super::grid::{VoxelLayout, NEIGHBORHOOD};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::Linear;
use crate::tensor::{ParamStore, Real, Tape, Var};

/// Two 3×3×3 sparse convolutions, `d → d`, stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelWeights {
    pub conv1: Linear,
    pub conv2: Linear,
}

impl VoxelWeights {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, d: usize, rng: &mut R) -> Result<Self> {
        Ok(VoxelWeights {
            conv1: Linear::new(store, "voxel.conv1", NEIGHBORHOOD * d, d, rng)?,
            conv2: Linear::new(store, "voxel.conv2", NEIGHBORHOOD * d, d, rng)?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, d: usize) -> Result<Self> {
        Ok(VoxelWeights {
            conv1: Linear::lookup(store, "voxel.conv1", NEIGHBORHOOD * d, d)?,
            conv2: Linear::lookup(store, "voxel.conv2", NEIGHBORHOOD * d, d)?,
        })
    }
}

/// Per-view feature grids over a shared sparse layout.
#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub layout: Arc<VoxelLayout>,
    /// `[views·output cells × d]`, view-major.
    pub features: Var,
    pub views: usize,
}

fn sparse_conv<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &Linear,
    x: Var,
    map: crate::tensor::RowMap<T>,
    out_rows: usize,
) -> Result<Var> {
    let cols = tape.gather(x, Arc::new(map))?;
    let cols = tape.reshape(cols, &[out_rows, layer.fan_in])?;
    let y = layer.forward(tape, store, cols)?;
    Ok(tape.relu(y))
}

/// Scatter-means per-view vertex features `[views·vertices × d]` into the
/// occupied cells of `layout`, then applies both sparse convolutions.
pub fn diffuse_to_voxels<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    weights: &VoxelWeights,
    features: Var,
    views: usize,
    layout: Arc<VoxelLayout>,
) -> Result<VoxelGrid> {
    let l = layout.vertex_rows.len();
    if tape.shape(features).first() != Some(&(views * l)) {
        return Err(Error::Shape {
            op: "diffuse_to_voxels",
            lhs: tape.shape(features).to_vec(),
            rhs: vec![views * l],
        });
    }
    let cells = tape.gather(features, Arc::new(layout.scatter_map(views)))?;
    let hidden = sparse_conv(
        tape,
        store,
        &weights.conv1,
        cells,
        layout.first_conv_map(views),
        views * layout.hidden.len(),
    )?;
    let out = sparse_conv(
        tape,
        store,
        &weights.conv2,
        hidden,
        layout.second_conv_map(views),
        views * layout.output.len(),
    )?;
    Ok(VoxelGrid {
        layout,
        features: out,
        views,
    })
}

/// Trilinear features `[points·views × d]` at body-local points; zero
/// outside the lattice and for inactive corners.
pub fn sample_skeletal<T: Real>(tape: &mut Tape<T>, grid: &VoxelGrid, local_points: &[Vec3]) -> Result<Var> {
    sample_rows(tape, grid.features, &grid.layout, grid.views, local_points)
}

/// Same sampling applied to any per-cell table laid out like the grid
/// features (e.g. the grid after a linear map).
pub fn sample_rows<T: Real>(
    tape: &mut Tape<T>,
    table: Var,
    layout: &VoxelLayout,
    views: usize,
    local_points: &[Vec3],
) -> Result<Var> {
    let map = layout.sample_map(views, local_points);
    tape.gather(table, Arc::new(map))
}
