use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::geometry::{body_bbox, Vec3};
use crate::tensor::{Real, RowMap};

/// Regular cell lattice in the body-local frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub origin: Vec3,
    pub edge: f64,
    pub dims: [usize; 3],
}

pub const NEIGHBORHOOD: usize = 27;

impl GridSpec {
    /// Lattice over the margin-enlarged bbox of `local_vertices` with cell
    /// edge `longest side / divisions`, extended by `padding` cells on every
    /// side so conv halos stay inside.
    pub fn around(
        local_vertices: &[Vec3],
        divisions: usize,
        margin: f64,
        padding: usize,
    ) -> Result<Self> {
        let bbox = body_bbox(local_vertices, margin)?;
        let size = bbox.size();
        let longest = size[0].max(size[1]).max(size[2]);
        if !(longest > 0.0) || divisions == 0 {
            return Err(Error::invalid("voxel grid needs a non-empty bounding box"));
        }
        let edge = longest / divisions as f64;
        let pad = padding as f64 * edge;
        let dims = [0, 1, 2].map(|i| ((size[i] / edge).ceil() as usize).max(1) + 2 * padding);
        let origin = [0, 1, 2].map(|i| bbox.min[i] - pad);
        Ok(GridSpec { origin, edge, dims })
    }

    pub fn cell_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn unflat(&self, f: usize) -> [usize; 3] {
        let z = f % self.dims[2];
        let y = (f / self.dims[2]) % self.dims[1];
        [f / (self.dims[1] * self.dims[2]), y, z]
    }

    pub fn center(&self, c: [usize; 3]) -> Vec3 {
        [0, 1, 2].map(|i| self.origin[i] + (c[i] as f64 + 0.5) * self.edge)
    }

    /// Cell containing `p`, if inside the lattice.
    pub fn cell_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut c = [0; 3];
        for i in 0..3 {
            let u = ((p[i] - self.origin[i]) / self.edge).floor();
            if !(u >= 0.0 && u < self.dims[i] as f64) {
                return None;
            }
            c[i] = u as usize;
        }
        Some(c)
    }

    /// Flat ids of the 3³ cells around `c` (or `None` past the lattice
    /// border), in tap order `(dx, dy, dz)` row-major over `−1..=1`.
    pub fn neighbors(&self, c: [usize; 3]) -> [Option<usize>; NEIGHBORHOOD] {
        let mut out = [None; NEIGHBORHOOD];
        let mut k = 0;
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let n = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                    let inside = (0..3).all(|i| n[i] >= 0 && n[i] < self.dims[i] as isize);
                    if inside {
                        out[k] = Some(self.flat(n.map(|v| v as usize)));
                    }
                    k += 1;
                }
            }
        }
        out
    }

    /// Trilinear taps over cell centers; zero-weight corners are dropped.
    /// Points outside the lattice have no taps; inside, coordinates are
    /// clamped to the outermost centers.
    pub fn trilinear(&self, p: Vec3) -> Option<Vec<(usize, f64)>> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0; 3];
        for i in 0..3 {
            let u = (p[i] - self.origin[i]) / self.edge;
            if !(u >= 0.0 && u <= self.dims[i] as f64) {
                return None;
            }
            let n = self.dims[i];
            let q = (u - 0.5).clamp(0.0, (n - 1) as f64);
            lo[i] = (q.floor() as usize).min(n.saturating_sub(2));
            hi[i] = (lo[i] + 1).min(n - 1);
            frac[i] = q - lo[i] as f64;
        }
        let mut taps = Vec::with_capacity(8);
        for corner in 0..8 {
            let mut c = [0; 3];
            let mut w = 1.0;
            for i in 0..3 {
                if corner >> (2 - i) & 1 == 1 {
                    c[i] = hi[i];
                    w *= frac[i];
                } else {
                    c[i] = lo[i];
                    w *= 1.0 - frac[i];
                }
            }
            if w > 0.0 {
                taps.push((self.flat(c), w));
            }
        }
        Some(taps)
    }
}

/// Active cell sets of the sparse voxel pathway for one frame:
/// occupied cells, the first conv's output cells and the second conv's
/// output cells. Optionally the outputs are trimmed to the cells that some
/// query point actually reads, which leaves every sampled value unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelLayout {
    pub grid: GridSpec,
    pub occupied: Vec<usize>,
    pub hidden: Vec<usize>,
    pub output: Vec<usize>,
    /// For each vertex, its row in `occupied`.
    pub vertex_rows: Vec<usize>,
    output_rows: HashMap<usize, usize>,
}

fn dilate(grid: &GridSpec, cells: &BTreeSet<usize>) -> BTreeSet<usize> {
    cells
        .iter()
        .flat_map(|&c| grid.neighbors(grid.unflat(c)).into_iter().flatten())
        .collect()
}

impl VoxelLayout {
    pub fn new(grid: GridSpec, local_vertices: &[Vec3], focus: Option<&[Vec3]>) -> Result<Self> {
        let mut cell_of_vertex = Vec::with_capacity(local_vertices.len());
        for v in local_vertices {
            let c = grid
                .cell_of(*v)
                .ok_or_else(|| Error::invalid("vertex lies outside its own voxel grid"))?;
            cell_of_vertex.push(grid.flat(c));
        }
        let occupied: BTreeSet<usize> = cell_of_vertex.iter().copied().collect();
        let level1 = dilate(&grid, &occupied);
        let level2 = dilate(&grid, &level1);
        let (hidden, output) = match focus {
            None => (level1, level2),
            Some(points) => {
                let mut read: BTreeSet<usize> = points
                    .iter()
                    .filter_map(|&p| grid.trilinear(p))
                    .flatten()
                    .map(|(c, _)| c)
                    .filter(|c| level2.contains(c))
                    .collect();
                // Keep one cell so downstream tables are never empty.
                if read.is_empty() {
                    read.extend(level2.iter().next());
                }
                let hidden = dilate(&grid, &read)
                    .intersection(&level1)
                    .copied()
                    .collect();
                (hidden, read)
            }
        };
        let occupied: Vec<usize> = occupied.into_iter().collect();
        let occ_row: HashMap<usize, usize> =
            occupied.iter().enumerate().map(|(r, &c)| (c, r)).collect();
        let vertex_rows = cell_of_vertex.iter().map(|c| occ_row[c]).collect();
        let output: Vec<usize> = output.into_iter().collect();
        let output_rows = output.iter().enumerate().map(|(r, &c)| (c, r)).collect();
        Ok(VoxelLayout {
            grid,
            occupied,
            hidden: hidden.into_iter().collect(),
            output,
            vertex_rows,
            output_rows,
        })
    }

    pub fn output_row(&self, cell: usize) -> Option<usize> {
        self.output_rows.get(&cell).copied()
    }

    /// Scatter-mean of `views × vertices` feature rows into
    /// `views × occupied` cell rows.
    pub fn scatter_map<T: Real>(&self, views: usize) -> RowMap<T> {
        let l = self.vertex_rows.len();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.occupied.len()];
        for (i, &r) in self.vertex_rows.iter().enumerate() {
            members[r].push(i);
        }
        let mut map = RowMap::with_capacity(views * l, views * self.occupied.len(), views * l);
        for v in 0..views {
            for m in &members {
                let w = T::lit(1.0 / m.len() as f64);
                map.push_row(m.iter().map(|&i| (v * l + i, w)));
            }
        }
        map
    }

    fn conv_map<T: Real>(&self, views: usize, src: &[usize], dst: &[usize]) -> RowMap<T> {
        let src_row: HashMap<usize, usize> = src.iter().enumerate().map(|(r, &c)| (c, r)).collect();
        let mut map = RowMap::with_capacity(
            views * src.len(),
            views * dst.len() * NEIGHBORHOOD,
            views * dst.len() * NEIGHBORHOOD,
        );
        for v in 0..views {
            for &cell in dst {
                for n in self.grid.neighbors(self.grid.unflat(cell)) {
                    match n.and_then(|c| src_row.get(&c)) {
                        Some(&r) => map.push_row([(v * src.len() + r, T::one())]),
                        None => map.push_empty(),
                    }
                }
            }
        }
        map
    }

    /// im2col rows (`views × hidden × 27`) for the first conv.
    pub fn first_conv_map<T: Real>(&self, views: usize) -> RowMap<T> {
        self.conv_map(views, &self.occupied, &self.hidden)
    }

    /// im2col rows (`views × output × 27`) for the second conv.
    pub fn second_conv_map<T: Real>(&self, views: usize) -> RowMap<T> {
        self.conv_map(views, &self.hidden, &self.output)
    }

    /// Trilinear rows `(point, view)` into `views × output` cell rows.
    pub fn sample_map<T: Real>(&self, views: usize, points: &[Vec3]) -> RowMap<T> {
        let n = self.output.len();
        let mut map = RowMap::with_capacity(views * n, points.len() * views, points.len() * views * 8);
        for &p in points {
            let taps: Vec<(usize, f64)> = self
                .grid
                .trilinear(p)
                .unwrap_or_default()
                .into_iter()
                .filter_map(|(c, w)| self.output_row(c).map(|r| (r, w)))
                .collect();
            for v in 0..views {
                map.push_row(taps.iter().map(|&(r, w)| (v * n + r, T::lit(w))));
            }
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid() -> GridSpec {
        GridSpec {
            origin: [0.0; 3],
            edge: 1.0,
            dims: [4, 3, 5],
        }
    }

    #[test]
    fn flat_index_round_trips() {
        let g = unit_grid();
        for f in 0..g.cell_count() {
            assert_eq!(g.flat(g.unflat(f)), f);
        }
    }

    #[test]
    fn trilinear_at_center_and_midpoint() {
        let g = unit_grid();
        let c = g.center([1, 2, 3]);
        assert_eq!(g.trilinear(c).unwrap(), vec![(g.flat([1, 2, 3]), 1.0)]);
        let mid = [2.0, 1.5, 2.5];
        let mut taps = g.trilinear(mid).unwrap();
        taps.sort_by_key(|t| t.0);
        assert_eq!(taps, vec![(g.flat([1, 1, 2]), 0.5), (g.flat([2, 1, 2]), 0.5)]);
        assert!(g.trilinear([-0.1, 1.0, 1.0]).is_none());
        assert!(g.trilinear([1.0, 1.0, 5.2]).is_none());
    }

    #[test]
    fn trilinear_weights_sum_to_one_inside() {
        let g = unit_grid();
        for p in [[0.2, 0.3, 4.9], [3.3, 2.7, 0.05], [1.7, 1.1, 2.2]] {
            let s: f64 = g.trilinear(p).unwrap().iter().map(|t| t.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_covers_vertices_with_padding() {
        let verts = [[0.0, 0.0, 0.0], [1.0, 0.5, 0.25]];
        let g = GridSpec::around(&verts, 8, 0.025, 2).unwrap();
        assert!((g.edge - 1.025 / 8.0).abs() < 1e-12);
        assert_eq!(g.dims[0], 8 + 4);
        for v in verts {
            let c = g.cell_of(v).unwrap();
            assert!(c.iter().all(|&i| i >= 2));
        }
        assert!(GridSpec::around(&[[1.0, 1.0, 1.0]], 8, 0.025, 2).is_err());
    }

    #[test]
    fn focus_trims_outputs_to_read_cells() {
        let verts: Vec<Vec3> = (0..20).map(|i| [i as f64 * 0.05, 0.3, 0.1 * (i % 3) as f64]).collect();
        let g = GridSpec::around(&verts, 10, 0.025, 2).unwrap();
        let full = VoxelLayout::new(g.clone(), &verts, None).unwrap();
        let probe = [verts[4], [0.52, 0.31, 0.07]];
        let part = VoxelLayout::new(g, &verts, Some(&probe)).unwrap();
        assert!(part.output.len() <= 16 && !part.output.is_empty());
        assert!(part.output.iter().all(|c| full.output.contains(c)));
        assert!(part.hidden.iter().all(|c| full.hidden.contains(c)));
        assert!(full.hidden.len() > full.occupied.len());
    }
}
