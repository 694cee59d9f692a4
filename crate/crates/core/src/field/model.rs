use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bank::{gather_bank, pixel_map, FrameInputs};
use super::grid::{GridSpec, VoxelLayout};
use super::head::{posenc_dir, HeadWeights};
use super::multiview::{fuse_embedded, pool_views, Embedded, MultiViewWeights};
use super::temporal::{temporal_fuse, TemporalWeights};
use super::voxel::{diffuse_to_voxels, VoxelWeights};
use super::ModelConfig;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::geometry::{body_bbox, Aabb, BodyPose, Camera, Vec3};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Real, RowMap, Tape, Tensor, Var};

/// Handles to every learnable part of the field. Weights live in a
/// [`ParamStore`]; the model only records which entries it uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub temporal: Option<TemporalWeights>,
    pub voxel: Option<VoxelWeights>,
    pub multiview: MultiViewWeights,
    pub heads: HeadWeights,
}

/// Independent random stream per module so that variants sharing a module
/// also share its initial weights.
fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Model {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.ablation;
        let d = cfg.d_img;
        let encoder = Encoder::new(store, cfg.encoder(), &mut module_rng(seed, 1))?;
        let temporal = if a.skeletal && a.temporal {
            Some(TemporalWeights::new(store, d, cfg.d_temporal, &mut module_rng(seed, 2))?)
        } else {
            None
        };
        let voxel = if a.skeletal {
            Some(VoxelWeights::new(store, d, &mut module_rng(seed, 3))?)
        } else {
            None
        };
        let multiview = MultiViewWeights::new(
            store,
            d,
            cfg.d_multiview,
            a.multiview,
            cfg.separate_query,
            &mut module_rng(seed, 4),
        )?;
        let heads = HeadWeights::new(
            store,
            cfg.d_multiview,
            cfg.hidden,
            cfg.dir_freqs,
            &mut module_rng(seed, 5),
        )?;
        Ok(Model {
            cfg,
            encoder,
            temporal,
            voxel,
            multiview,
            heads,
        })
    }

    /// Parameter names a model with `cfg` owns, in creation order.
    pub fn param_names(cfg: &ModelConfig) -> Result<Vec<String>> {
        let mut scratch = ParamStore::<f32>::new();
        Model::new(&mut scratch, cfg.clone(), 0)?;
        Ok(scratch.names().to_vec())
    }

    /// Binds to existing weights; the store must hold exactly the
    /// parameters `cfg` calls for.
    pub fn lookup<T: Real>(store: &ParamStore<T>, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let expected: BTreeSet<String> = Model::param_names(&cfg)?.into_iter().collect();
        let present: BTreeSet<String> = store.names().iter().cloned().collect();
        let missing: Vec<String> = expected.difference(&present).cloned().collect();
        let extra: Vec<String> = present.difference(&expected).cloned().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParamMismatch { missing, extra });
        }
        let a = cfg.ablation;
        let d = cfg.d_img;
        Ok(Model {
            encoder: Encoder::lookup(store, cfg.encoder())?,
            temporal: if a.skeletal && a.temporal {
                Some(TemporalWeights::lookup(store, d, cfg.d_temporal)?)
            } else {
                None
            },
            voxel: if a.skeletal {
                Some(VoxelWeights::lookup(store, d)?)
            } else {
                None
            },
            multiview: MultiViewWeights::lookup(
                store,
                d,
                cfg.d_multiview,
                a.multiview,
                cfg.separate_query,
            )?,
            heads: HeadWeights::lookup(store, cfg.d_multiview, cfg.hidden, cfg.dir_freqs)?,
            cfg,
        })
    }

    /// Encodes the inputs and builds every per-frame table the point
    /// evaluation reads. `focus` (world points) restricts the voxel outputs
    /// to the cells those points sample; values at those points are
    /// unaffected.
    pub fn prepare_frame<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &FrameInputs,
        focus: Option<&[Vec3]>,
    ) -> Result<FrameState> {
        let a = self.cfg.ablation;
        let views = inputs.views();
        let (w, h) = inputs.image_size();
        let sites = (w / 2) * (h / 2);
        let slots = if a.skeletal { inputs.slots() } else { 1 };
        let encoded = self.encoder.encode(tape, store, &inputs.batch(slots))?;
        let query_frame = inputs.frames[0];
        let bounds = body_bbox(&query_frame.vertices, self.cfg.bbox_margin)?;
        let mv = &self.multiview;

        let pixel = if a.pixel_aligned {
            let mut pick = RowMap::new(views * slots * sites);
            for v in 0..views {
                for s in 0..sites {
                    pick.push_row([(v * slots * sites + s, T::one())]);
                }
            }
            let now = tape.gather(encoded, Arc::new(pick))?;
            let key = match &mv.k {
                Some(k) => Some(k.forward_weight(tape, store, now)?),
                None => None,
            };
            Some(Projected {
                query: None,
                key,
                value: mv.v.forward_weight(tape, store, now)?,
            })
        } else {
            None
        };

        let grid = if a.skeletal {
            let voxel = self.voxel.as_ref().expect("skeletal model has voxel weights");
            let bank = gather_bank(tape, encoded, inputs)?;
            let fused = temporal_fuse(tape, store, self.temporal.as_ref(), &bank)?;
            let local = query_frame.local_vertices();
            let spec = GridSpec::around(
                &local,
                self.cfg.grid_divisions,
                self.cfg.bbox_margin,
                self.cfg.grid_padding,
            )?;
            let focus_local: Option<Vec<Vec3>> = focus.map(|pts| {
                pts.iter()
                    .map(|&p| query_frame.pose.world_to_body(p))
                    .collect()
            });
            let layout = Arc::new(VoxelLayout::new(spec, &local, focus_local.as_deref())?);
            let grid = diffuse_to_voxels(tape, store, voxel, fused, views, layout.clone())?;
            let query = match mv.query_map() {
                Some(q) => Some(q.forward_weight(tape, store, grid.features)?),
                None => None,
            };
            Some((
                layout,
                Projected {
                    query,
                    key: None,
                    value: mv.v.forward_weight(tape, store, grid.features)?,
                },
            ))
        } else {
            None
        };

        Ok(FrameState {
            cameras: inputs.cameras.clone(),
            pose: query_frame.pose,
            bounds,
            pixel,
            grid,
        })
    }

    /// Density `[points]` and color `[points × 3]` for world points viewed
    /// along unit directions `dirs`.
    pub fn evaluate_points<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        state: &FrameState,
        points: &[Vec3],
        dirs: &[Vec3],
    ) -> Result<PointOutput> {
        if points.len() != dirs.len() {
            return Err(Error::invalid("one view direction per point is required"));
        }
        if points.is_empty() {
            return Err(Error::invalid("no points to evaluate"));
        }
        let p = points.len();
        let views = state.cameras.len();
        let (map, valid) = pixel_map::<T>(&state.cameras, points, 1);
        let map = Arc::new(map);
        let mv = &self.multiview;
        let mut e = Embedded::default();
        let sample = |tape: &mut Tape<T>, table: Var, map: &Arc<RowMap<T>>, lin: &Linear| -> Result<Var> {
            let x = tape.gather(table, map.clone())?;
            let b = tape.param(store, lin.b);
            tape.add_row(x, b)
        };
        if let Some(px) = &state.pixel {
            e.value_p = Some(sample(tape, px.value, &map, &mv.v)?);
            if let (Some(key), Some(k)) = (px.key, mv.k.as_ref()) {
                e.key_p = Some(sample(tape, key, &map, k)?);
            }
        }
        if let Some((layout, sk)) = &state.grid {
            let local: Vec<Vec3> = points.iter().map(|&x| state.pose.world_to_body(x)).collect();
            let smap = Arc::new(layout.sample_map::<T>(views, &local));
            e.value_s = Some(sample(tape, sk.value, &smap, &mv.v)?);
            if let (Some(query), Some(q)) = (sk.query, mv.query_map()) {
                e.query_s = Some(sample(tape, query, &smap, q)?);
            }
        }
        let z = fuse_embedded(tape, &e, &valid, p, views)?;
        let z_mean = pool_views(tape, z, p, views, None)?;
        let z_color = pool_views(tape, z, p, views, Some(&valid))?;
        let l = self.cfg.dir_freqs;
        let mut code = Vec::with_capacity(p * 6 * l);
        for &d in dirs {
            code.extend(posenc_dir(d, l)?.into_iter().map(T::lit));
        }
        let code = tape.constant(&[p, 6 * l], code)?;
        let (sigma, rgb) = self.heads.forward(tape, store, z_mean, z_color, code)?;
        Ok(PointOutput {
            sigma,
            rgb,
            z,
            z_mean,
            valid,
        })
    }
}

/// Feature table after the (bias-free) multi-view embeddings.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    pub query: Option<Var>,
    pub key: Option<Var>,
    pub value: Var,
}

/// Everything point evaluation needs from one query frame.
#[derive(Clone, Debug)]
pub struct FrameState {
    pub cameras: Vec<Camera>,
    /// World → body-local transform at the query time.
    pub pose: BodyPose,
    /// World-space body box used to bound rays.
    pub bounds: Aabb,
    pub pixel: Option<Projected>,
    pub grid: Option<(Arc<VoxelLayout>, Projected)>,
}

#[derive(Clone, Debug)]
pub struct PointOutput {
    pub sigma: Var,
    pub rgb: Var,
    pub z: Var,
    pub z_mean: Var,
    /// Per-(point, view) pixel validity.
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug)]
struct FrozenProjected<T> {
    query: Option<Tensor<T>>,
    key: Option<Tensor<T>>,
    value: Tensor<T>,
}

impl<T: Real> FrozenProjected<T> {
    fn freeze(tape: &Tape<T>, p: &Projected) -> Self {
        FrozenProjected {
            query: p.query.map(|v| tape.tensor(v)),
            key: p.key.map(|v| tape.tensor(v)),
            value: tape.tensor(p.value),
        }
    }

    fn attach(&self, tape: &mut Tape<T>) -> Projected {
        Projected {
            query: self.query.as_ref().map(|t| tape.leaf(t)),
            key: self.key.as_ref().map(|t| tape.leaf(t)),
            value: tape.leaf(&self.value),
        }
    }
}

/// Tape-independent copy of a [`FrameState`] so that many threads can
/// evaluate points against the same frame, each on its own tape.
#[derive(Clone, Debug)]
pub struct FrozenFrame<T> {
    cameras: Vec<Camera>,
    pose: BodyPose,
    bounds: Aabb,
    pixel: Option<FrozenProjected<T>>,
    grid: Option<(Arc<VoxelLayout>, FrozenProjected<T>)>,
}

impl<T: Real> FrozenFrame<T> {
    pub fn freeze(tape: &Tape<T>, state: &FrameState) -> Self {
        FrozenFrame {
            cameras: state.cameras.clone(),
            pose: state.pose,
            bounds: state.bounds,
            pixel: state.pixel.as_ref().map(|p| FrozenProjected::freeze(tape, p)),
            grid: state
                .grid
                .as_ref()
                .map(|(l, p)| (l.clone(), FrozenProjected::freeze(tape, p))),
        }
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn attach(&self, tape: &mut Tape<T>) -> FrameState {
        FrameState {
            cameras: self.cameras.clone(),
            pose: self.pose,
            bounds: self.bounds,
            pixel: self.pixel.as_ref().map(|p| p.attach(tape)),
            grid: self.grid.as_ref().map(|(l, p)| (l.clone(), p.attach(tape))),
        }
    }
}
