//! Ray sampling, quadrature compositing and image rendering.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{FrameInputs, FrameState, FrozenFrame, Model};
use crate::geometry::{ray_box_bounds, Aabb, Camera, Ray, Vec3};
use crate::imaging::Image;
use crate::tensor::{ParamStore, Real, RowMap, Tape, Var};

pub const DEFAULT_SAMPLES: usize = 64;

/// Depths along a bounded ray with their quadrature intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub ray: Ray,
    pub depths: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn points(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.depths.iter().map(|&z| self.ray.at(z))
    }
}

/// One depth per equal bin of `[z_near, z_far]`: the bin center, or a
/// uniform draw inside the bin when `jitter` is given. Every interval,
/// including the last, is the bin width.
pub fn sample_points<R: Rng>(ray: &Ray, n: usize, jitter: Option<&mut R>) -> Result<RaySamples> {
    let (near, far) = ray
        .bounds
        .ok_or_else(|| Error::invalid("ray has no depth bounds"))?;
    if !(near < far) {
        return Err(Error::invalid(format!("empty depth range [{near}, {far}]")));
    }
    if n == 0 {
        return Err(Error::invalid("need at least one sample per ray"));
    }
    let bin = (far - near) / n as f64;
    let depths = match jitter {
        Some(rng) => (0..n)
            .map(|i| near + (i as f64 + rng.gen::<f64>()) * bin)
            .collect(),
        None => (0..n).map(|i| near + (i as f64 + 0.5) * bin).collect(),
    };
    Ok(RaySamples {
        ray: *ray,
        depths,
        deltas: vec![bin; n],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeResult {
    pub rgb: [f64; 3],
    /// Accumulated opacity `Σ w_i`.
    pub alpha: f64,
    pub weights: Vec<f64>,
    /// Transmittance before each sample.
    pub transmittance: Vec<f64>,
}

/// Front-to-back compositing: `α_i = 1 − exp(−σ_i δ_i)`,
/// `T_i = Π_{j<i}(1 − α_j)`, `w_i = T_i α_i`, `rgb = Σ w_i c_i`.
pub fn composite(sigma: &[f64], colors: &[[f64; 3]], deltas: &[f64]) -> Result<CompositeResult> {
    if sigma.len() != colors.len() || sigma.len() != deltas.len() {
        return Err(Error::Shape {
            op: "composite",
            lhs: vec![sigma.len(), colors.len()],
            rhs: vec![deltas.len()],
        });
    }
    if sigma.iter().chain(deltas).any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("composite needs non-negative sigma and delta"));
    }
    let n = sigma.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut rgb = [0.0; 3];
    let mut trans = 1.0;
    for i in 0..n {
        let decay = (-sigma[i] * deltas[i]).exp();
        let w = trans * (1.0 - decay);
        transmittance.push(trans);
        weights.push(w);
        for c in 0..3 {
            rgb[c] += w * colors[i][c];
        }
        trans *= decay;
    }
    Ok(CompositeResult {
        rgb,
        alpha: weights.iter().sum(),
        weights,
        transmittance,
    })
}

/// Rays through every pixel center of `cam`, bounded by `bounds`; rays that
/// miss the box keep `bounds == None`.
pub fn camera_rays(cam: &Camera, bounds: &Aabb) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut ray = cam.generate_ray([x as f64, y as f64])?;
            ray.bounds = ray_box_bounds(&ray, bounds);
            rays.push(ray);
        }
    }
    Ok(rays)
}

/// Sample layout for a ray batch: which rays are bounded, their samples
/// and the flattened points/directions fed to the field.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub rays: usize,
    pub samples: usize,
    /// Index into the batch of each bounded ray.
    pub hit: Vec<usize>,
    pub points: Vec<Vec3>,
    pub dirs: Vec<Vec3>,
    pub deltas: Vec<f64>,
}

impl RayBatch {
    pub fn new<R: Rng>(rays: &[Ray], samples: usize, mut jitter: Option<&mut R>) -> Result<Self> {
        let mut batch = RayBatch {
            rays: rays.len(),
            samples,
            hit: Vec::new(),
            points: Vec::new(),
            dirs: Vec::new(),
            deltas: Vec::new(),
        };
        for (i, ray) in rays.iter().enumerate() {
            if ray.bounds.is_none() {
                continue;
            }
            let s = sample_points(ray, samples, jitter.as_deref_mut())?;
            batch.hit.push(i);
            batch.points.extend(s.points());
            batch.dirs.extend(std::iter::repeat_n(ray.dir, samples));
            batch.deltas.extend(s.deltas);
        }
        Ok(batch)
    }
}

/// Composited colors `[rays × 3]` of a batch on `tape`; rays without bounds
/// stay black.
pub fn render_batch<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    state: &FrameState,
    batch: &RayBatch,
) -> Result<Var> {
    if batch.hit.is_empty() {
        return tape.constant(&[batch.rays, 3], vec![T::zero(); batch.rays * 3]);
    }
    let out = model.evaluate_points(tape, store, state, &batch.points, &batch.dirs)?;
    let n = batch.samples;
    let hits = batch.hit.len();
    let sigma = tape.reshape(out.sigma, &[hits, n])?;
    let rgb = tape.reshape(out.rgb, &[hits, n, 3])?;
    let deltas: Vec<T> = batch.deltas.iter().map(|&d| T::lit(d)).collect();
    let colors = tape.composite(sigma, rgb, &deltas)?;
    if hits == batch.rays {
        return Ok(colors);
    }
    let mut place = RowMap::with_capacity(hits, batch.rays, hits);
    let mut slot = vec![None; batch.rays];
    for (k, &i) in batch.hit.iter().enumerate() {
        slot[i] = Some(k);
    }
    for s in slot {
        match s {
            Some(k) => place.push_row([(k, T::one())]),
            None => place.push_empty(),
        }
    }
    tape.gather(colors, Arc::new(place))
}

/// Rendered image and per-pixel accumulated opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub image: Image,
    pub alpha: Vec<f32>,
}

/// Eval-mode rendering of `cam` at the query time of `inputs`: bin-centered
/// samples, rays missing the body box are black. Ray chunks are evaluated in
/// parallel against frozen frame tables, so the result does not depend on
/// the thread count.
pub fn render_image(
    model: &Model,
    store: &ParamStore<f32>,
    inputs: &FrameInputs,
    cam: &Camera,
    samples: usize,
    chunk: usize,
) -> Result<Rendering> {
    let mut tape = Tape::new();
    let state = model.prepare_frame(&mut tape, store, inputs, None)?;
    let frozen = FrozenFrame::freeze(&tape, &state);
    drop(tape);
    render_frozen(model, store, &frozen, cam, samples, chunk)
}

pub fn render_frozen(
    model: &Model,
    store: &ParamStore<f32>,
    frozen: &FrozenFrame<f32>,
    cam: &Camera,
    samples: usize,
    chunk: usize,
) -> Result<Rendering> {
    render_field(cam, frozen.bounds(), samples, chunk, |points, dirs| {
        let mut tape = Tape::new();
        let state = frozen.attach(&mut tape);
        let out = model.evaluate_points(&mut tape, store, &state, points, dirs)?;
        let sigma = tape.value(out.sigma).iter().map(|&v| v as f64).collect();
        let rgb = tape
            .value(out.rgb)
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Ok((sigma, rgb))
    })
}

/// Point field: densities and colors for world points seen along unit
/// directions.
pub type FieldOutput = (Vec<f64>, Vec<[f64; 3]>);

/// Renders any point field over the pixels of `cam` whose rays meet
/// `bounds`, `chunk` rays per field call, chunks in parallel.
pub fn render_field<F>(
    cam: &Camera,
    bounds: &Aabb,
    samples: usize,
    chunk: usize,
    field: F,
) -> Result<Rendering>
where
    F: Fn(&[Vec3], &[Vec3]) -> Result<FieldOutput> + Sync,
{
    let rays = camera_rays(cam, bounds)?;
    let hit: Vec<usize> = (0..rays.len()).filter(|&i| rays[i].bounds.is_some()).collect();
    let results: Vec<Vec<([f64; 3], f64)>> = hit
        .par_chunks(chunk.max(1))
        .map(|ids| -> Result<Vec<([f64; 3], f64)>> {
            let sub: Vec<Ray> = ids.iter().map(|&i| rays[i]).collect();
            let batch = RayBatch::new::<rand::rngs::ThreadRng>(&sub, samples, None)?;
            let (sigma, rgb) = field(&batch.points, &batch.dirs)?;
            if sigma.len() != batch.points.len() || rgb.len() != batch.points.len() {
                return Err(Error::invalid("field returned the wrong number of samples"));
            }
            (0..sub.len())
                .map(|r| {
                    let range = r * samples..(r + 1) * samples;
                    let res = composite(&sigma[range.clone()], &rgb[range.clone()], &batch.deltas[range])?;
                    Ok((res.rgb, res.alpha))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut image = Image::black(cam.width, cam.height);
    let mut alpha = vec![0.0f32; cam.width * cam.height];
    for (&i, (rgb, a)) in hit.iter().zip(results.into_iter().flatten()) {
        image.set_pixel(i % cam.width, i / cam.width, rgb.map(|v| v as f32));
        alpha[i] = a as f32;
    }
    Ok(Rendering { image, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bounded(near: f64, far: f64) -> Ray {
        Ray {
            origin: [0.0; 3],
            dir: [0.0, 0.0, 1.0],
            bounds: Some((near, far)),
        }
    }

    #[test]
    fn bin_centers_in_eval_mode() {
        let s = sample_points::<ChaCha8Rng>(&bounded(1.0, 2.0), 2, None).unwrap();
        assert_eq!(s.depths, vec![1.25, 1.75]);
        assert_eq!(s.deltas, vec![0.5, 0.5]);
        assert!(sample_points::<ChaCha8Rng>(&bounded(2.0, 2.0), 2, None).is_err());
    }

    #[test]
    fn jittered_depths_stay_in_their_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_points(&bounded(0.5, 4.5), 16, Some(&mut rng)).unwrap();
        for (i, z) in s.depths.iter().enumerate() {
            let lo = 0.5 + i as f64 * 0.25;
            assert!(*z >= lo && *z <= lo + 0.25);
        }
    }

    #[test]
    fn composite_examples() {
        let r = composite(&[0.0; 4], &[[1.0, 1.0, 1.0]; 4], &[0.25; 4]).unwrap();
        assert_eq!(r.rgb, [0.0; 3]);
        assert_eq!(r.alpha, 0.0);
        assert!(r.transmittance.iter().all(|&t| t == 1.0));

        let colors = [[0.2, 0.4, 0.6], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let r = composite(&[50.0, 3.0, 7.0], &colors, &[1.0, 1.0, 1.0]).unwrap();
        for c in 0..3 {
            assert!((r.rgb[c] - colors[0][c]).abs() < 1e-9);
        }
        assert!(r.weights[1] < 1e-20);
        assert!(composite(&[-1.0], &[[0.0; 3]], &[1.0]).is_err());
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        let exact = 1.0 - (-2.0f64).exp();
        for (n, tol) in [(64, 0.01), (2048, 1e-4)] {
            let ray = bounded(0.0, 1.0);
            let s = sample_points::<ChaCha8Rng>(&ray, n, None).unwrap();
            let r = composite(&vec![2.0; n], &vec![[1.0, 0.0, 0.0]; n], &s.deltas).unwrap();
            assert!((r.rgb[0] - exact).abs() / exact < tol);
        }
    }
}
