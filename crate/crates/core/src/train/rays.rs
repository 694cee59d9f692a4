use rand::Rng;

use crate::error::Result;
use crate::geometry::{Camera, Ray};
use crate::imaging::{Image, Mask};

/// Pixels drawn for one step with their camera rays and target colors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRays {
    pub pixels: Vec<(usize, usize)>,
    /// Unbounded rays through the pixel centers.
    pub rays: Vec<Ray>,
    /// `[n × 3]` ground-truth colors.
    pub targets: Vec<f32>,
    /// Set when the body mask was empty and every ray came from the
    /// background.
    pub empty_mask: bool,
}

/// Draws `n` pixels with replacement: `round(n·fg)` from the body mask grown
/// by `dilation` pixels and the rest from outside it. An empty mask falls
/// back to background-only sampling (logged as a warning), a mask covering
/// the whole image to foreground-only.
pub fn sample_training_rays<R: Rng>(
    image: &Image,
    mask: &Mask,
    cam: &Camera,
    n: usize,
    fg: f64,
    dilation: usize,
    rng: &mut R,
) -> Result<TrainingRays> {
    let grown = mask.dilate(dilation);
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for y in 0..grown.height {
        for x in 0..grown.width {
            if grown.get(x, y) {
                inside.push((x, y));
            } else {
                outside.push((x, y));
            }
        }
    }
    let empty_mask = inside.is_empty();
    if empty_mask {
        log::warn!("empty body mask: sampling {n} background rays");
    }
    let n_fg = if empty_mask {
        0
    } else if outside.is_empty() {
        n
    } else {
        ((n as f64) * fg).round() as usize
    };
    let mut pixels = Vec::with_capacity(n);
    for i in 0..n {
        let pool = if i < n_fg { &inside } else { &outside };
        pixels.push(pool[rng.gen_range(0..pool.len())]);
    }
    let mut rays = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(3 * n);
    for &(x, y) in &pixels {
        rays.push(cam.generate_ray([x as f64, y as f64])?);
        targets.extend(image.pixel(x, y));
    }
    Ok(TrainingRays {
        pixels,
        rays,
        targets,
        empty_mask,
    })
}
