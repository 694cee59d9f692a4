//! Convolutional image encoder and pixel-aligned feature sampling.
//!
//! Convolutions are expressed as a fixed gather (im2col with edge-replicated
//! borders) followed by a matmul, so they run on the ordinary tape ops.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::Linear;
use crate::tensor::{ParamStore, Real, RowMap, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub c1: usize,
    pub c2: usize,
    pub d_img: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            c1: 16,
            c2: 32,
            d_img: 32,
        }
    }
}

/// Three 3×3 conv stages: stride 2, then two stride-1, relu after each.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    convs: [Linear; 3],
}

const STAGES: [(&str, usize); 3] = [
    ("encoder.conv1", 2),
    ("encoder.conv2", 1),
    ("encoder.conv3", 1),
];

impl Encoder {
    fn widths(cfg: &EncoderConfig) -> [(usize, usize); 3] {
        [(3, cfg.c1), (cfg.c1, cfg.c2), (cfg.c2, cfg.d_img)]
    }

    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Self::widths(&cfg);
        let mut make = |i: usize| Linear::new(store, STAGES[i].0, 9 * w[i].0, w[i].1, rng);
        Ok(Encoder {
            cfg,
            convs: [make(0)?, make(1)?, make(2)?],
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, cfg: EncoderConfig) -> Result<Self> {
        let w = Self::widths(&cfg);
        let find = |i: usize| Linear::lookup(store, STAGES[i].0, 9 * w[i].0, w[i].1);
        Ok(Encoder {
            cfg,
            convs: [find(0)?, find(1)?, find(2)?],
        })
    }

    pub fn layers(&self) -> &[Linear; 3] {
        &self.convs
    }

    /// Encodes a batch of equally sized images. Returns the feature maps
    /// stacked as `[n·(H/2)·(W/2) × d_img]`, image-major then row-major.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: &[&Image],
    ) -> Result<Var> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("encode needs at least one image"))?;
        let (w, h) = (first.width, first.height);
        if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
            return Err(Error::invalid(format!(
                "encoder needs even image dimensions, got {w}×{h}"
            )));
        }
        if images.iter().any(|im| im.width != w || im.height != h) {
            return Err(Error::invalid("encoder batch mixes image sizes"));
        }
        let n = images.len();
        let pixels: Vec<T> = images
            .iter()
            .flat_map(|im| im.data.iter().map(|&v| T::lit(v as f64)))
            .collect();
        let mut x = tape.constant(&[n * h * w, 3], pixels)?;
        let (mut cw, mut ch) = (w, h);
        for (layer, &(_, stride)) in self.convs.iter().zip(&STAGES) {
            let map = Arc::new(conv_gather_map::<T>(n, cw, ch, stride));
            let (ow, oh) = (cw.div_ceil(stride), ch.div_ceil(stride));
            let cols = tape.gather(x, map)?;
            let cols = tape.reshape(cols, &[n * oh * ow, layer.fan_in])?;
            let y = layer.forward(tape, store, cols)?;
            x = tape.relu(y);
            (cw, ch) = (ow, oh);
        }
        Ok(x)
    }
}

/// im2col rows for a 3×3 convolution over `n` images of `w×h` with
/// edge-replicated borders: output row `(img, oy, ox, ky, kx)` copies input
/// pixel `(img, clamp(s·oy+ky−1), clamp(s·ox+kx−1))`.
pub fn conv_gather_map<T: Real>(n: usize, w: usize, h: usize, stride: usize) -> RowMap<T> {
    let (ow, oh) = (w.div_ceil(stride), h.div_ceil(stride));
    let mut map = RowMap::with_capacity(n * w * h, n * ow * oh * 9, n * ow * oh * 9);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        let y = clamp((oy * stride) as isize + ky - 1, h);
                        let x = clamp((ox * stride) as isize + kx - 1, w);
                        map.push_row([(img * w * h + y * w + x, T::one())]);
                    }
                }
            }
        }
    }
    map
}

/// Bilinear taps for pixel `p` (source-image coordinates) on the half
/// resolution feature grid of an `img_w×img_h` image. Points outside the
/// image rectangle have no taps. Inside, the feature coordinate `p/2` is
/// clamped to the grid so border pixels reuse the outermost sites.
pub fn bilinear_taps(p: [f64; 2], img_w: usize, img_h: usize) -> Option<[(usize, f64); 4]> {
    let inside = p[0] >= -0.5
        && p[1] >= -0.5
        && p[0] <= img_w as f64 - 0.5
        && p[1] <= img_h as f64 - 0.5;
    if !inside || !p[0].is_finite() || !p[1].is_finite() {
        return None;
    }
    let (fw, fh) = (img_w / 2, img_h / 2);
    let axis = |q: f64, n: usize| -> (usize, usize, f64) {
        let q = q.clamp(0.0, (n - 1) as f64);
        let i0 = (q.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, q - i0 as f64)
    };
    let (x0, x1, fx) = axis(p[0] / 2.0, fw);
    let (y0, y1, fy) = axis(p[1] / 2.0, fh);
    Some([
        (y0 * fw + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * fw + x1, fx * (1.0 - fy)),
        (y1 * fw + x0, (1.0 - fx) * fy),
        (y1 * fw + x1, fx * fy),
    ])
}

/// Dense feature map of one encoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    /// `[H/2 × W/2 × d_img]`.
    pub features: Tensor<T>,
    pub camera: usize,
    pub t: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Runs the encoder on a single image outside of any training tape.
pub fn encode_image<T: Real>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    image: &Image,
    camera: usize,
    t: usize,
) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let v = encoder.encode(&mut tape, store, &[image])?;
    let features = Tensor::new(
        &[image.height / 2, image.width / 2, encoder.cfg.d_img],
        tape.value(v).to_vec(),
    )?;
    Ok(FeatureMap {
        features,
        camera,
        t,
    })
}

/// Bilinear feature at pixel `p` of the source image; zeros outside it.
pub fn sample_pixel_aligned<T: Real>(fm: &FeatureMap<T>, p: [f64; 2]) -> Vec<T> {
    let d = fm.channels();
    let mut out = vec![T::zero(); d];
    if let Some(taps) = bilinear_taps(p, fm.width() * 2, fm.height() * 2) {
        let data = fm.features.data();
        for (site, w) in taps {
            let w = T::lit(w);
            for (o, &f) in out.iter_mut().zip(&data[site * d..(site + 1) * d]) {
                *o += w * f;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder<T: Real>(store: &mut ParamStore<T>) -> Encoder {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Encoder::new(store, EncoderConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn output_is_half_resolution() {
        let mut store = ParamStore::<f32>::new();
        let enc = encoder(&mut store);
        let fm = encode_image(&enc, &store, &Image::black(64, 64), 0, 0).unwrap();
        assert_eq!(fm.features.shape(), &[32, 32, 32]);
        assert!(encode_image(&enc, &store, &Image::black(63, 64), 0, 0).is_err());
    }

    #[test]
    fn constant_image_gives_constant_features() {
        let mut store = ParamStore::<f64>::new();
        let enc = encoder(&mut store);
        let fm = encode_image(&enc, &store, &Image::filled(16, 12, [0.2, 0.7, 0.4]), 0, 0).unwrap();
        let d = fm.channels();
        let data = fm.features.data();
        assert!(data.iter().any(|&v| v != 0.0));
        for site in data.chunks(d) {
            for (a, b) in site.iter().zip(&data[..d]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn taps_at_sites_and_midpoints() {
        // Feature site (3, 2) sits at source pixel (6, 4).
        let taps = bilinear_taps([6.0, 4.0], 16, 16).unwrap();
        let hit: Vec<_> = taps.iter().filter(|t| t.1 > 0.0).collect();
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].0, 2 * 8 + 3);
        let taps = bilinear_taps([7.0, 4.0], 16, 16).unwrap();
        let mut w = [0.0; 64];
        taps.iter().for_each(|&(i, v)| w[i] += v);
        assert_eq!(w[2 * 8 + 3], 0.5);
        assert_eq!(w[2 * 8 + 4], 0.5);
        assert!(bilinear_taps([-0.6, 3.0], 16, 16).is_none());
        assert!(bilinear_taps([3.0, 15.6], 16, 16).is_none());
    }

    #[test]
    fn sampling_outside_is_zero() {
        let fm = FeatureMap {
            features: Tensor::<f64>::full(&[4, 4, 2], 1.0),
            camera: 0,
            t: 0,
        };
        assert_eq!(sample_pixel_aligned(&fm, [3.0, 3.0]), vec![1.0, 1.0]);
        assert_eq!(sample_pixel_aligned(&fm, [9.0, 3.0]), vec![0.0, 0.0]);
    }
}
