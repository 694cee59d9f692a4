use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{norm, Vec3};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Real, Tape, Var};

/// `γ(d)`: for each frequency `k < l`, `sin(2ᵏπ d_j)` for x, y, z followed
/// by `cos(2ᵏπ d_j)`. Directions within 1e-3 of unit length are
/// renormalized; anything further off is rejected.
pub fn posenc_dir(d: Vec3, l: usize) -> Result<Vec<f64>> {
    let n = norm(d);
    if !((n - 1.0).abs() <= 1e-3) {
        return Err(Error::invalid(format!("view direction has length {n}, expected 1")));
    }
    let d = d.map(|v| v / n);
    let mut out = Vec::with_capacity(6 * l);
    for k in 0..l {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(d.iter().map(|&v| (f * v).sin()));
        out.extend(d.iter().map(|&v| (f * v).cos()));
    }
    Ok(out)
}

/// Density MLP (four affine layers, relu between) and color MLP (two affine
/// layers).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub sigma: [Linear; 4],
    pub rgb: [Linear; 2],
    pub dir_freqs: usize,
}

impl HeadWeights {
    fn shapes(d1: usize, hidden: usize, l: usize) -> ([(usize, usize); 4], [(usize, usize); 2]) {
        (
            [(d1, hidden), (hidden, hidden), (hidden, hidden), (hidden, 1)],
            [(d1 + 6 * l, hidden), (hidden, 3)],
        )
    }

    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        d1: usize,
        hidden: usize,
        l: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (s, c) = Self::shapes(d1, hidden, l);
        let mut sigma = Vec::with_capacity(4);
        for (i, &(a, b)) in s.iter().enumerate() {
            sigma.push(Linear::new(store, &format!("head.sigma.l{i}"), a, b, rng)?);
        }
        let mut rgb = Vec::with_capacity(2);
        for (i, &(a, b)) in c.iter().enumerate() {
            rgb.push(Linear::new(store, &format!("head.rgb.l{i}"), a, b, rng)?);
        }
        Ok(HeadWeights {
            sigma: sigma.try_into().expect("four layers"),
            rgb: rgb.try_into().expect("two layers"),
            dir_freqs: l,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, d1: usize, hidden: usize, l: usize) -> Result<Self> {
        let (s, c) = Self::shapes(d1, hidden, l);
        let sigma = s
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Linear::lookup(store, &format!("head.sigma.l{i}"), a, b))
            .collect::<Result<Vec<_>>>()?;
        let rgb = c
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Linear::lookup(store, &format!("head.rgb.l{i}"), a, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(HeadWeights {
            sigma: sigma.try_into().expect("four layers"),
            rgb: rgb.try_into().expect("two layers"),
            dir_freqs: l,
        })
    }

    /// Zeroes the last layer of both MLPs, so every point evaluates to
    /// `σ = softplus(0)` and `rgb = (½, ½, ½)`.
    pub fn zero_final_layers<T: Real>(&self, store: &mut ParamStore<T>) {
        self.sigma[3].zero(store);
        self.rgb[1].zero(store);
    }

    /// `σ = softplus(MLP_σ(z_mean))` as `[points]` and
    /// `rgb = sigmoid(MLP_rgb([z_color, γ(d)]))` as `[points × 3]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z_mean: Var,
        z_color: Var,
        dir_code: Var,
    ) -> Result<(Var, Var)> {
        let points = tape.shape(z_mean)[0];
        let mut h = z_mean;
        for (i, layer) in self.sigma.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < 3 {
                h = tape.relu(h);
            }
        }
        let sigma = tape.softplus(h);
        let sigma = tape.reshape(sigma, &[points])?;
        let x = tape.concat(&[z_color, dir_code], 1)?;
        let h = self.rgb[0].forward(tape, store, x)?;
        let h = tape.relu(h);
        let c = self.rgb[1].forward(tape, store, h)?;
        let rgb = tape.sigmoid(c);
        Ok((sigma, rgb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posenc_examples() {
        let g = posenc_dir([0.0, 0.0, 1.0], 1).unwrap();
        let expect = [0.0, 0.0, 0.0, 1.0, 1.0, -1.0];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(posenc_dir([0.6, 0.8, 0.0], 4).unwrap().len(), 24);
        let d = [0.48, -0.6, 0.64];
        let (a, b) = (posenc_dir(d, 4).unwrap(), posenc_dir(d.map(|v| -v), 4).unwrap());
        for k in 0..4 {
            for j in 0..3 {
                let i = 6 * k + j;
                if a[i].abs() > 1e-9 {
                    assert!(a[i] * b[i] < 0.0);
                }
            }
        }
        assert!(posenc_dir([0.0, 0.0, 1.0005], 2).is_ok());
        assert!(posenc_dir([0.0, 0.0, 1.1], 2).is_err());
    }
}
