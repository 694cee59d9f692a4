//! Affine layers backed by a [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{name}.w` (`[in×out]`, He-uniform) and `{name}.b` (zeros).
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<T> = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        let w = store.insert(&format!("{name}.w"), Tensor::new(&[fan_in, fan_out], w)?)?;
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    /// Finds an existing layer by name and checks its shape.
    pub fn lookup<T: Real>(
        store: &ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let find = |suffix: &str, shape: &[usize]| -> Result<ParamId> {
            let full = format!("{name}.{suffix}");
            let id = store
                .id(&full)
                .ok_or_else(|| Error::invalid(format!("missing parameter {full}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Shape {
                    op: "parameter",
                    lhs: shape.to_vec(),
                    rhs: store.get(id).shape().to_vec(),
                });
            }
            Ok(id)
        };
        Ok(Linear {
            w: find("w", &[fan_in, fan_out])?,
            b: find("b", &[fan_out])?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }

    /// `x·W` without the bias.
    pub fn forward_weight<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        tape.matmul(x, w)
    }

    pub fn zero<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in [self.w, self.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
