use std::sync::Arc;

use rand::Rng;

use super::bank::SkeletalBank;
use crate::error::Result;
use crate::nn::Linear;
use crate::tensor::{ParamStore, Real, RowMap, Tape, Var};

/// Query/key embeddings `d → d₀` and value embedding `d → d` of the
/// temporal attention. The value keeps width `d` so the residual with the
/// query-time feature is well defined.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl TemporalWeights {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, d: usize, d0: usize, rng: &mut R) -> Result<Self> {
        Ok(TemporalWeights {
            q: Linear::new(store, "temporal.q", d, d0, rng)?,
            k: Linear::new(store, "temporal.k", d, d0, rng)?,
            v: Linear::new(store, "temporal.v", d, d, rng)?,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, d: usize, d0: usize) -> Result<Self> {
        Ok(TemporalWeights {
            q: Linear::lookup(store, "temporal.q", d, d0)?,
            k: Linear::lookup(store, "temporal.k", d, d0)?,
            v: Linear::lookup(store, "temporal.v", d, d)?,
        })
    }
}

fn slot_map<T: Real>(bank: &SkeletalBank, pick: impl Fn(usize) -> bool) -> RowMap<T> {
    let rows = bank.views * bank.vertices;
    let mut map = RowMap::new(rows * bank.slots);
    for r in 0..rows {
        for s in (0..bank.slots).filter(|&s| pick(s)) {
            map.push_row([(r * bank.slots + s, T::one())]);
        }
    }
    map
}

/// Masked mean over all slots of each (view, vertex); all-invalid rows are
/// zero.
fn pooled_map<T: Real>(bank: &SkeletalBank) -> RowMap<T> {
    let rows = bank.views * bank.vertices;
    let mut map = RowMap::new(rows * bank.slots);
    for r in 0..rows {
        let ok: Vec<usize> = (0..bank.slots)
            .map(|s| r * bank.slots + s)
            .filter(|&i| bank.valid[i])
            .collect();
        let w = T::lit(1.0 / ok.len().max(1) as f64);
        map.push_row(ok.into_iter().map(|i| (i, w)));
    }
    map
}

/// Query-time rows, memory rows and the attention `[rows × m]` of each
/// (view, vertex) over its memory slots; `None` without memory.
fn attend<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &TemporalWeights,
    bank: &SkeletalBank,
) -> Result<Option<(Var, Var, Var)>> {
    let rows = bank.views * bank.vertices;
    let m = bank.slots - 1;
    if m == 0 {
        return Ok(None);
    }
    let s_t = tape.gather(bank.features, Arc::new(slot_map(bank, |s| s == 0)))?;
    let mem = tape.gather(bank.features, Arc::new(slot_map(bank, |s| s > 0)))?;
    let d0 = w.q.fan_out;
    let q = w.q.forward(tape, store, s_t)?;
    let q = tape.reshape(q, &[rows, 1, d0])?;
    let k = w.k.forward(tape, store, mem)?;
    let k = tape.reshape(k, &[rows, m, d0])?;
    let logits = tape.bmm(q, k, true)?;
    let logits = tape.scale(logits, T::lit(1.0 / (d0 as f64).sqrt()));
    let logits = tape.reshape(logits, &[rows, m])?;
    let mask: Vec<bool> = (0..rows)
        .flat_map(|r| (1..bank.slots).map(move |s| r * bank.slots + s))
        .map(|i| bank.valid[i])
        .collect();
    let att = tape.softmax_rows_masked(logits, Some(&mask))?;
    Ok(Some((s_t, mem, att)))
}

/// Temporal attention weights `[views·vertices × memory slots]`. Rows
/// whose memory entries are all invalid are zero.
pub fn temporal_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &TemporalWeights,
    bank: &SkeletalBank,
) -> Result<Option<Var>> {
    Ok(attend(tape, store, w, bank)?.map(|(_, _, att)| att))
}

/// Fuses each vertex's memory observations into its query-time feature.
///
/// With weights: per (view, vertex), attention of `q(s_t)` over
/// `k(s_m)` for the memory slots, scaled by `1/√d₀`, invalid memory entries
/// masked out; `s′ = Σ_m a_m v(s_m) + s_t`. A vertex with no valid memory
/// observation keeps `s′ = s_t`. Without weights the slots (query time
/// included) are average-pooled over the valid ones.
///
/// Returns `[views·vertices × d]`.
pub fn temporal_fuse<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    weights: Option<&TemporalWeights>,
    bank: &SkeletalBank,
) -> Result<Var> {
    let rows = bank.views * bank.vertices;
    let d = tape.shape(bank.features)[1];
    let Some(w) = weights else {
        return tape.gather(bank.features, Arc::new(pooled_map(bank)));
    };
    let Some((s_t, mem, att)) = attend(tape, store, w, bank)? else {
        return tape.gather(bank.features, Arc::new(slot_map(bank, |s| s == 0)));
    };
    let m = bank.slots - 1;
    let att = tape.reshape(att, &[rows, 1, m])?;
    let v = w.v.forward(tape, store, mem)?;
    let v = tape.reshape(v, &[rows, m, d])?;
    let fused = tape.bmm(att, v, false)?;
    let fused = tape.reshape(fused, &[rows, d])?;
    tape.add(fused, s_t)
}
