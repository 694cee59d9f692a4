use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Real, RowMap, Tape, Var};

/// Embeddings of the multi-view attention, independent of the temporal ones.
/// `k` embeds both skeletal (query side) and pixel-aligned (key side)
/// features unless a separate query map `q` is configured. Without
/// attention only the value map `v` exists.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewWeights {
    pub k: Option<Linear>,
    pub q: Option<Linear>,
    pub v: Linear,
}

impl MultiViewWeights {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        d: usize,
        d1: usize,
        attention: bool,
        separate_query: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let k = if attention {
            Some(Linear::new(store, "multiview.k", d, d1, rng)?)
        } else {
            None
        };
        let q = if attention && separate_query {
            Some(Linear::new(store, "multiview.q", d, d1, rng)?)
        } else {
            None
        };
        let v = Linear::new(store, "multiview.v", d, d1, rng)?;
        Ok(MultiViewWeights { k, q, v })
    }

    pub fn lookup<T: Real>(
        store: &ParamStore<T>,
        d: usize,
        d1: usize,
        attention: bool,
        separate_query: bool,
    ) -> Result<Self> {
        let k = if attention {
            Some(Linear::lookup(store, "multiview.k", d, d1)?)
        } else {
            None
        };
        let q = if attention && separate_query {
            Some(Linear::lookup(store, "multiview.q", d, d1)?)
        } else {
            None
        };
        Ok(MultiViewWeights {
            k,
            q,
            v: Linear::lookup(store, "multiview.v", d, d1)?,
        })
    }

    /// Map applied to skeletal features on the query side.
    pub fn query_map(&self) -> Option<&Linear> {
        self.q.as_ref().or(self.k.as_ref())
    }

    pub fn width(&self) -> usize {
        self.v.fan_out
    }
}

/// Embedded per-(point, view) features, each `[points·views × d₁]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Embedded {
    pub query_s: Option<Var>,
    pub key_p: Option<Var>,
    pub value_s: Option<Var>,
    pub value_p: Option<Var>,
}

/// Attention `[points·views × views]` of each (point, query view) over the
/// key views: `softmax(q_s · k_pᵀ / √d₁)` with invalid key views masked.
pub fn mv_attention<T: Real>(
    tape: &mut Tape<T>,
    query_s: Var,
    key_p: Var,
    valid: &[bool],
    points: usize,
    views: usize,
) -> Result<Var> {
    let d1 = tape.shape(query_s)[1];
    let q = tape.reshape(query_s, &[points, views, d1])?;
    let k = tape.reshape(key_p, &[points, views, d1])?;
    let logits = tape.bmm(q, k, true)?;
    let logits = tape.scale(logits, T::lit(1.0 / (d1 as f64).sqrt()));
    let logits = tape.reshape(logits, &[points * views, views])?;
    let mask: Vec<bool> = (0..points)
        .flat_map(|p| (0..views).flat_map(move |_| (0..views).map(move |c| p * views + c)))
        .map(|i| valid[i])
        .collect();
    tape.softmax_rows_masked(logits, Some(&mask))
}

/// Cross-attention from skeletal to pixel-aligned features for each point:
/// `z_c = Σ_c′ att[c,c′] v_p[c′] + v_s[c]` with the attention of
/// [`mv_attention`].
#[allow(clippy::too_many_arguments)]
pub fn mv_attend<T: Real>(
    tape: &mut Tape<T>,
    query_s: Var,
    key_p: Var,
    value_s: Var,
    value_p: Var,
    valid: &[bool],
    points: usize,
    views: usize,
) -> Result<Var> {
    let d1 = tape.shape(query_s)[1];
    let att = mv_attention(tape, query_s, key_p, valid, points, views)?;
    let att = tape.reshape(att, &[points, views, views])?;
    let vp = tape.reshape(value_p, &[points, views, d1])?;
    let mixed = tape.bmm(att, vp, false)?;
    let mixed = tape.reshape(mixed, &[points * views, d1])?;
    tape.add(mixed, value_s)
}

/// Multi-view attention weights for raw skeletal features `s` and
/// pixel-aligned features `p`; `None` when attention is disabled.
#[allow(clippy::too_many_arguments)]
pub fn multiview_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &MultiViewWeights,
    s: Var,
    p: Var,
    valid: &[bool],
    points: usize,
    views: usize,
) -> Result<Option<Var>> {
    let (Some(qm), Some(k)) = (w.query_map(), w.k.as_ref()) else {
        return Ok(None);
    };
    let qs = qm.forward(tape, store, s)?;
    let kp = k.forward(tape, store, p)?;
    mv_attention(tape, qs, kp, valid, points, views).map(Some)
}

/// Per-view fused features `z` from whichever embeddings are present:
/// attention when all four are, otherwise the sum of the available values.
pub fn fuse_embedded<T: Real>(
    tape: &mut Tape<T>,
    e: &Embedded,
    valid: &[bool],
    points: usize,
    views: usize,
) -> Result<Var> {
    match (e.query_s, e.key_p, e.value_s, e.value_p) {
        (Some(qs), Some(kp), Some(vs), Some(vp)) => {
            mv_attend(tape, qs, kp, vs, vp, valid, points, views)
        }
        (_, _, Some(vs), Some(vp)) => tape.add(vp, vs),
        (_, _, Some(vs), None) => Ok(vs),
        (_, _, None, Some(vp)) => Ok(vp),
        _ => Err(Error::invalid("no feature pathway enabled")),
    }
}

/// Mean over views of `[points·views × d]` rows. With `valid`, only valid
/// views are averaged; a point with none falls back to all views.
pub fn pool_views<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    points: usize,
    views: usize,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let mut map = RowMap::with_capacity(points * views, points, points * views);
    for p in 0..points {
        let rows: Vec<usize> = (p * views..(p + 1) * views).collect();
        let chosen: Vec<usize> = match valid {
            Some(ok) if rows.iter().any(|&r| ok[r]) => rows.into_iter().filter(|&r| ok[r]).collect(),
            _ => rows,
        };
        let w = T::lit(1.0 / chosen.len() as f64);
        map.push_row(chosen.into_iter().map(|r| (r, w)));
    }
    tape.gather(z, Arc::new(map))
}

/// Fuses per-(point, view) skeletal features `s` and pixel-aligned features
/// `p` (both `[points·views × d]`). Returns `z` (`[points·views × d₁]`) and
/// its plain view mean `[points × d₁]`.
pub fn multiview_fuse<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    w: &MultiViewWeights,
    s: Var,
    p: Var,
    valid: &[bool],
    points: usize,
    views: usize,
) -> Result<(Var, Var)> {
    if views == 0 {
        return Err(Error::invalid("multi-view fusion needs at least one view"));
    }
    let mut e = Embedded {
        value_s: Some(w.v.forward(tape, store, s)?),
        value_p: Some(w.v.forward(tape, store, p)?),
        ..Embedded::default()
    };
    if let (Some(qm), Some(k)) = (w.query_map(), w.k.as_ref()) {
        e.query_s = Some(qm.forward(tape, store, s)?);
        e.key_p = Some(k.forward(tape, store, p)?);
    }
    let z = fuse_embedded(tape, &e, valid, points, views)?;
    let z_mean = pool_views(tape, z, points, views, None)?;
    Ok((z, z_mean))
}
