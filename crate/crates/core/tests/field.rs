use nhp_core::encoder::{bilinear_taps, encode_image, sample_pixel_aligned};
use nhp_core::field::bank::gather_bank;
use nhp_core::field::{
    diffuse_to_voxels, multiview_fuse, sample_query_pixel_features, sample_skeletal, temporal_fuse,
    Ablation, FrameInputs, GridSpec, Model, ModelConfig, SkeletalBank, VoxelLayout,
};
use nhp_core::geometry::{normalize, Vec3};
use nhp_core::nn::Linear;
use nhp_core::synth::{generate_captures, CaptureConfig, CaptureSet};
use nhp_core::tensor::grad_check_params;
use nhp_core::tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn capture() -> CaptureSet {
    let cfg = CaptureConfig {
        width: 24,
        height: 24,
        frames: 4,
        views: 3,
        vertex_count: 90,
        ..CaptureConfig::default()
    };
    generate_captures(&[7], &cfg).unwrap()
}

fn tiny(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        encoder_c1: 4,
        encoder_c2: 4,
        d_img: 4,
        d_temporal: 4,
        d_multiview: 6,
        hidden: 6,
        dir_freqs: 2,
        grid_divisions: 6,
        ablation,
        ..ModelConfig::default()
    }
}

fn inputs<'a>(set: &'a CaptureSet, views: &[usize]) -> FrameInputs<'a> {
    FrameInputs::from_subject(&set.subjects[0], &set.cameras, views, 1, &[0, 3]).unwrap()
}

/// Points around the query-time body: jittered vertices plus uniform draws
/// in the body box.
fn query_points(set: &CaptureSet, n: usize, seed: u64) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verts = &set.subjects[0].frames[1].vertices;
    let (lo, hi) = bounds(verts);
    let mut pts = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n);
    for i in 0..n {
        let p = if i % 2 == 0 {
            let v = verts[rng.gen_range(0..verts.len())];
            [0, 1, 2].map(|k| v[k] + rng.gen_range(-0.05..0.05))
        } else {
            [0, 1, 2].map(|k| rng.gen_range(lo[k]..hi[k]))
        };
        pts.push(p);
        dirs.push(normalize([0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))));
    }
    (pts, dirs)
}

fn bounds(v: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in v {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn apply(store: &ParamStore<f64>, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(lin.w).data();
    let b = store.get(lin.b).data();
    (0..lin.fan_out)
        .map(|o| b[o] + (0..lin.fan_in).map(|i| x[i] * w[i * lin.fan_out + o]).sum::<f64>())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over the entries with `ok`; all zeros if none is.
fn masked_softmax(logits: &[f64], ok: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(ok)
        .filter(|p| *p.1)
        .map(|p| *p.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .zip(ok)
        .map(|(&l, &o)| if o { (l - m).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| if s > 0.0 { v / s } else { 0.0 }).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "entry {i}: {x} vs {y}");
    }
}

#[test]
fn temporal_attention_matches_direct_computation() {
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, tiny(Ablation::FULL), 11).unwrap();
    let w = model.temporal.as_ref().unwrap();
    let (views, verts, slots, d) = (2, 40, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = views * verts * slots;
    let mut valid: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
    // Rows 0 and 1 have no valid memory at all.
    for s in 1..slots {
        valid[s] = false;
        valid[slots + s] = false;
    }
    let data: Vec<f64> = (0..rows * d)
        .map(|i| if valid[i / d] { rng.gen_range(-1.0..1.0) } else { 0.0 })
        .collect();

    for weights in [Some(w), None] {
        let mut tape = Tape::new();
        let features = tape.constant(&[rows, d], data.clone()).unwrap();
        let bank = SkeletalBank {
            features,
            valid: valid.clone(),
            views,
            vertices: verts,
            slots,
        };
        let out = temporal_fuse(&mut tape, &store, weights, &bank).unwrap();
        let got = tape.value(out).to_vec();
        let mut expect = Vec::new();
        for r in 0..views * verts {
            let row = |s: usize| &data[(r * slots + s) * d..(r * slots + s + 1) * d];
            let ok: Vec<bool> = (0..slots).map(|s| valid[r * slots + s]).collect();
            match weights {
                Some(w) => {
                    let q = apply(&store, &w.q, row(0));
                    let logits: Vec<f64> = (1..slots)
                        .map(|s| dot(&q, &apply(&store, &w.k, row(s))) / (w.q.fan_out as f64).sqrt())
                        .collect();
                    let att = masked_softmax(&logits, &ok[1..]);
                    let mut o = row(0).to_vec();
                    for (m, a) in att.iter().enumerate() {
                        let v = apply(&store, &w.v, row(m + 1));
                        for j in 0..d {
                            o[j] += a * v[j];
                        }
                    }
                    expect.extend(o);
                }
                None => {
                    let n = ok.iter().filter(|&&o| o).count();
                    for j in 0..d {
                        let s: f64 = (0..slots).filter(|&s| ok[s]).map(|s| row(s)[j]).sum();
                        expect.push(if n > 0 { s / n as f64 } else { 0.0 });
                    }
                }
            }
        }
        assert_close(&got, &expect, 1e-12);
        if weights.is_some() {
            // No valid memory: the query-time feature passes through.
            assert_close(&got[..d], &data[..d], 1e-15);
            assert_close(&got[d..2 * d], &data[slots * d..(slots + 1) * d], 1e-15);
        }
    }
}

#[test]
fn multiview_attention_matches_direct_computation() {
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, tiny(Ablation::FULL), 3).unwrap();
    let mv = &model.multiview;
    let (points, views, d) = (100, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = points * views;
    let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
    valid[..views].iter_mut().for_each(|v| *v = false);
    let s: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p: Vec<f64> = (0..n * d)
        .map(|i| if valid[i / d] { rng.gen_range(-1.0..1.0) } else { 0.0 })
        .collect();

    let mut tape = Tape::new();
    let sv = tape.constant(&[n, d], s.clone()).unwrap();
    let pv = tape.constant(&[n, d], p.clone()).unwrap();
    let (z, z_mean) = multiview_fuse(&mut tape, &store, mv, sv, pv, &valid, points, views).unwrap();
    let d1 = mv.width();
    let k = mv.k.as_ref().unwrap();
    let mut expect = Vec::new();
    let mut expect_mean = Vec::new();
    for pt in 0..points {
        let r = |x: &[f64], c: usize| x[(pt * views + c) * d..(pt * views + c + 1) * d].to_vec();
        let ok: Vec<bool> = (0..views).map(|c| valid[pt * views + c]).collect();
        let keys: Vec<Vec<f64>> = (0..views).map(|c| apply(&store, k, &r(&p, c))).collect();
        let vals: Vec<Vec<f64>> = (0..views).map(|c| apply(&store, &mv.v, &r(&p, c))).collect();
        let mut mean = vec![0.0; d1];
        for c in 0..views {
            let q = apply(&store, k, &r(&s, c));
            let logits: Vec<f64> = keys.iter().map(|kk| dot(&q, kk) / (d1 as f64).sqrt()).collect();
            let att = masked_softmax(&logits, &ok);
            let mut o = apply(&store, &mv.v, &r(&s, c));
            for (c2, a) in att.iter().enumerate() {
                for j in 0..d1 {
                    o[j] += a * vals[c2][j];
                }
            }
            for j in 0..d1 {
                mean[j] += o[j] / views as f64;
            }
            expect.extend(o);
        }
        expect_mean.extend(mean);
    }
    assert_close(tape.value(z), &expect, 1e-12);
    assert_close(tape.value(z_mean), &expect_mean, 1e-12);
}

#[test]
fn pixel_sampling_reproduces_linear_features() {
    // A feature map whose single channel is the site's x coordinate (and a
    // second channel its y) samples back to the clamped feature coordinate.
    let (w, h) = (12usize, 8usize);
    let (fw, fh) = (w / 2, h / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let p = [rng.gen_range(-1.0..w as f64), rng.gen_range(-1.0..h as f64)];
        let taps = bilinear_taps(p, w, h);
        let inside = p[0] >= -0.5 && p[1] >= -0.5 && p[0] <= w as f64 - 0.5 && p[1] <= h as f64 - 0.5;
        assert_eq!(taps.is_some(), inside);
        if let Some(taps) = taps {
            let x: f64 = taps.iter().map(|&(s, wt)| wt * (s % fw) as f64).sum();
            let y: f64 = taps.iter().map(|&(s, wt)| wt * (s / fw) as f64).sum();
            assert!((x - (p[0] / 2.0).clamp(0.0, (fw - 1) as f64)).abs() < 1e-12);
            assert!((y - (p[1] / 2.0).clamp(0.0, (fh - 1) as f64)).abs() < 1e-12);
            assert!((taps.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn bank_rows_match_per_image_sampling() {
    let set = capture();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, tiny(Ablation::FULL), 2).unwrap();
    let inp = inputs(&set, &[0, 2]);
    let mut tape = Tape::new();
    let encoded = model.encoder.encode(&mut tape, &store, &inp.batch(inp.slots())).unwrap();
    let bank = gather_bank(&mut tape, encoded, &inp).unwrap();
    let feats = tape.value(bank.features);
    let d = 4;
    for (v, cam) in inp.cameras.iter().enumerate() {
        for (s, frame) in inp.frames.iter().enumerate() {
            let fm = encode_image(&model.encoder, &store, inp.images[v][s], v, s).unwrap();
            for (i, &x) in frame.vertices.iter().enumerate() {
                let r = bank.row(v, i, s);
                let (expect, ok) = match cam.project(x) {
                    Ok((p, _)) => (sample_pixel_aligned(&fm, p), bilinear_taps(p, 24, 24).is_some()),
                    Err(_) => (vec![0.0; d], false),
                };
                assert_eq!(bank.valid[r], ok);
                assert_close(&feats[r * d..(r + 1) * d], &expect, 1e-12);
            }
        }
    }
}

#[test]
fn projected_tables_match_naive_fusion() {
    let set = capture();
    for ablation in Ablation::VARIANTS {
        let cfg = tiny(ablation);
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(&mut store, cfg.clone(), 4).unwrap();
        let inp = inputs(&set, &[0, 1, 2]);
        let (pts, dirs) = query_points(&set, 60, 3);

        let mut tape = Tape::new();
        let state = model.prepare_frame(&mut tape, &store, &inp, None).unwrap();
        let out = model.evaluate_points(&mut tape, &store, &state, &pts, &dirs).unwrap();
        let fast = tape.value(out.z).to_vec();

        let mut tape = Tape::new();
        let slots = if ablation.skeletal { inp.slots() } else { 1 };
        let encoded = model.encoder.encode(&mut tape, &store, &inp.batch(slots)).unwrap();
        let (p, valid) = sample_query_pixel_features(&mut tape, encoded, &inp, slots, &pts).unwrap();
        let s = if ablation.skeletal {
            let bank = gather_bank(&mut tape, encoded, &inp).unwrap();
            let fused = temporal_fuse(&mut tape, &store, model.temporal.as_ref(), &bank).unwrap();
            let frame = inp.frames[0];
            let local = frame.local_vertices();
            let spec = GridSpec::around(&local, cfg.grid_divisions, cfg.bbox_margin, cfg.grid_padding).unwrap();
            let layout = Arc::new(VoxelLayout::new(spec, &local, None).unwrap());
            let grid = diffuse_to_voxels(&mut tape, &store, model.voxel.as_ref().unwrap(), fused, 3, layout).unwrap();
            let lp: Vec<Vec3> = pts.iter().map(|&x| frame.pose.world_to_body(x)).collect();
            sample_skeletal(&mut tape, &grid, &lp).unwrap()
        } else {
            p
        };
        let p = if ablation.pixel_aligned { p } else { s };
        let (z, _) = multiview_fuse(&mut tape, &store, &model.multiview, s, p, &valid, pts.len(), 3).unwrap();
        let mut naive = tape.value(z).to_vec();
        if !(ablation.skeletal && ablation.pixel_aligned) {
            // With one pathway the fused feature is its value alone, while
            // multiview_fuse above adds the pathway to itself.
            naive.iter_mut().for_each(|v| *v /= 2.0);
        }
        assert_eq!(out.valid, valid, "{}", ablation.label());
        assert_close(&fast, &naive, 1e-10);
    }
}

#[test]
fn focused_layout_gives_identical_outputs() {
    let set = capture();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, tiny(Ablation::FULL), 8).unwrap();
    let inp = inputs(&set, &[0, 1, 2]);
    let (pts, dirs) = query_points(&set, 80, 4);
    let eval = |focus: Option<&[Vec3]>| {
        let mut tape = Tape::new();
        let state = model.prepare_frame(&mut tape, &store, &inp, focus).unwrap();
        let out = model.evaluate_points(&mut tape, &store, &state, &pts, &dirs).unwrap();
        (tape.value(out.sigma).to_vec(), tape.value(out.rgb).to_vec())
    };
    let (s0, c0) = eval(None);
    let (s1, c1) = eval(Some(&pts));
    assert_close(&s1, &s0, 1e-12);
    assert_close(&c1, &c0, 1e-12);
}

#[test]
fn zeroed_heads_give_constant_outputs() {
    let set = capture();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, tiny(Ablation::FULL), 1).unwrap();
    model.heads.zero_final_layers(&mut store);
    let inp = inputs(&set, &[0, 1]);
    let (pts, dirs) = query_points(&set, 30, 1);
    let mut tape = Tape::new();
    let state = model.prepare_frame(&mut tape, &store, &inp, None).unwrap();
    let out = model.evaluate_points(&mut tape, &store, &state, &pts, &dirs).unwrap();
    assert!(tape.value(out.sigma).iter().all(|&s| (s - 2f64.ln()).abs() < 1e-12));
    assert!(tape.value(out.rgb).iter().all(|&c| (c - 0.5).abs() < 1e-12));
}

#[test]
fn outputs_are_finite_and_in_range_over_many_points() {
    let set = capture();
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, ModelConfig::default(), 21).unwrap();
    let inp = inputs(&set, &[0, 1, 2]);
    let (pts, dirs) = query_points(&set, 10_000, 6);
    let mut tape = Tape::new();
    let state = model.prepare_frame(&mut tape, &store, &inp, None).unwrap();
    let out = model.evaluate_points(&mut tape, &store, &state, &pts, &dirs).unwrap();
    assert!(tape.value(out.sigma).iter().all(|s| s.is_finite() && *s >= 0.0));
    assert!(tape.value(out.rgb).iter().all(|c| (0.0..=1.0).contains(c)));
}

#[test]
fn every_parameter_receives_gradient() {
    let set = capture();
    for ablation in Ablation::VARIANTS {
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&mut store, tiny(ablation), 5).unwrap();
        let inp = inputs(&set, &[0, 1, 2]);
        let (pts, dirs) = query_points(&set, 400, 2);
        let mut tape = Tape::new();
        let state = model.prepare_frame(&mut tape, &store, &inp, Some(&pts)).unwrap();
        let out = model.evaluate_points(&mut tape, &store, &state, &pts, &dirs).unwrap();
        let a = tape.sum(out.sigma);
        let b = tape.sum(out.rgb);
        let loss = tape.add(a, b).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        for (name, t) in store.iter() {
            let g = t.grad.as_ref().unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().any(|&v| v != 0.0), "{}: zero gradient for {name}", ablation.label());
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let set = capture();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, tiny(Ablation::FULL), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Zero biases on a black background put whole regions exactly on the
    // relu kink; random biases move the check to a generic point.
    for (name, t) in store.iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let inp = inputs(&set, &[0, 1, 2]);
    let (pts, dirs) = query_points(&set, 12, 8);
    let ws: Vec<f64> = (0..pts.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wc: Vec<f64> = (0..pts.len() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check_params(
        &store,
        |tape, store| {
            let state = model.prepare_frame(tape, store, &inp, None)?;
            let out = model.evaluate_points(tape, store, &state, &pts, &dirs)?;
            let a = tape.leaf(&Tensor::new(&[pts.len()], ws.clone())?);
            let b = tape.leaf(&Tensor::new(&[pts.len(), 3], wc.clone())?);
            let s = tape.mul(out.sigma, a)?;
            let c = tape.mul(out.rgb, b)?;
            let (s, c) = (tape.sum(s), tape.sum(c));
            tape.add(s, c)
        },
        1e-6,
    )
    .unwrap();
    assert!(report.checked > 1000, "{report:?}");
    // The worst entries are gradients near 1e-7, where central-difference
    // round-off (~1e-10) dominates; a wrong backward shows up as O(1).
    assert!(report.passes(1e-3), "{report:?}");
}
