use defattn::attention::{
    bilinear_kernel, deformable_attention, gate, gated_deformable_attention, init_reference_grid, offset_network,
    offset_param_shapes, resample_features, vanilla_attention, AttentionConfig, OffsetField, OffsetParams, Projections,
};
use defattn::tensor::gradcheck::{check_gradients, GradCheckOptions};
use defattn::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Inst {
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wu: Tensor,
    off: [Tensor; 4],
}

fn instance(r: &mut ChaCha8Rng, h: usize, w: usize, cfg: &AttentionConfig, offset_scale: f64) -> Inst {
    let shapes = offset_param_shapes(cfg);
    Inst {
        x: Tensor::randn(&[h, w, cfg.c_in], 1.0, r),
        wq: Tensor::randn(&[cfg.c_in, cfg.c_q], 0.4, r),
        wk: Tensor::randn(&[cfg.c_in, cfg.c_q], 0.4, r),
        wv: Tensor::randn(&[cfg.c_in, cfg.c_v], 0.4, r),
        wu: Tensor::randn(&[cfg.c_in, cfg.c_u], 0.4, r),
        off: [
            Tensor::randn(&shapes[0], offset_scale, r),
            Tensor::randn(&shapes[1], offset_scale, r),
            Tensor::randn(&shapes[2], offset_scale, r),
            Tensor::randn(&shapes[3], offset_scale, r),
        ],
    }
}

fn bind(g: &mut Graph, inst: &Inst) -> (Var, Projections, OffsetParams) {
    let x = g.leaf(inst.x.clone());
    let proj = Projections {
        w_q: g.leaf(inst.wq.clone()),
        w_k: g.leaf(inst.wk.clone()),
        w_v: g.leaf(inst.wv.clone()),
        w_u: Some(g.leaf(inst.wu.clone())),
    };
    let off = OffsetParams {
        conv1_w: g.leaf(inst.off[0].clone()),
        conv1_b: g.leaf(inst.off[1].clone()),
        conv2_w: g.leaf(inst.off[2].clone()),
        conv2_b: g.leaf(inst.off[3].clone()),
    };
    (x, proj, off)
}

fn small_cfg(c: usize, groups: usize, grid: usize) -> AttentionConfig {
    AttentionConfig::uniform(c, groups, grid)
}

/// Evaluates softmax(QKᵀ/√d)V one query at a time with plain loops.
fn per_query_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, d: f64) -> Vec<f64> {
    let n = x.shape()[0] * x.shape()[1];
    let c = x.shape()[2];
    let cq = wq.shape()[1];
    let cv = wv.shape()[1];
    let proj = |w: &Tensor, t: usize, j: usize| -> f64 {
        (0..c)
            .map(|i| x.data()[t * c + i] * w.data()[i * w.shape()[1] + j])
            .sum()
    };
    let mut out = vec![0.0; n * cv];
    for qi in 0..n {
        let q: Vec<f64> = (0..cq).map(|j| proj(wq, qi, j)).collect();
        let scores: Vec<f64> = (0..n)
            .map(|kj| (0..cq).map(|j| q[j] * proj(wk, kj, j)).sum::<f64>() / d.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for kj in 0..n {
            for j in 0..cv {
                out[qi * cv + j] += e[kj] / z * proj(wv, kj, j);
            }
        }
    }
    out
}

#[test]
fn vanilla_single_token_returns_value() {
    let mut r = rng(1);
    let cfg = small_cfg(4, 2, 1);
    let inst = instance(&mut r, 1, 1, &cfg, 0.1);
    let mut g = Graph::new();
    let (x, proj, _) = bind(&mut g, &inst);
    let art = vanilla_attention(&mut g, x, &proj, cfg.d).unwrap();
    assert_eq!(g.value(art.weights).data(), &[1.0]);
    assert_eq!(g.value(art.output).data(), g.value(art.values).data());
}

#[test]
fn vanilla_identical_tokens_give_uniform_rows() {
    let mut r = rng(2);
    let cfg = small_cfg(4, 2, 1);
    let mut inst = instance(&mut r, 3, 3, &cfg, 0.1);
    let token: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    inst.x = Tensor::from_fn(&[3, 3, 4], |i| token[i % 4]);
    let mut g = Graph::new();
    let (x, proj, _) = bind(&mut g, &inst);
    let art = vanilla_attention(&mut g, x, &proj, cfg.d).unwrap();
    for &p in g.value(art.weights).data() {
        assert!((p - 1.0 / 9.0).abs() < 1e-15);
    }
}

#[test]
fn vanilla_matches_per_query_oracle() {
    let mut r = rng(3);
    let cfg = small_cfg(6, 2, 1);
    let inst = instance(&mut r, 3, 3, &cfg, 0.1);
    let mut g = Graph::new();
    let (x, proj, _) = bind(&mut g, &inst);
    let art = vanilla_attention(&mut g, x, &proj, cfg.d).unwrap();
    let oracle = per_query_attention(&inst.x, &inst.wq, &inst.wk, &inst.wv, cfg.d);
    for (a, b) in g.value(art.output).data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn vanilla_projection_mismatch_is_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2, 4]));
    let proj = Projections {
        w_q: g.constant(Tensor::zeros(&[3, 4])),
        w_k: g.constant(Tensor::zeros(&[4, 4])),
        w_v: g.constant(Tensor::zeros(&[4, 4])),
        w_u: None,
    };
    assert!(vanilla_attention(&mut g, x, &proj, 4.0).is_err());
}

#[test]
fn offset_network_zero_and_bias_only() {
    let cfg = small_cfg(8, 4, 1);
    let shapes = offset_param_shapes(&cfg);
    let mut g = Graph::new();
    let mut r = rng(4);
    let q = g.constant(Tensor::randn(&[4, 4, 8], 1.0, &mut r));
    let zero = OffsetParams {
        conv1_w: g.constant(Tensor::zeros(&shapes[0])),
        conv1_b: g.constant(Tensor::zeros(&shapes[1])),
        conv2_w: g.constant(Tensor::zeros(&shapes[2])),
        conv2_b: g.constant(Tensor::zeros(&shapes[3])),
    };
    let d = offset_network(&mut g, q, &zero, &cfg).unwrap();
    assert!(g.value(d).data().iter().all(|&v| v == 0.0));

    let bias = Tensor::from_fn(&shapes[3], |i| if i % 2 == 0 { 0.1 } else { -0.2 });
    let bias_only = OffsetParams {
        conv2_b: g.constant(bias),
        ..zero
    };
    let d = offset_network(&mut g, q, &bias_only, &cfg).unwrap();
    let field = OffsetField::from_map(g.value(d)).unwrap();
    for grp in 0..4 {
        for rr in 0..4 {
            for cc in 0..4 {
                assert_eq!(field.get(0, grp, rr, cc), 0.1);
                assert_eq!(field.get(1, grp, rr, cc), -0.2);
            }
        }
    }
}

#[test]
fn offset_network_random_shapes_are_finite() {
    let mut r = rng(5);
    for trial in 0..10 {
        let groups = [1, 2, 4][trial % 3];
        let grid = [1, 2][trial % 2];
        let c = groups * (1 + trial % 3);
        let cfg = small_cfg(c, groups, grid);
        let (h, w) = (4 + 2 * (trial % 2), 4);
        let inst = instance(&mut r, h, w, &cfg, 0.3);
        let mut g = Graph::new();
        let (_, _, off) = bind(&mut g, &inst);
        let q = g.constant(Tensor::randn(&[h, w, c], 1.0, &mut r));
        let d = offset_network(&mut g, q, &off, &cfg).unwrap();
        let field = OffsetField::from_map(g.value(d)).unwrap();
        assert_eq!(field.shape(), [2, groups, h / grid, w / grid]);
        assert!(field.is_finite());
    }
}

fn zero_offsets(g: &mut Graph, cfg: &AttentionConfig, h: usize, w: usize) -> Var {
    g.constant(Tensor::zeros(&[
        h / cfg.grid_factor,
        w / cfg.grid_factor,
        2 * cfg.groups,
    ]))
}

#[test]
fn resample_zero_offset_identity() {
    let mut r = rng(6);
    let x = Tensor::randn(&[5, 4, 6], 1.0, &mut r);
    let cfg = small_cfg(6, 3, 1);
    let grid = init_reference_grid(5, 4, 1).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let off = zero_offsets(&mut g, &cfg, 5, 4);
    let s = resample_features(&mut g, xv, &grid, off, 3).unwrap();
    assert!(g.value(s).max_abs_diff(&x).unwrap() <= 1e-12);
}

#[test]
fn resample_four_neighbour_average() {
    // one reference point at the center of a 2×2 map (g = 2) sits on pixel (0.5, 0.5)
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 2, 1], vec![1., 2., 3., 4.]).unwrap());
    let grid = init_reference_grid(2, 2, 2).unwrap();
    let off = g.constant(Tensor::zeros(&[1, 1, 2]));
    let s = resample_features(&mut g, x, &grid, off, 1).unwrap();
    assert_eq!(g.value(s).data(), &[2.5]);
}

/// Nudges offsets so no sample lands within 0.05 px of an integer pixel
/// coordinate, where bilinear interpolation has a kink.
fn away_from_kinks(off: Tensor, h: usize, w: usize) -> Tensor {
    let (hg, wg, c) = (off.shape()[0], off.shape()[1], off.shape()[2]);
    let mut data = off.into_data();
    for (i, v) in data.iter_mut().enumerate() {
        let (cell, ch) = (i / c, i % c);
        let (n, idx, len) = if ch % 2 == 0 {
            (h, cell / wg, hg)
        } else {
            (w, cell % wg, wg)
        };
        let base = (2 * idx + 1) as f64 / len as f64 - 1.0;
        let px = ((base + *v + 1.0) * n as f64 - 1.0) / 2.0;
        let frac = px - px.floor();
        if !(0.05..=0.95).contains(&frac) {
            *v += 0.2 / n as f64;
        }
    }
    Tensor::new(vec![hg, wg, c], data).unwrap()
}

/// Full sum of the bilinear kernel against every pixel.
fn full_sum_resample(x: &Tensor, offsets: &Tensor, groups: usize) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (hg, wg) = (offsets.shape()[0], offsets.shape()[1]);
    let cg = c / groups;
    let mut out = vec![0.0; hg * wg * c];
    for r in 0..hg {
        for q in 0..wg {
            for grp in 0..groups {
                let ny = (2 * r + 1) as f64 / hg as f64 - 1.0 + offsets.at(&[r, q, 2 * grp]);
                let nx = (2 * q + 1) as f64 / wg as f64 - 1.0 + offsets.at(&[r, q, 2 * grp + 1]);
                let p = (((ny + 1.0) * h as f64 - 1.0) / 2.0, ((nx + 1.0) * w as f64 - 1.0) / 2.0);
                for yy in 0..h {
                    for xx in 0..w {
                        let k = bilinear_kernel(p, (yy as f64, xx as f64));
                        for ch in 0..cg {
                            out[(r * wg + q) * c + grp * cg + ch] += k * x.at(&[yy, xx, grp * cg + ch]);
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn resample_matches_full_sum_oracle_and_gradients() {
    let mut r = rng(7);
    for (grid_factor, groups) in [(1, 2), (1, 4), (5, 1)] {
        let x = Tensor::randn(&[5, 5, 4], 1.0, &mut r);
        let hg = 5 / grid_factor;
        let off = away_from_kinks(Tensor::randn(&[hg, hg, 2 * groups], 0.4, &mut r), 5, 5);
        let grid = init_reference_grid(5, 5, grid_factor).unwrap();
        let mut g = Graph::new();
        let (xv, ov) = (g.constant(x.clone()), g.constant(off.clone()));
        let s = resample_features(&mut g, xv, &grid, ov, groups).unwrap();
        let oracle = full_sum_resample(&x, &off, groups);
        for (a, b) in g.value(s).data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12);
        }
        let probe = Tensor::randn(&[hg, hg, 4], 1.0, &mut r);
        let report = check_gradients(
            |g, v| {
                let s = g.resample(v[0], v[1], groups)?;
                let p = g.constant(probe.clone());
                let m = g.mul(s, p)?;
                Ok(g.sum(m))
            },
            &[x, off],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{grid_factor} {groups} {report:?}");
    }
}

#[test]
fn resample_out_of_range_reads_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[3, 3, 2], 1.0));
    let grid = init_reference_grid(3, 3, 1).unwrap();
    let off = g.constant(Tensor::full(&[3, 3, 2], 5.0));
    let s = resample_features(&mut g, x, &grid, off, 1).unwrap();
    assert!(g.value(s).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_offset_deformable_equals_vanilla() {
    let mut r = rng(8);
    let cfg = small_cfg(8, 4, 1);
    let mut inst = instance(&mut r, 4, 4, &cfg, 0.3);
    for t in inst.off.iter_mut() {
        *t = Tensor::zeros(t.shape());
    }
    let mut g = Graph::new();
    let (x, proj, off) = bind(&mut g, &inst);
    let a = vanilla_attention(&mut g, x, &proj, cfg.d).unwrap();
    let b = deformable_attention(&mut g, x, &proj, &off, &cfg).unwrap();
    assert!(g.value(a.weights).max_abs_diff(g.value(b.weights)).unwrap() <= 1e-12);
    assert!(g.value(a.output).max_abs_diff(g.value(b.output)).unwrap() <= 1e-12);
}

#[test]
fn deformable_token_arithmetic() {
    let mut r = rng(9);
    let cfg = small_cfg(8, 4, 2);
    let inst = instance(&mut r, 4, 4, &cfg, 0.3);
    let mut g = Graph::new();
    let (x, proj, off) = bind(&mut g, &inst);
    let art = deformable_attention(&mut g, x, &proj, &off, &cfg).unwrap();
    assert_eq!(g.shape(art.weights), &[16, 4]);
    for row in g.value(art.weights).data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn deformable_offset_params_get_nonzero_matching_gradients() {
    let mut r = rng(10);
    let cfg = small_cfg(4, 2, 1);
    let inst = instance(&mut r, 4, 4, &cfg, 0.3);
    let inputs = vec![
        inst.x.clone(),
        inst.wq.clone(),
        inst.wk.clone(),
        inst.wv.clone(),
        inst.off[0].clone(),
        inst.off[1].clone(),
        inst.off[2].clone(),
        inst.off[3].clone(),
    ];
    let report = check_gradients(
        |g, v| {
            let proj = Projections {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_u: None,
            };
            let off = OffsetParams {
                conv1_w: v[4],
                conv1_b: v[5],
                conv2_w: v[6],
                conv2_b: v[7],
            };
            let art = deformable_attention(g, v[0], &proj, &off, &cfg)?;
            Ok(g.sum(art.output))
        },
        &inputs,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");

    let mut g = Graph::new();
    let (x, proj, off) = bind(&mut g, &inst);
    let art = deformable_attention(&mut g, x, &proj, &off, &cfg).unwrap();
    let loss = g.sum(art.output);
    let grads = g.backward(loss).unwrap();
    let total: f64 = [off.conv1_w, off.conv2_w, off.conv2_b]
        .iter()
        .map(|&v| grads.get(v).unwrap().data().iter().map(|x| x.abs()).sum::<f64>())
        .sum();
    assert!(total > 1e-6);
}

#[test]
fn gated_closed_gate_is_zero() {
    let mut r = rng(11);
    let cfg = small_cfg(8, 4, 1);
    let mut inst = instance(&mut r, 4, 4, &cfg, 0.3);
    inst.wu = Tensor::zeros(inst.wu.shape());
    let mut g = Graph::new();
    let (x, proj, off) = bind(&mut g, &inst);
    let art = gated_deformable_attention(&mut g, x, &proj, &off, &cfg).unwrap();
    assert!(g.value(art.output).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gated_open_gate_approaches_defatt() {
    let mut r = rng(12);
    let cfg = small_cfg(4, 2, 1);
    let mut inst = instance(&mut r, 3, 3, &cfg, 0.3);
    // positive inputs and a large positive gate projection drive silu(U)/U -> 1
    inst.x = Tensor::from_fn(&[3, 3, 4], |_| r.gen_range(0.5..1.5));
    let run = |scale: f64, inst: &Inst| {
        let gated_inst = Inst {
            x: inst.x.clone(),
            wq: inst.wq.clone(),
            wk: inst.wk.clone(),
            wv: inst.wv.clone(),
            wu: Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { scale } else { 0.0 }),
            off: inst.off.clone(),
        };
        let mut g = Graph::new();
        let (x, proj, off) = bind(&mut g, &gated_inst);
        let gated = gated_deformable_attention(&mut g, x, &proj, &off, &cfg).unwrap();
        let plain = deformable_attention(&mut g, x, &proj, &off, &cfg).unwrap();
        // dividing out U leaves out·sigmoid(U)
        g.value(gated.output)
            .data()
            .iter()
            .zip(g.value(plain.output).data())
            .zip(g.value(x).data())
            .map(|((gv, pv), xv)| (gv / (xv * scale) - pv).abs())
            .fold(0.0, f64::max)
    };
    let coarse = run(2.0, &inst);
    let fine = run(80.0, &inst);
    assert!(fine < coarse && fine < 1e-12, "{coarse} {fine}");
}

#[test]
fn gated_equals_composition_of_independent_calls() {
    let mut r = rng(13);
    let cfg = small_cfg(8, 4, 1);
    let inst = instance(&mut r, 4, 4, &cfg, 0.3);
    let mut g = Graph::new();
    let (x, proj, off) = bind(&mut g, &inst);
    let gated = gated_deformable_attention(&mut g, x, &proj, &off, &cfg).unwrap();
    let plain = deformable_attention(&mut g, x, &proj, &off, &cfg).unwrap();
    let u = gate(&mut g, x, proj.w_u.unwrap()).unwrap();
    let composed = g.mul(plain.output, u).unwrap();
    assert_eq!(g.value(gated.output), g.value(composed));
    assert_eq!(g.value(gated.weights), g.value(plain.weights));
}

#[test]
fn gated_requires_matching_gate_channels() {
    let mut r = rng(14);
    let cfg = small_cfg(8, 4, 1);
    let mut inst = instance(&mut r, 4, 4, &cfg, 0.3);
    inst.wu = Tensor::zeros(&[8, 4]);
    let mut g = Graph::new();
    let (x, proj, off) = bind(&mut g, &inst);
    assert!(gated_deformable_attention(&mut g, x, &proj, &off, &cfg).is_err());
    let no_gate = Projections { w_u: None, ..proj };
    assert!(gated_deformable_attention(&mut g, x, &no_gate, &off, &cfg).is_err());
}

#[test]
fn all_attention_parameters_pass_gradcheck() {
    let mut r = rng(15);
    let cfg = small_cfg(4, 2, 2);
    let inst = instance(&mut r, 4, 4, &cfg, 0.3);
    let probe = Tensor::randn(&[4, 4, 4], 1.0, &mut r);
    let inputs = vec![
        inst.x.clone(),
        inst.wq.clone(),
        inst.wk.clone(),
        inst.wv.clone(),
        inst.wu.clone(),
        inst.off[0].clone(),
        inst.off[1].clone(),
        inst.off[2].clone(),
        inst.off[3].clone(),
    ];
    let report = check_gradients(
        |g, v| {
            let proj = Projections {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_u: Some(v[4]),
            };
            let off = OffsetParams {
                conv1_w: v[5],
                conv1_b: v[6],
                conv2_w: v[7],
                conv2_b: v[8],
            };
            let art = gated_deformable_attention(g, v[0], &proj, &off, &cfg)?;
            let p = g.constant(probe.clone());
            let m = g.mul(art.output, p)?;
            Ok(g.sum(m))
        },
        &inputs,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn zero_offset_reduction_holds_across_instances() {
    let mut r = rng(16);
    for trial in 0..20 {
        let groups = [1, 2, 4][trial % 3];
        let c = groups * (1 + trial % 2) * 2;
        let cfg = small_cfg(c, groups, 1);
        let (h, w) = (2 + trial % 3, 2 + (trial / 3) % 3);
        let mut inst = instance(&mut r, h, w, &cfg, 0.3);
        for t in inst.off.iter_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut g = Graph::new();
        let (x, proj, off) = bind(&mut g, &inst);
        let a = vanilla_attention(&mut g, x, &proj, cfg.d).unwrap();
        let b = deformable_attention(&mut g, x, &proj, &off, &cfg).unwrap();
        assert!(
            g.value(a.output).max_abs_diff(g.value(b.output)).unwrap() <= 1e-12,
            "trial {trial}"
        );
    }
}

#[test]
fn resample_reproduces_constant_maps_in_range() {
    let mut r = rng(17);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[6, 6, 2], 1.75));
    let grid = init_reference_grid(6, 6, 2).unwrap();
    // offsets small enough to keep every sample inside [0, 5]²
    let off = g.constant(Tensor::from_fn(&[3, 3, 2], |_| r.gen_range(-0.15..0.15)));
    let s = resample_features(&mut g, x, &grid, off, 1).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.75).abs() < 1e-12);
    }
}

#[test]
fn resample_translation_consistency() {
    let mut r = rng(18);
    let (h, w, c) = (6, 6, 2);
    let x = Tensor::randn(&[h, w, c], 1.0, &mut r);
    let shifted = Tensor::from_fn(&[h, w, c], |i| {
        let (px, ch) = ((i / c) % w, i % c);
        if px + 1 < w {
            x.at(&[i / (c * w), px + 1, ch])
        } else {
            0.0
        }
    });
    let off = Tensor::randn(&[h, w, 2], 0.2, &mut r);
    let moved = Tensor::from_fn(&[h, w, 2], |i| {
        off.data()[i] + if i % 2 == 1 { 2.0 / w as f64 } else { 0.0 }
    });
    let grid = init_reference_grid(h, w, 1).unwrap();
    let mut g = Graph::new();
    let (xv, sv) = (g.constant(x), g.constant(shifted));
    let (ov, mv) = (g.constant(off.clone()), g.constant(moved));
    let a = resample_features(&mut g, xv, &grid, mv, 1).unwrap();
    let b = resample_features(&mut g, sv, &grid, ov, 1).unwrap();
    let mut checked = 0;
    for rr in 0..h {
        for q in 0..w {
            let px = ((q as f64 * 2.0 + 1.0) / w as f64 + off.at(&[rr, q, 1])) * w as f64 / 2.0 - 0.5;
            if px < 0.0 {
                continue;
            }
            checked += 1;
            for ch in 0..c {
                let d = g.value(a).at(&[rr, q, ch]) - g.value(b).at(&[rr, q, ch]);
                assert!(d.abs() < 1e-12);
            }
        }
    }
    assert!(checked > h * w / 2);
}
