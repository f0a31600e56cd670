use defattn::tensor::gradcheck::{check_gradients, GradCheckOptions};
use defattn::{Activation, ConvSpec, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let a = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0);
    let i3 = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(out), &a);

    let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let y = g.constant(t(&[2, 1], &[1., 1.]));
    let z = g.matmul(x, y).unwrap();
    assert_eq!(g.value(z).data(), &[3., 7.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let a = Tensor::randn(&[5, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 3], 1.0, &mut r);
    let report = check_gradients(
        |g, v| {
            let m = g.matmul(v[0], v[1])?;
            Ok(g.sum(m))
        },
        &[a, b],
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0., 0.]));
    let y = g.softmax_last(x, 1.0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[1000., 0.]));
    let y = g.softmax_last(x, 1.0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    assert!(g.value(y).is_finite());

    assert!(g.softmax_last(x, 0.0).is_err());
}

#[test]
fn softmax_gradient_and_normalisation() {
    let mut r = rng(2);
    let x = Tensor::randn(&[4, 7], 2.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.softmax_last(xv, 1.7).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
    let w = Tensor::randn(&[4, 7], 1.0, &mut r);
    let report = check_gradients(
        |g, v| {
            let y = g.softmax_last(v[0], 1.7)?;
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        },
        &[x],
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

/// Direct six-loop grouped cross-correlation.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Tensor {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[0];
    let k = spec.kernel;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - k) / spec.stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let grp = co / cout_g;
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        for ci in 0..cin_g {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[co, ky, kx, ci]) * x.at(&[iy as usize, ix as usize, grp * cin_g + ci]);
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc + b.data()[co];
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out).unwrap()
}

#[test]
fn conv_identity_kernel() {
    let mut r = rng(3);
    let x = Tensor::randn(&[4, 5, 3], 1.0, &mut r);
    let w = Tensor::from_fn(&[3, 1, 1, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w));
    let y = g.conv2d(xv, wv, None, ConvSpec::new(1, 1, 0, 1)).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_constant_field() {
    let c = 0.7;
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[5, 5, 1], c));
    let w = g.constant(Tensor::full(&[1, 3, 3, 1], 1.0));
    let y = g.conv2d(x, w, None, ConvSpec::same(3)).unwrap();
    let out = g.value(y);
    for yy in 1..4 {
        for xx in 1..4 {
            assert!((out.at(&[yy, xx, 0]) - 9.0 * c).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_group_indivisibility_is_config_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 4, 3]));
    let w = g.constant(Tensor::zeros(&[2, 3, 3, 1]));
    let err = g.conv2d(x, w, None, ConvSpec::new(3, 1, 1, 2)).unwrap_err();
    assert!(matches!(err, defattn::Error::Config(_)));
}

#[test]
fn grouped_conv_equals_naive_loops_exactly() {
    let mut r = rng(4);
    for spec in [
        ConvSpec::new(3, 1, 1, 2),
        ConvSpec::new(5, 1, 2, 2),
        ConvSpec::new(3, 2, 1, 1),
        ConvSpec::new(3, 1, 1, 4),
        ConvSpec::new(1, 1, 0, 2),
    ] {
        let x = Tensor::randn(&[6, 6, 4], 1.0, &mut r);
        let cout = 4;
        let w = Tensor::randn(&[cout, spec.kernel, spec.kernel, 4 / spec.groups], 1.0, &mut r);
        let b = Tensor::randn(&[cout], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), spec).unwrap();
        assert_eq!(g.value(y), &naive_conv(&x, &w, &b, spec), "{spec:?}");
    }
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let x = Tensor::randn(&[5, 6, 4], 1.0, &mut r);
    let w = Tensor::randn(&[6, 3, 3, 2], 0.5, &mut r);
    let b = Tensor::randn(&[6], 0.5, &mut r);
    let probe = Tensor::randn(&[3, 3, 6], 1.0, &mut r);
    let report = check_gradients(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(3, 2, 1, 2))?;
            let p = g.constant(probe.clone());
            let m = g.mul(y, p)?;
            Ok(g.sum(m))
        },
        &[x, w, b],
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn activation_fixed_points() {
    assert_eq!(Activation::Gelu.apply(0.0), 0.0);
    assert_eq!(Activation::Silu.apply(0.0), 0.0);
    assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    assert_eq!(Activation::Relu.apply(-1.0), 0.0);
    assert!("tanh".parse::<Activation>().is_err());
    assert_eq!("silu".parse::<Activation>().unwrap(), Activation::Silu);
}

#[test]
fn activation_gradients() {
    let mut r = rng(6);
    for kind in [
        Activation::Gelu,
        Activation::Silu,
        Activation::Sigmoid,
        Activation::Relu,
    ] {
        // keep relu probes away from its kink
        let x = Tensor::from_fn(&[20], |_| {
            let v: f64 = r.gen_range(-3.0..3.0);
            if v.abs() < 0.05 {
                0.5
            } else {
                v
            }
        });
        let report = check_gradients(
            |g, v| {
                let y = g.activation(v[0], kind);
                Ok(g.sum(y))
            },
            &[x],
            opts(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{kind}: {report:?}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::full(&[2, 3], 4.2));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-12));

    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[1, 2], &[1., 3.]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng(7);
    let x = Tensor::randn(&[4, 6], 1.0, &mut r);
    let gain = Tensor::randn(&[6], 1.0, &mut r);
    let bias = Tensor::randn(&[6], 1.0, &mut r);
    let probe = Tensor::randn(&[4, 6], 1.0, &mut r);
    let report = check_gradients(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let p = g.constant(probe.clone());
            let m = g.mul(y, p)?;
            Ok(g.sum(m))
        },
        &[x, gain, bias],
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn backward_trivial_losses() {
    let mut r = rng(8);
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let s = g.sum(xv);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(xv).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    let grads = g.backward(half).unwrap();
    assert!(grads.get(xv).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(defattn::Error::Contract(_))));
}

#[test]
fn composite_attention_conv_layernorm_gradient() {
    let mut r = rng(9);
    let x = Tensor::randn(&[4, 4, 4], 1.0, &mut r);
    let wc = Tensor::randn(&[4, 3, 3, 2], 0.4, &mut r);
    let wq = Tensor::randn(&[4, 4], 0.5, &mut r);
    let wk = Tensor::randn(&[4, 4], 0.5, &mut r);
    let wv = Tensor::randn(&[4, 4], 0.5, &mut r);
    let gain = Tensor::randn(&[4], 1.0, &mut r);
    let bias = Tensor::randn(&[4], 1.0, &mut r);
    let probe = Tensor::randn(&[16, 4], 1.0, &mut r);
    let build = |g: &mut Graph, v: &[Var]| {
        let c = g.conv2d(v[0], v[1], None, ConvSpec::new(3, 1, 1, 2))?;
        let a = g.activation(c, Activation::Gelu);
        let tok = g.reshape(a, &[16, 4])?;
        let n = g.layer_norm(tok, v[5], v[6], 1e-5)?;
        let q = g.matmul(n, v[2])?;
        let k = g.matmul(n, v[3])?;
        let val = g.matmul(n, v[4])?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let w = g.softmax_last(s, 2.0)?;
        let o = g.matmul(w, val)?;
        let p = g.constant(probe.clone());
        let m = g.mul(o, p)?;
        Ok(g.sum(m))
    };
    let report = check_gradients(build, &[x, wc, wq, wk, wv, gain, bias], opts()).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn spatial_and_plumbing_gradients() {
    let mut r = rng(10);
    let x = Tensor::randn(&[4, 4, 3], 1.0, &mut r);
    let probe_up = Tensor::randn(&[8, 8, 3], 1.0, &mut r);
    let report = check_gradients(
        |g, v| {
            let u = g.upsample(v[0], 2)?;
            let p = g.constant(probe_up.clone());
            let m = g.mul(u, p)?;
            let pooled = g.avg_pool(m, 2)?;
            let sl = g.slice_last(pooled, 1, 2)?;
            let cat = g.concat_last(&[sl, v[0]])?;
            let flat = g.reshape(cat, &[16, 5])?;
            let rows = g.gather_rows(flat, &[0, 3, 3, 15])?;
            let stacked = g.concat_rows(&[rows, flat])?;
            let c = g.center_last(stacked);
            let sq = g.mul(c, c)?;
            let s = g.sum_last(sq);
            let s1 = g.add_scalar(s, 1.0);
            let rt = g.sqrt(s1);
            let lg = g.log(rt);
            Ok(g.sum(lg))
        },
        &[x],
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn nll_and_double_center_gradients() {
    let mut r = rng(11);
    let z = Tensor::randn(&[6, 4], 1.0, &mut r);
    let m = Tensor::randn(&[5, 5], 1.0, &mut r);
    let p = Tensor::randn(&[5, 5], 1.0, &mut r);
    let report = check_gradients(
        |g, v| {
            let lp = g.log_softmax_last(v[0]);
            let l = g.nll(lp, &[0, 1, 2, 3, 3, 0])?;
            let dc = g.double_center(v[1])?;
            let pv = g.constant(p.clone());
            let prod = g.mul(dc, pv)?;
            let s = g.sum(prod);
            let d = g.div(l, s)?;
            g.add(d, l)
        },
        &[z, m],
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = rng(12);
        let x = Tensor::randn(&[6, 6, 4], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 2], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.leaf(x), g.leaf(w));
        let y = g.conv2d(xv, wv, None, ConvSpec::new(3, 1, 1, 2)).unwrap();
        let a = g.activation(y, Activation::Silu);
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        (g.value(a).clone(), grads.get(wv).unwrap(), grads.get(xv).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_probability_vectors(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[rows, cols], 50.0, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax_last(xv, scale).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_conv_shapes_match_naive(h in 3usize..7, w in 3usize..7, groups in 1usize..3, stride in 1usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let cin = 2 * groups;
        let cout = 2 * groups;
        let spec = ConvSpec::new(3, stride, 1, groups);
        let x = Tensor::randn(&[h, w, cin], 1.0, &mut r);
        let wt = Tensor::randn(&[cout, 3, 3, cin / groups], 1.0, &mut r);
        let b = Tensor::randn(&[cout], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), spec).unwrap();
        prop_assert_eq!(g.value(y), &naive_conv(&x, &wt, &b, spec));
    }

    #[test]
    fn random_primitive_shapes_pass_gradcheck(rows in 2usize..5, cols in 2usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[rows, cols], 1.0, &mut r);
        let b = Tensor::randn(&[cols, rows], 1.0, &mut r);
        let gain = Tensor::randn(&[rows], 1.0, &mut r);
        let bias = Tensor::randn(&[rows], 1.0, &mut r);
        let report = check_gradients(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                let n = g.layer_norm(m, v[2], v[3], 1e-5)?;
                let s = g.softmax_last(n, 1.3)?;
                let act = g.activation(s, Activation::Gelu);
                let sq = g.mul(act, m)?;
                Ok(g.sum(sq))
            },
            &[a, b, gain, bias],
            GradCheckOptions::default(),
        ).unwrap();
        prop_assert!(report.max_rel_err < 1e-4, "{:?}", report);
    }
}
