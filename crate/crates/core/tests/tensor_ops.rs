mod common;

use common::{conv2d_oracle, max_abs_diff, random_tensor, rng, transpose_conv2d_oracle};
use errmap::tensor::{
    finite_diff_gradcheck, Graph, OpKind, Shape, Tensor4, ValidityMask,
};
use errmap::Error;
use proptest::prelude::*;

fn t(shape: Shape, data: &[f64]) -> Tensor4 {
    Tensor4::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn conv_of_ones_sums_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor4::ones(Shape::new(1, 1, 3, 3)));
    let w = g.constant(Tensor4::ones(Shape::new(1, 1, 2, 2)));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 1, 2, 2));
    assert!(g.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn unit_kernel_is_identity() {
    let mut r = rng(1);
    let input = random_tensor(&mut r, Shape::new(2, 1, 4, 5), -2.0, 2.0);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(Tensor4::ones(Shape::new(1, 1, 1, 1)));
    let b = g.constant(Tensor4::zeros(Shape::new(1, 1, 1, 1)));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &input);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, Shape::new(2, 3, 5, 5), -1.0, 1.0);
    let w = random_tensor(&mut r, Shape::new(4, 3, 3, 3), -1.0, 1.0);
    let b = random_tensor(&mut r, Shape::new(4, 1, 1, 1), -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
    let oracle = conv2d_oracle(&x, &w, Some(&b), 2, 1);
    assert_eq!(g.shape(y), Shape::new(2, 4, 3, 3));
    assert!(max_abs_diff(g.value(y), &oracle) < 1e-12);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor4::ones(Shape::new(1, 2, 4, 4)));
    let w = g.constant(Tensor4::ones(Shape::new(1, 3, 3, 3)));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { op: "conv2d", .. }), "{err}");
    assert!(err.to_string().contains("1x3x3x3"));
    let w = g.constant(Tensor4::ones(Shape::new(1, 2, 3, 3)));
    assert!(g.conv2d(x, w, None, 0, 1).is_err());
    let big = g.constant(Tensor4::ones(Shape::new(1, 2, 7, 7)));
    assert!(g.conv2d(x, big, None, 1, 0).is_err());
}

#[test]
fn transpose_conv_stamps_kernel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor4::ones(Shape::new(1, 1, 1, 1)));
    let w = g.constant(Tensor4::ones(Shape::new(1, 1, 2, 2)));
    let y = g.transpose_conv2d(x, w, None, 2, 0).unwrap();
    assert_eq!(g.value(y), &Tensor4::ones(Shape::new(1, 1, 2, 2)));
}

#[test]
fn transpose_conv_block_stamp_matches_scatter_oracle() {
    let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
    let w = Tensor4::ones(Shape::new(1, 1, 2, 2));
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.transpose_conv2d(xv, wv, None, 2, 0).unwrap();
    let oracle = transpose_conv2d_oracle(&x, &w, None, 2, 0);
    assert_eq!(g.value(y), &oracle);
    // each input value fills its own 2x2 block
    let expected = [
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 4.0, 4.0, //
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(g.value(y).data(), &expected);
}

#[test]
fn transpose_conv_equals_conv_input_gradient() {
    // conv maps (1,3,8,8) -> (1,5,4,4) with stride 2, pad 1, 4x4 kernel.
    let mut r = rng(3);
    let w = random_tensor(&mut r, Shape::new(5, 3, 4, 4), -1.0, 1.0);
    let upstream = random_tensor(&mut r, Shape::new(1, 5, 4, 4), -1.0, 1.0);

    let mut g = Graph::new();
    let x = g.param(Tensor4::zeros(Shape::new(1, 3, 8, 8)));
    let wv = g.constant(w.clone());
    let y = g.conv2d(x, wv, None, 2, 1).unwrap();
    let up = g.constant(upstream.clone());
    let prod = g.mul(y, up).unwrap();
    let root = g.sum(prod);
    let grads = g.backward(root).unwrap();
    let dx = grads.get(x).unwrap();

    let mut g2 = Graph::new();
    let u = g2.constant(upstream);
    let wv2 = g2.constant(w);
    let tc = g2.transpose_conv2d(u, wv2, None, 2, 1).unwrap();
    assert_eq!(g2.shape(tc), Shape::new(1, 3, 8, 8));
    assert!(max_abs_diff(g2.value(tc), dx) < 1e-12);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor4::scalar(0.0));
    let sp = g.softplus(z);
    assert!((g.value(sp).item() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((g.value(sp).item() - std::f64::consts::LN_2).abs() < 1e-6);

    let x = g.constant(t(Shape::new(1, 1, 1, 3), &[-2.0, 0.0, 3.0]));
    let a = g.abs(x);
    assert_eq!(g.value(a).data(), &[2.0, 0.0, 3.0]);

    // large arguments do not overflow
    let big = g.constant(t(Shape::new(1, 1, 1, 2), &[800.0, -800.0]));
    let sb = g.softplus(big);
    assert_eq!(g.value(sb).data()[0], 800.0);
    assert!(g.value(sb).data()[1] >= 0.0 && g.value(sb).data()[1] < 1e-300);
}

#[test]
fn abs_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(t(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]));
    let a = g.abs(x);
    let s = g.sum(a);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn unguarded_log_and_div_reject_bad_domains() {
    let mut g = Graph::new();
    let x = g.constant(t(Shape::new(1, 1, 1, 2), &[1.0, 0.0]));
    assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
    let one = g.constant(Tensor4::ones(Shape::new(1, 1, 1, 2)));
    assert!(matches!(g.div(one, x), Err(Error::Domain { op: "div", .. })));

    let gl = g.log_guarded(x);
    assert_eq!(g.value(gl).data()[1], 1e-12f64.ln());
    let gd = g.div_guarded(one, x).unwrap();
    assert_eq!(g.value(gd).data()[1], 1e12);
}

#[test]
fn log_of_square_plus_one_matches_finite_differences() {
    let mut r = rng(4);
    let x = random_tensor(&mut r, Shape::new(1, 2, 3, 3), -2.0, 2.0);
    let report = finite_diff_gradcheck(
        |g, p| {
            let sq = g.square(p[0]);
            let s1 = g.add_scalar(sq, 1.0);
            let l = g.log(s1)?;
            Ok(g.sum(l))
        },
        &[x],
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
}

#[test]
fn concat_shapes_and_gradient_routing() {
    let s = Shape::new(2, 1, 3, 4);
    let mut g = Graph::new();
    let parts: Vec<_> = (0..3)
        .map(|i| g.param(Tensor4::filled(s, i as f64)))
        .collect();
    let cat = g.concat_channels(&parts).unwrap();
    assert_eq!(g.shape(cat), Shape::new(2, 3, 3, 4));
    assert_eq!(g.value(cat).get(1, 2, 0, 0), 2.0);

    let single = g.concat_channels(&parts[..1]).unwrap();
    assert_eq!(g.value(single), g.value(parts[0]));

    // one-hot upstream gradient at (b=1, c=1, h=2, w=3)
    let mut hot = Tensor4::zeros(g.shape(cat));
    hot.set(1, 1, 2, 3, 1.0);
    let hv = g.constant(hot);
    let prod = g.mul(cat, hv).unwrap();
    let root = g.sum(prod);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(parts[0]).unwrap().sum(), 0.0);
    assert_eq!(grads.get(parts[2]).unwrap().sum(), 0.0);
    let g1 = grads.get(parts[1]).unwrap();
    assert_eq!(g1.sum(), 1.0);
    assert_eq!(g1.get(1, 0, 2, 3), 1.0);

    let odd = g.constant(Tensor4::zeros(Shape::new(2, 1, 3, 5)));
    assert!(g.concat_channels(&[parts[0], odd]).is_err());
}

#[test]
fn stop_gradient_contract() {
    let mut r = rng(5);
    let xv = random_tensor(&mut r, Shape::new(1, 2, 3, 3), -2.0, 2.0);
    let mut g = Graph::new();
    let x = g.param(xv.clone());
    let sg = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(sg), &xv);
    assert!(!g.requires_grad(sg));
    assert_eq!(g.op_kind(sg), OpKind::StopGradient);

    let s = g.sum(sg);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));

    // d/dx sum(x * sg(x)) = sg(x)
    let prod = g.mul(x, sg).unwrap();
    let root = g.sum(prod);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(x).unwrap(), &xv);

    let report = finite_diff_gradcheck(
        |g, p| {
            let sg = g.stop_gradient(p[0])?;
            let prod = g.mul(p[0], sg)?;
            Ok(g.sum(prod))
        },
        std::slice::from_ref(&xv),
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8);
    assert_eq!(report.analytic[0], xv);
}

#[test]
fn gradcheck_frozen_path_contributes_zero() {
    let x = Tensor4::from_vec(Shape::new(1, 1, 1, 3), vec![0.5, -1.0, 2.0]).unwrap();
    let report = finite_diff_gradcheck(
        |g, p| {
            let sg = g.stop_gradient(p[0])?;
            let sq = g.square(sg);
            Ok(g.sum(sq))
        },
        &[x],
        1e-3,
    )
    .unwrap();
    assert!(report.analytic[0].data().iter().all(|&v| v == 0.0));
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn gradcheck_of_sum_of_squares_is_exact() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, Shape::new(1, 1, 4, 4), -2.0, 2.0);
    let report = finite_diff_gradcheck(
        |g, p| {
            let sq = g.square(p[0]);
            Ok(g.sum(sq))
        },
        std::slice::from_ref(&x),
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8);
    assert_eq!(report.analytic[0], x.map(|v| 2.0 * v));
    assert_eq!(report.checked, 16);
    assert!(finite_diff_gradcheck(|g, p| Ok(g.sum(p[0])), &[x], 0.0).is_err());
}

#[test]
fn masked_mse_examples() {
    let s = Shape::new(1, 1, 1, 3);
    let mut g = Graph::new();
    let p = g.param(t(s, &[1.0, 2.0, 3.0]));
    let target = g.constant(t(s, &[1.0, 9.0, 5.0]));
    let mask = ValidityMask::new(t(s, &[1.0, 0.0, 1.0])).unwrap();
    let l = g.masked_mse(p, target, &mask).unwrap();
    assert_eq!(g.value(l).item(), 2.0);

    let same = g.masked_mse(p, p, &mask).unwrap();
    assert_eq!(g.value(same).item(), 0.0);

    let empty = ValidityMask::new(Tensor4::zeros(s)).unwrap();
    assert!(matches!(
        g.masked_mse(p, target, &empty),
        Err(Error::EmptyMask(_))
    ));
    assert!(ValidityMask::new(t(s, &[1.0, 0.5, 0.0])).is_err());
}

#[test]
fn masked_mse_matches_loop_oracle() {
    let mut r = rng(7);
    let s = Shape::new(2, 1, 4, 4);
    let pred = random_tensor(&mut r, s, -2.0, 2.0);
    let target = random_tensor(&mut r, s, -2.0, 2.0);
    let m = random_tensor(&mut r, s, 0.0, 1.0).map(|v| if v < 0.6 { 1.0 } else { 0.0 });
    let mask = ValidityMask::new(m.clone()).unwrap();

    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..s.numel() {
        if m.data()[i] == 1.0 {
            let d = pred.data()[i] - target.data()[i];
            sum += d * d;
            n += 1;
        }
    }
    let oracle = sum / n as f64;

    let mut g = Graph::new();
    let (pv, tv) = (g.constant(pred), g.constant(target));
    let l = g.masked_mse(pv, tv, &mask).unwrap();
    assert!((g.value(l).item() - oracle).abs() < 1e-12);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor4::ones(Shape::new(1, 1, 2, 2)));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor4::ones(Shape::new(1, 1, 2, 2)));
}

#[test]
fn diamond_graph_accumulates_both_paths() {
    // root = sum(3x + x^2): d/dx = 3 + 2x
    let xv = Tensor4::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let x = g.param(xv.clone());
    let a = g.scale(x, 3.0);
    let b = g.square(x);
    let s = g.add(a, b).unwrap();
    let root = g.sum(s);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0, 4.0]);
}

#[test]
fn two_layer_conv_stack_gradcheck() {
    let mut r = rng(8);
    let input = random_tensor(&mut r, Shape::new(2, 2, 6, 6), -1.0, 1.0);
    let target = random_tensor(&mut r, Shape::new(2, 1, 3, 3), -1.0, 1.0);
    let m = random_tensor(&mut r, Shape::new(2, 1, 3, 3), 0.0, 1.0)
        .map(|v| if v < 0.7 { 1.0 } else { 0.0 });
    let mask = ValidityMask::new(m).unwrap();
    let params = vec![
        random_tensor(&mut r, Shape::new(3, 2, 3, 3), -0.5, 0.5),
        random_tensor(&mut r, Shape::new(3, 1, 1, 1), -0.1, 0.1),
        random_tensor(&mut r, Shape::new(1, 3, 3, 3), -0.5, 0.5),
        random_tensor(&mut r, Shape::new(1, 1, 1, 1), -0.1, 0.1),
    ];
    let report = finite_diff_gradcheck(
        |g, p| {
            let x = g.constant(input.clone());
            let h = g.conv2d(x, p[0], Some(p[1]), 2, 1)?;
            let h = g.softplus(h);
            let y = g.conv2d(h, p[2], Some(p[3]), 1, 1)?;
            let tv = g.constant(target.clone());
            g.masked_mse(y, tv, &mask)
        },
        &params,
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn scalar_broadcast_gradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor4::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap());
    let c = g.param(Tensor4::scalar(2.0));
    let y = g.mul(x, c).unwrap();
    let root = g.sum(y);
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(c).unwrap().item(), 6.0);
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    let other = g.constant(Tensor4::ones(Shape::new(1, 1, 1, 2)));
    assert!(g.add(x, other).is_err());
}

#[test]
fn backward_is_deterministic() {
    let mut r = rng(9);
    let input = random_tensor(&mut r, Shape::new(1, 2, 8, 8), -1.0, 1.0);
    let wv = random_tensor(&mut r, Shape::new(4, 2, 3, 3), -1.0, 1.0);
    let tw = random_tensor(&mut r, Shape::new(4, 2, 4, 4), -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.constant(input);
    let w = g.param(wv);
    let w2 = g.param(tw);
    let h = g.conv2d(x, w, None, 2, 1).unwrap();
    let h = g.relu(h);
    let y = g.transpose_conv2d(h, w2, None, 2, 1).unwrap();
    let sq = g.square(y);
    let root = g.sum(sq);
    let a = g.backward(root).unwrap();
    let b = g.backward(root).unwrap();
    assert_eq!(a.get(w), b.get(w));
    assert_eq!(a.get(w2), b.get(w2));
}

fn away_from_zero(v: f64) -> f64 {
    if v.abs() < 0.1 {
        0.1_f64.copysign(v)
    } else {
        v
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Square,
    Abs,
    Relu,
    Softplus,
    Log,
    Scale,
}

fn unary_strategy() -> impl Strategy<Value = Unary> {
    prop_oneof![
        Just(Unary::Square),
        Just(Unary::Abs),
        Just(Unary::Relu),
        Just(Unary::Softplus),
        Just(Unary::Log),
        Just(Unary::Scale),
    ]
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unary_gradients_match_finite_differences(op in unary_strategy(), xs in values(6), ws in values(6)) {
        let s = Shape::new(1, 1, 2, 3);
        let x = Tensor4::from_vec(s, xs.into_iter().map(away_from_zero).collect()).unwrap();
        let weights = Tensor4::from_vec(s, ws).unwrap();
        let report = finite_diff_gradcheck(
            |g, p| {
                let y = match op {
                    Unary::Square => g.square(p[0]),
                    Unary::Abs => g.abs(p[0]),
                    Unary::Relu => g.relu(p[0]),
                    Unary::Softplus => g.softplus(p[0]),
                    Unary::Log => {
                        let a = g.abs(p[0]);
                        g.log(a)?
                    }
                    Unary::Scale => g.scale(p[0], -1.7),
                };
                let w = g.constant(weights.clone());
                let wy = g.mul(y, w)?;
                Ok(g.sum(wy))
            },
            &[x],
            1e-3,
        ).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}: {}", op, report.max_rel_error);
    }

    #[test]
    fn binary_gradients_match_finite_differences(a in values(6), b in values(6)) {
        let s = Shape::new(1, 1, 2, 3);
        // a >= 0 keeps both gradients at least 0.5 in magnitude
        let a = Tensor4::from_vec(s, a.into_iter().map(f64::abs).collect()).unwrap();
        // keep denominators well conditioned
        let b = Tensor4::from_vec(s, b.into_iter().map(|v| if v.abs() < 0.5 { v.signum() * 0.5 + v } else { v }).collect()).unwrap();
        let report = finite_diff_gradcheck(
            |g, p| {
                let s1 = g.add(p[0], p[1])?;
                let s2 = g.sub(p[0], p[1])?;
                let m = g.mul(s1, s2)?;
                let d = g.div(m, p[1])?;
                let dg = g.div_guarded(p[0], p[1])?;
                let t = g.add(d, dg)?;
                Ok(g.sum(t))
            },
            &[a, b],
            1e-3,
        ).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn conv_gradients_match_finite_differences(seed in 0u64..1000, stride in 1usize..3, pad in 0usize..2) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, Shape::new(1, 2, 5, 5), -2.0, 2.0);
        let w = random_tensor(&mut r, Shape::new(2, 2, 3, 3), -2.0, 2.0);
        let b = random_tensor(&mut r, Shape::new(2, 1, 1, 1), -2.0, 2.0);
        let tw = random_tensor(&mut r, Shape::new(2, 1, 2, 2), -2.0, 2.0);
        let report = finite_diff_gradcheck(
            |g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), stride, pad)?;
                let z = g.transpose_conv2d(y, p[3], None, 2, 0)?;
                let sq = g.square(z);
                Ok(g.sum(sq))
            },
            &[x, w, b, tw],
            1e-3,
        ).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn conv_and_transpose_match_oracles(
        seed in 0u64..10_000,
        batch in 1usize..5,
        cin in 1usize..9,
        cout in 1usize..9,
        h in 4usize..17,
        w in 4usize..17,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, Shape::new(batch, cin, h, w), -2.0, 2.0);
        let wt = random_tensor(&mut r, Shape::new(cout, cin, k, k), -2.0, 2.0);
        let bias = random_tensor(&mut r, Shape::new(cout, 1, 1, 1), -2.0, 2.0);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(bias.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        prop_assert!(max_abs_diff(g.value(y), &conv2d_oracle(&x, &wt, Some(&bias), stride, pad)) < 1e-12);

        // transpose weights are (in, out, k, k); reuse wt with roles swapped
        let tx = random_tensor(&mut r, Shape::new(batch, cout, h.min(8), w.min(8)), -2.0, 2.0);
        let tb = random_tensor(&mut r, Shape::new(cin, 1, 1, 1), -2.0, 2.0);
        let tpad = pad.min(k.saturating_sub(1));
        let (txv, tbv) = (g.constant(tx.clone()), g.constant(tb.clone()));
        if let Ok(ty) = g.transpose_conv2d(txv, wv, Some(tbv), stride, tpad) {
            let oracle = transpose_conv2d_oracle(&tx, &wt, Some(&tb), stride, tpad);
            prop_assert!(max_abs_diff(g.value(ty), &oracle) < 1e-12);
        }
    }

    #[test]
    fn masked_mse_with_full_mask_is_plain_mean(xs in values(12), ys in values(12)) {
        let s = Shape::new(1, 1, 3, 4);
        let (a, b) = (Tensor4::from_vec(s, xs.clone()).unwrap(), Tensor4::from_vec(s, ys.clone()).unwrap());
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let l = g.masked_mse(av, bv, &ValidityMask::all_valid(s)).unwrap();
        let mean = xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 12.0;
        prop_assert!((g.value(l).item() - mean).abs() < 1e-12);
    }

    #[test]
    fn stop_gradient_is_bitwise_identity(xs in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 4)) {
        let s = Shape::new(1, 1, 2, 2);
        let x = Tensor4::from_vec(s, xs).unwrap();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let sg = g.stop_gradient(xv).unwrap();
        prop_assert_eq!(
            g.value(sg).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
