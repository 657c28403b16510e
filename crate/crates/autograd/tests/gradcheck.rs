//! Every differentiable op checked against central finite differences in f64.

use dscm_autograd::{Tape64, Tensor64, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>;

fn check(inputs: &[Tensor64], build: &Build, tol: f64) {
    let tape = Tape64::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = build(&vars);
    let grads = tape.backward(loss);
    let eval = |ins: &[Tensor64]| {
        let tape = Tape64::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        build(&vars).item()
    };
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / scale < tol,
                "input {k} element {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor64 {
    Tensor64::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor64 {
    rand(shape, seed).map(|v| v.abs() + 0.5)
}

#[test]
fn elementwise_ops() {
    let a = rand(&[2, 3], 1);
    let b = positive(&[2, 3], 2);
    check(&[a.clone(), b.clone()], &|v| (v[0] + v[1]).square().sum(), 1e-6);
    check(&[a.clone(), b.clone()], &|v| (v[0] - v[1] * v[0]).sum(), 1e-6);
    check(&[a.clone(), b.clone()], &|v| (v[0] / v[1]).square().sum(), 1e-6);
    check(std::slice::from_ref(&a), &|v| (-v[0]).scale(1.5).add_scalar(2.0).square().mean(), 1e-6);
    check(std::slice::from_ref(&a), &|v| v[0].sigmoid().sum(), 1e-6);
    check(std::slice::from_ref(&a), &|v| v[0].tanh().sum(), 1e-6);
    check(std::slice::from_ref(&a), &|v| v[0].exp().sum(), 1e-6);
    check(std::slice::from_ref(&b), &|v| v[0].ln().sum(), 1e-6);
    check(std::slice::from_ref(&a), &|v| v[0].softplus().sum(), 1e-6);
    check(std::slice::from_ref(&a), &|v| v[0].abs().square().sum(), 1e-6);
}

#[test]
fn piecewise_ops_away_from_kinks() {
    // keep samples away from 0 and the clamp bounds
    let a = rand(&[3, 4], 3).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    check(std::slice::from_ref(&a), &|v| v[0].relu().square().sum(), 1e-6);
    check(std::slice::from_ref(&a), &|v| v[0].leaky_relu(0.1).square().sum(), 1e-6);
    let a = a.map(|v| if (v.abs() - 0.5).abs() < 0.05 { 0.2 } else { v });
    check(&[a], &|v| v[0].clamp(-0.5, 0.5).square().sum(), 1e-6);
}

#[test]
fn convolution_with_bias_and_stride() {
    let x = rand(&[2, 3, 5, 6], 4);
    let w = rand(&[4, 3, 3, 3], 5);
    let b = rand(&[4], 6);
    for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
        check(
            &[x.clone(), w.clone(), b.clone()],
            &move |v| v[0].conv2d(v[1], Some(v[2]), stride, pad).square().sum(),
            1e-5,
        );
    }
    let w1 = rand(&[2, 3, 1, 1], 7);
    check(&[x, w1], &|v| v[0].conv2d(v[1], None, 1, 0).tanh().sum(), 1e-6);
}

#[test]
fn resampling_and_layout_ops() {
    let x = rand(&[2, 3, 4, 4], 8);
    let y = rand(&[2, 1, 4, 4], 9);
    check(std::slice::from_ref(&x), &|v| v[0].avg_pool2().square().sum(), 1e-6);
    check(std::slice::from_ref(&x), &|v| v[0].upsample2().square().sum(), 1e-6);
    check(&[x.clone(), y.clone()], &|v| {
        let t = v[0].tape();
        t.concat(&[v[1], v[0]]).slice_channels(1, 2).square().sum()
    }, 1e-6);
    check(std::slice::from_ref(&x), &|v| v[0].sum_spatial().square().sum(), 1e-6);
    check(std::slice::from_ref(&x), &|v| v[0].mean_spatial().square().sum(), 1e-6);
    check(std::slice::from_ref(&x), &|v| v[0].sum_per_sample().square().sum(), 1e-6);
    check(std::slice::from_ref(&x), &|v| v[0].reshape(&[6, 16]).sum_spatial().square().sum(), 1e-6);
    let b = rand(&[3], 10);
    check(&[x, b], &|v| v[0].add_channel_bias(v[1]).square().sum(), 1e-6);
    let p = rand(&[2, 3], 11);
    check(&[p], &|v| v[0].broadcast_spatial(2, 3).square().sum(), 1e-6);
}

#[test]
fn linear_layer() {
    let x = rand(&[5, 3], 12);
    let w = rand(&[4, 3], 13);
    let b = rand(&[4], 14);
    check(&[x, w, b], &|v| v[0].linear(v[1], Some(v[2])).tanh().square().sum(), 1e-6);
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape64::new();
    let x = tape.var(Tensor64::scalar(2.0));
    let loss = (x * x.detach()).sum();
    let g = tape.backward(loss);
    assert_eq!(g.get(x).unwrap().item(), 2.0);
}

proptest! {
    #[test]
    fn random_smooth_compositions(vals in proptest::collection::vec(-2.0f64..2.0, 6), seed in 0u64..1000) {
        let a = Tensor64::from_vec(&[1, 6], vals);
        let w = rand(&[3, 6], seed);
        check(&[a, w], &|v| {
            let h = v[0].linear(v[1], None).tanh();
            (h.softplus() * h.sigmoid()).sum()
        }, 1e-5);
    }
}
