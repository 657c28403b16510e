//! Gradients against central finite differences, KL sign, flow normalisation
//! by quadrature and parent-conditioning probes on miniature models.

use dscm_autograd::{Binding, ParamStore, Tape, Tensor};
use dscm_core::flow::FlowMechanism;
use dscm_core::graph::{AttributeKind, AttributeSpec, CausalGraph, Normalization};
use dscm_core::hvae::{kl_standard_normal, Hvae, HvaeConfig};
use proptest::prelude::*;

use crate::common::cases;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> HvaeConfig {
    HvaeConfig {
        height: 8,
        width: 8,
        levels: 3,
        channels: vec![3, 4, 4],
        latent_channels: 1,
        parent_dim: 2,
        sigma_x: 0.1,
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Relative error with an absolute floor for near-zero gradients.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Indices of a handful of entries per tensor, always including the first and last.
fn probe_indices(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = vec![0, len - 1];
    for _ in 0..3 {
        idx.push(rng.gen_range(0..len));
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Negative ELBO of the miniature HVAE with fixed noise, as a function of
/// the parameters, the image and the parents.
fn nelbo(model: &Hvae<f64>, params: &ParamStore<f64>, x: &Tensor<f64>, pa: &Tensor<f64>, eps: &[Tensor<f64>]) -> f64 {
    let tape = Tape::new();
    let p = params.bind(&tape, Binding::Frozen);
    model
        .elbo_on(&p, tape.constant(x.clone()), tape.constant(pa.clone()), eps)
        .total
        .item()
}

pub fn hvae_parameter_gradients_match_finite_differences() {
    let model = Hvae::<f64>::new(tiny_config(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let pa = uniform(&[2, 2], -1.0, 1.0, &mut rng);
    let eps = model.draw_eps(2, &mut rng);

    let tape = Tape::new();
    let p = model.params.bind(&tape, Binding::Trainable);
    let loss = model
        .elbo_on(&p, tape.constant(x.clone()), tape.constant(pa.clone()), &eps)
        .total;
    let grads = p.grads(&tape.backward(loss));

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for j in probe_indices(g.len(), &mut rng) {
            let mut plus = model.params.clone();
            plus.tensors_mut()[k].data_mut()[j] += h;
            let mut minus = model.params.clone();
            minus.tensors_mut()[k].data_mut()[j] -= h;
            let numeric = (nelbo(&model, &plus, &x, &pa, &eps) - nelbo(&model, &minus, &x, &pa, &eps)) / (2.0 * h);
            let e = rel_err(g.data()[j], numeric);
            assert!(
                e <= 1e-3,
                "{} [{j}]: analytic {} vs numeric {numeric}",
                model.params.names()[k],
                g.data()[j]
            );
            worst = worst.max(e);
        }
    }
    assert!(worst.is_finite());
}

pub fn hvae_input_and_parent_gradients_match_finite_differences() {
    let model = Hvae::<f64>::new(tiny_config(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
    let pa = uniform(&[1, 2], -1.0, 1.0, &mut rng);
    let eps = model.draw_eps(1, &mut rng);

    let tape = Tape::new();
    let p = model.params.bind(&tape, Binding::Frozen);
    let xv = tape.var(x.clone());
    let pv = tape.var(pa.clone());
    let loss = model.elbo_on(&p, xv, pv, &eps).total;
    let grads = tape.backward(loss);
    let (gx, gp) = (grads.get_or_zeros(xv), grads.get_or_zeros(pv));

    let h = 1e-5;
    for j in probe_indices(x.len(), &mut rng) {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data_mut()[j] += h;
        b.data_mut()[j] -= h;
        let numeric = (nelbo(&model, &model.params, &a, &pa, &eps) - nelbo(&model, &model.params, &b, &pa, &eps)) / (2.0 * h);
        assert!(rel_err(gx.data()[j], numeric) <= 1e-3, "pixel {j}: {} vs {numeric}", gx.data()[j]);
    }
    for j in 0..pa.len() {
        let (mut a, mut b) = (pa.clone(), pa.clone());
        a.data_mut()[j] += h;
        b.data_mut()[j] -= h;
        let numeric = (nelbo(&model, &model.params, &x, &a, &eps) - nelbo(&model, &model.params, &x, &b, &eps)) / (2.0 * h);
        assert!(rel_err(gp.data()[j], numeric) <= 1e-3, "parent {j}: {} vs {numeric}", gp.data()[j]);
    }
}

pub fn decoder_gradient_through_latents_matches_finite_differences() {
    let model = Hvae::<f64>::new(tiny_config(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pa = uniform(&[1, 2], -1.0, 1.0, &mut rng);
    let z = model.draw_eps(1, &mut rng);
    let weights = uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut rng);
    let eval = |z: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let p = model.params.bind(&tape, Binding::Frozen);
        let zs: Vec<_> = z.iter().map(|t| tape.constant(t.clone())).collect();
        (model.decode_on(&p, &zs, tape.constant(pa.clone())) * tape.constant(weights.clone()))
            .sum()
            .item()
    };
    let tape = Tape::new();
    let p = model.params.bind(&tape, Binding::Frozen);
    let zs: Vec<_> = z.iter().map(|t| tape.var(t.clone())).collect();
    let out = (model.decode_on(&p, &zs, tape.constant(pa.clone())) * tape.constant(weights.clone())).sum();
    let grads = tape.backward(out);
    let h = 1e-5;
    for (l, zl) in z.iter().enumerate() {
        let g = grads.get_or_zeros(zs[l]);
        for j in probe_indices(zl.len(), &mut rng) {
            let (mut a, mut b) = (z.to_vec(), z.to_vec());
            a[l].data_mut()[j] += h;
            b[l].data_mut()[j] -= h;
            let numeric = (eval(&a) - eval(&b)) / (2.0 * h);
            assert!(rel_err(g.data()[j], numeric) <= 1e-3, "level {l} [{j}]: {} vs {numeric}", g.data()[j]);
        }
    }
}

fn two_node_graph(norm: Normalization) -> CausalGraph {
    let mut a = AttributeSpec::new("a", AttributeKind::ContinuousPositive, "px", &["s"]);
    a.normalization = norm;
    let mut s = AttributeSpec::new("s", AttributeKind::ContinuousReal, "", &[]);
    s.normalization = Normalization { mean: 0.0, std: 1.0 };
    CausalGraph::new(vec![s, a], &["a"])
}

/// A conditioned mechanism with randomised (non-identity) weights.
fn random_flow(seed: u64, norm: Normalization) -> FlowMechanism<f64> {
    let graph = two_node_graph(norm);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flow = FlowMechanism::<f64>::new(graph.attribute("a").unwrap(), &graph, 8, &mut rng).unwrap();
    for t in flow.params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    flow
}

pub fn flow_log_prob_gradients_match_finite_differences() {
    let norm = Normalization { mean: 3.0, std: 1.5 };
    let flow = random_flow(21, norm);
    let values = [0.7, 2.5, 4.0, 6.5];
    let parents: Vec<Vec<f64>> = vec![vec![-1.0], vec![0.3], vec![1.2], vec![2.0]];
    let eval = |store: &ParamStore<f64>| -> f64 {
        let tape = Tape::new();
        let p = store.bind(&tape, Binding::Frozen);
        flow.log_prob_on(&p, &tape, &values, &parents).unwrap().item()
    };
    let tape = Tape::new();
    let p = flow.params.bind(&tape, Binding::Trainable);
    let lp = flow.log_prob_on(&p, &tape, &values, &parents).unwrap();
    let grads = p.grads(&tape.backward(lp));
    let h = 1e-6;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = flow.params.clone();
            plus.tensors_mut()[k].data_mut()[j] += h;
            let mut minus = flow.params.clone();
            minus.tensors_mut()[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(rel_err(g.data()[j], numeric) <= 1e-4, "tensor {k} [{j}]: {} vs {numeric}", g.data()[j]);
        }
    }
}

pub fn batched_log_prob_agrees_with_pointwise_density() {
    let flow = random_flow(22, Normalization { mean: 3.0, std: 1.5 });
    let tape = Tape::new();
    let p = flow.params.bind(&tape, Binding::Frozen);
    let total = flow.log_prob_on(&p, &tape, &[1.5, 5.0], &[vec![0.2], vec![-0.4]]).unwrap().item();
    let sum = flow.log_prob(1.5, &[0.2]).unwrap() + flow.log_prob(5.0, &[-0.4]).unwrap();
    assert!((total - sum).abs() < 1e-10);
}

/// Trapezoid rule for `∫ exp(log_prob(a)) da` over the positive half-line.
fn integrate(flow: &FlowMechanism<f64>, parent: f64, hi: f64, steps: usize) -> f64 {
    let dx = hi / steps as f64;
    let f = |a: f64| flow.log_prob(a, &[parent]).map(f64::exp).unwrap_or(0.0);
    let mut acc = 0.5 * f(hi);
    for i in 1..steps {
        acc += f(i as f64 * dx);
    }
    acc * dx
}

pub fn flow_density_integrates_to_one() {
    for (seed, norm) in [
        (31, Normalization { mean: 3.0, std: 1.5 }),
        (32, Normalization { mean: 80.0, std: 12.0 }),
        (33, Normalization { mean: 0.5, std: 0.8 }),
    ] {
        let flow = random_flow(seed, norm);
        for parent in [-1.5, 0.0, 1.0] {
            let (shift, ls) = flow.shift_log_scale(&[parent]);
            // Far tail of w in original units, with softplus(w) ≈ w there.
            let hi = norm.mean + norm.std * (shift + 12.0 * ls.exp());
            let mass = integrate(&flow, parent, hi.max(10.0), 200_000);
            assert!((mass - 1.0).abs() < 0.01, "seed {seed} parent {parent}: mass {mass}");
        }
    }
}

pub fn decoder_and_encoder_respond_to_parents_at_every_level() {
    let config = tiny_config();
    let model = Hvae::<f64>::new(config.clone(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
    let pa = Tensor::from_vec(&[1, 2], vec![-0.5, 0.5]);
    let pa2 = Tensor::from_vec(&[1, 2], vec![0.8, -0.3]);

    let q1 = model.encode(&x, &pa).unwrap();
    let q2 = model.encode(&x, &pa2).unwrap();
    for l in 0..config.levels {
        let d: f64 = q1.loc[l].data().iter().zip(q2.loc[l].data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(d > 1e-8, "posterior level {l} ignores the parents");
    }

    // Decoder sensitivity to the parents through each level's block: hold
    // the latents fixed and differentiate the output w.r.t. the parents.
    let tape = Tape::new();
    let p = model.params.bind(&tape, Binding::Frozen);
    let zs: Vec<_> = q1.loc.iter().map(|t| tape.constant(t.clone())).collect();
    let pv = tape.var(pa.clone());
    let out = model.decode_on(&p, &zs, pv).sum();
    let g = tape.backward(out).get_or_zeros(pv);
    assert!(g.data().iter().all(|v| v.abs() > 1e-10), "decoder gradient w.r.t. parents {:?}", g.data());

    let y1 = model.decode(&q1.loc, &pa).unwrap();
    let y2 = model.decode(&q1.loc, &pa2).unwrap();
    let d: f64 = y1.data().iter().zip(y2.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(d > 1e-8);
}

pub fn kl_is_non_negative() {
    proptest!(cases(128), |(loc in prop::collection::vec(-5.0f64..5.0, 1..16), log_scale in prop::collection::vec(-4.0f64..3.0, 16))| {
        let n = loc.len();
        let tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::from_vec(&[n], loc.clone()));
        let s = tape.constant(Tensor::from_vec(&[n], log_scale[..n].iter().map(|v| v.exp()).collect()));
        let kl = kl_standard_normal(l, s).item();
        prop_assert!(kl >= -1e-12, "kl {kl}");
        // Closed form per site: (σ² + μ² − 1)/2 − ln σ.
        let oracle: f64 = loc.iter().zip(&log_scale).map(|(m, ls)| 0.5 * ((2.0 * ls).exp() + m * m - 1.0) - ls).sum();
        prop_assert!((kl - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
    });
}

pub fn flow_round_trip() {
    proptest!(cases(128), |(u in -4.0f64..4.0, parent in -2.0f64..2.0, seed in 0u64..50)| {
        let flow = random_flow(seed, Normalization { mean: 40.0, std: 9.0 });
        let a = flow.forward(u, &[parent]);
        let back = flow.inverse(a, &[parent]).unwrap();
        prop_assert!((back - u).abs() <= 1e-5, "{u} -> {a} -> {back}");
    });
}

checks!(
    hvae_parameter_gradients_match_finite_differences,
    hvae_input_and_parent_gradients_match_finite_differences,
    decoder_gradient_through_latents_matches_finite_differences,
    flow_log_prob_gradients_match_finite_differences,
    batched_log_prob_agrees_with_pointwise_density,
    flow_density_integrates_to_one,
    decoder_and_encoder_respond_to_parents_at_every_level,
    kl_is_non_negative,
    flow_round_trip,
);
