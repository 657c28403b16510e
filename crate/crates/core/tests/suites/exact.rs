//! Exact properties that need no training: SCM oracles, area and Dice
//! arithmetic, metrics, locality, graph ordering and frozen guides.

use dscm_core::auxiliary::{dice_loss, soft_area, thresholded_area};
use dscm_core::cft::{finetune, step_gradients, CftConfig, Guide, Regime};
use dscm_core::checkpoint::param_hash;
use dscm_core::dscm::AbductionMode;
use dscm_core::eval::{locality, mae, mape};
use dscm_core::flow::FlowSet;
use dscm_core::graph::{AttributeKind, AttributeSpec, AttributeVector, CausalGraph, Intervention, Normalization};
use dscm_core::image::{Image, SoftMask};
use dscm_core::scm::{abduct_noise, predict_parents, AffineScm, Mechanisms};
use dscm_core::Error;
use proptest::prelude::*;

use crate::common::cases;

fn real(name: &str, parents: &[&str]) -> AttributeSpec {
    AttributeSpec::new(name, AttributeKind::ContinuousReal, "", parents)
}

fn mask(structures: &[&str], grids: Vec<Image>) -> SoftMask {
    SoftMask::new(structures.iter().map(|s| s.to_string()).collect(), grids, 1.0).unwrap()
}

fn block(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Image {
    let mut m = Image::zeros(h, w);
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(y, x, 1.0);
        }
    }
    m
}

pub fn soft_area_of_all_ones_is_pixel_count() {
    let m = mask(&["s"], vec![Image::new(64, 64, vec![1.0; 64 * 64])]);
    assert_eq!(soft_area(&m, "s").unwrap(), 4096.0);
    let scaled = SoftMask::new(vec!["s".into()], vec![Image::new(64, 64, vec![1.0; 4096])], 0.25).unwrap();
    assert_eq!(soft_area(&scaled, "s").unwrap(), 1024.0);
}

pub fn dice_edge_cases() {
    let a = block(16, 16, 0, 8, 0, 8);
    let disjoint = block(16, 16, 8, 16, 8, 16);
    // Shifted by half its width: overlap is half of each region.
    let half = block(16, 16, 0, 8, 4, 12);
    let d = |p: &Image, t: &Image| dice_loss(&mask(&["s"], vec![p.clone()]), &mask(&["s"], vec![t.clone()])).unwrap();
    assert!(d(&a, &a) < 1e-6);
    assert!((d(&a, &disjoint) - 1.0).abs() < 1e-6);
    assert!((d(&a, &half) - 0.5).abs() < 1e-6);
}

pub fn metric_closed_forms() {
    assert_eq!(mape(&[110.0], &[100.0]).unwrap(), 10.0);
    assert_eq!(mape(&[100.0], &[100.0]).unwrap(), 0.0);
    assert!((mape(&[90.0, 110.0], &[100.0, 100.0]).unwrap() - 10.0).abs() < 1e-12);
    assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
    assert_eq!(mae(&[4.0, 5.0], &[4.0, 5.0]).unwrap(), 0.0);
    assert!(matches!(mape(&[1.0], &[0.0]), Err(Error::Metric(_))));
    assert!(mae(&[1.0, 2.0], &[1.0]).is_err());
}

pub fn locality_reference_cases() {
    let target = block(16, 16, 6, 10, 6, 10);
    let x = Image::zeros(16, 16);
    let mut inside = x.clone();
    inside.set(8, 8, 0.4);
    let mut outside = x.clone();
    outside.set(0, 15, 0.4);
    let mut both = inside.clone();
    both.set(0, 15, 0.4);
    assert_eq!(locality(&x, &inside, &target, 2), 0.0);
    assert_eq!(locality(&x, &outside, &target, 2), 1.0);
    assert!((locality(&x, &both, &target, 2) - 0.5).abs() < 1e-12);
    assert_eq!(locality(&x, &x, &target, 2), 0.0);
    // Two pixels outside the mask are still inside the radius-2 dilation.
    let mut near = x.clone();
    near.set(8, 11, 0.4);
    assert_eq!(locality(&x, &near, &target, 2), 0.0);
}

pub fn topological_order_and_cycle_detection() {
    let g = CausalGraph::new(vec![real("c", &["b"]), real("a", &[]), real("b", &["a"])], &["c"]);
    assert_eq!(g.topological_order().unwrap(), vec!["a", "b", "c"]);
    let cyclic = CausalGraph::new(vec![real("a", &["c"]), real("b", &["a"]), real("c", &["b"]), real("d", &[])], &["d"]);
    match cyclic.topological_order() {
        Err(Error::Cycle(members)) => assert_eq!(members, vec!["a", "b", "c"]),
        other => panic!("expected a cycle, got {other:?}"),
    }
    assert!(cyclic.ensure_valid().is_err());
}

pub fn frozen_guides_receive_no_gradient() {
    let world = crate::common::tiny_world::<f64>(4);
    let batch: Vec<_> = world.data.iter().take(3).collect();
    let ivs: Vec<_> = batch
        .iter()
        .map(|o| Intervention::single("left", o.attributes.get("left").unwrap() * 1.2))
        .collect();
    let eps = world.model.hvae.draw_eps(3, &mut rand::thread_rng());
    for guide in [Guide::Seg(&world.segmentor), Guide::Reg(&world.regressor)] {
        let g = step_gradients(&world.model, guide, &batch, &ivs, 1.0, &eps).unwrap();
        assert!(g.auxiliary.iter().all(|t| t.data().iter().all(|&v| v == 0.0)), "{:?}", guide.regime());
        let hvae_norm: f64 = g.hvae.iter().flat_map(|t| t.data()).map(|v| v * v).sum();
        assert!(hvae_norm > 0.0);
    }
}

pub fn finetuning_leaves_the_guide_untouched() {
    let world = crate::common::tiny_world::<f32>(5);
    let before_seg = param_hash(&world.segmentor.params);
    let mut cc = CftConfig::new(Regime::Seg, crate::common::structures());
    cc.steps = 2;
    cc.batch_size = 2;
    let (tuned, _) = finetune(world.model.clone(), Guide::Seg(&world.segmentor), &world.data, &world.data, &cc).unwrap();
    assert_eq!(param_hash(&world.segmentor.params), before_seg);
    assert_ne!(param_hash(&tuned.hvae.params), param_hash(&world.model.hvae.params));

    let cc = CftConfig::new(Regime::None, crate::common::structures());
    let (same, log) = finetune(world.model.clone(), Guide::None, &world.data, &world.data, &cc).unwrap();
    assert!(log.is_empty());
    assert_eq!(param_hash(&same.hvae.params), param_hash(&world.model.hvae.params));
}

pub fn identity_intervention_returns_factual_parents() {
    let world = crate::common::tiny_world::<f32>(6);
    for o in &world.data {
        let v = o.attributes.get("center").unwrap();
        let r = world
            .model
            .counterfactual(&o.image, &o.attributes, &Intervention::single("center", v), AbductionMode::Mean)
            .unwrap();
        assert_eq!(r.parents_cf.get("center").unwrap().to_bits(), v.to_bits());
        for name in ["size", "left", "right"] {
            assert_eq!(r.parents_cf.get(name).unwrap(), o.attributes.get(name).unwrap());
        }
        assert!(r.warnings.is_empty());
    }
}

pub fn infeasible_targets_are_clamped_with_a_warning() {
    let world = crate::common::tiny_world::<f32>(7);
    let o = &world.data[0];
    let r = world
        .model
        .counterfactual(&o.image, &o.attributes, &Intervention::single("left", 1e6), AbductionMode::Mean)
        .unwrap();
    assert_eq!(r.warnings.len(), 1);
    let (_, hi) = world.graph.attribute("left").unwrap().feasible_range().unwrap();
    assert_eq!(r.parents_cf.get("left").unwrap(), hi);
    let bad = world
        .model
        .counterfactual(&o.image, &o.attributes, &Intervention::single("left", -3.0), AbductionMode::Mean);
    assert!(matches!(bad, Err(Error::InvalidIntervention(_))));
}

fn affine_chain() -> (CausalGraph, AffineScm) {
    let g = CausalGraph::new(vec![real("s", &[]), real("a", &["s"]), real("b", &["a", "s"])], &["a", "b"]);
    let scm = AffineScm::default()
        .with("s", 0.5, &[], 2.0)
        .with("a", 1.0, &[3.0], 0.5)
        .with("b", -2.0, &[0.25, -1.5], 1.5);
    (g, scm)
}

/// do(a := c) on s → a → b, with b = −2 + a/4 − 1.5 s + 1.5 u_b:
/// the counterfactual b moves by exactly (c − a)/4 and s is untouched.
pub fn linear_scm_counterfactual_matches_closed_form() {
    proptest!(cases(200), |(us in -3.0f64..3.0, ua in -3.0f64..3.0, ub in -3.0f64..3.0, c in -20.0f64..20.0)| {
        let (g, scm) = affine_chain();
        let s = 0.5 + 2.0 * us;
        let a = 1.0 + 3.0 * s + 0.5 * ua;
        let b = -2.0 + 0.25 * a - 1.5 * s + 1.5 * ub;
        let f = AttributeVector::from_pairs([("s", s), ("a", a), ("b", b)]);
        let u = abduct_noise(&g, &scm, &f).unwrap();
        prop_assert!((u["a"] - ua).abs() < 1e-9 && (u["b"] - ub).abs() < 1e-9);
        let cf = predict_parents(&g, &scm, &f, &u, &Intervention::single("a", c)).unwrap();
        prop_assert_eq!(cf.get("s").unwrap().to_bits(), s.to_bits());
        prop_assert_eq!(cf.get("a").unwrap(), c);
        prop_assert!((cf.get("b").unwrap() - (b + 0.25 * (c - a))).abs() < 1e-9);
    });
}

pub fn flow_set_round_trip() {
    proptest!(cases(200), |(seed in 0u64..40, size in -2.0f64..2.0, area in 1.0f64..500.0)| {
        let mut a = AttributeSpec::new("a", AttributeKind::ContinuousPositive, "px^2", &["s"]);
        a.normalization = Normalization { mean: 100.0, std: 30.0 };
        let g = CausalGraph::new(vec![real("s", &[]), a], &["a"]);
        let mut flows = FlowSet::<f64>::identity(&g, 6, seed).unwrap();
        // Move away from the identity so the conditioner actually matters.
        let m = flows.get_mut("a").unwrap();
        for (i, t) in m.params.tensors_mut().iter_mut().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.1 * (((seed as usize + 3 * i + 7 * j) % 11) as f64 - 5.0) / 5.0;
            }
        }
        let u = flows.inverse("a", area, &[size]).unwrap();
        let back = flows.forward("a", u, &[size]).unwrap();
        prop_assert!((back - area).abs() <= 1e-5 * area.max(1.0), "{area} -> {u} -> {back}");
    });
}

pub fn soft_area_is_brute_force_sum() {
    proptest!(cases(200), |(values in prop::collection::vec(0.0f32..=1.0, 64), pixel_area in 0.1f64..4.0)| {
        let m = SoftMask::new(vec!["s".into()], vec![Image::new(8, 8, values.clone())], pixel_area).unwrap();
        let mut acc = 0.0f64;
        for v in &values {
            acc += *v as f64;
        }
        prop_assert!((soft_area(&m, "s").unwrap() - pixel_area * acc).abs() < 1e-9);
        prop_assert!(thresholded_area(&m, "s").unwrap() <= pixel_area * 64.0);
    });
}

pub fn metrics_match_summation_loops() {
    proptest!(cases(200), |(pairs in prop::collection::vec((-100.0f64..100.0, 0.5f64..100.0), 1..40))| {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let mut abs = 0.0;
        let mut pct = 0.0;
        for i in 0..pred.len() {
            abs += (pred[i] - target[i]).abs();
            pct += (pred[i] - target[i]).abs() / target[i].abs();
        }
        let n = pred.len() as f64;
        prop_assert!((mae(&pred, &target).unwrap() - abs / n).abs() < 1e-9);
        prop_assert!((mape(&pred, &target).unwrap() - 100.0 * pct / n).abs() < 1e-9);
    });
}

pub fn locality_is_bounded_and_monotone() {
    proptest!(cases(200), |(change in prop::collection::vec(-1.0f32..1.0, 144), extra in 0.01f32..1.0, radius in 0usize..3)| {
        let target = block(12, 12, 4, 8, 4, 8);
        let x = Image::zeros(12, 12);
        let cf = Image::new(12, 12, change);
        let r = locality(&x, &cf, &target, radius);
        prop_assert!((0.0..=1.0).contains(&r));
        // More change at a corner far from the mask can only raise the ratio.
        let mut more = cf.clone();
        let v = more.get(0, 0);
        more.set(0, 0, v.abs() + extra);
        prop_assert!(locality(&x, &more, &target, radius) >= r - 1e-9);
    });
}

checks!(
    soft_area_of_all_ones_is_pixel_count,
    dice_edge_cases,
    metric_closed_forms,
    locality_reference_cases,
    topological_order_and_cycle_detection,
    frozen_guides_receive_no_gradient,
    finetuning_leaves_the_guide_untouched,
    identity_intervention_returns_factual_parents,
    infeasible_targets_are_clamped_with_a_warning,
    linear_scm_counterfactual_matches_closed_form,
    flow_set_round_trip,
    soft_area_is_brute_force_sum,
    metrics_match_summation_loops,
    locality_is_bounded_and_monotone,
);
