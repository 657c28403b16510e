//! Desk-scale end-to-end run printing the effectiveness table.
//! Knobs via environment: SIZE, N, EPOCHS, C0–C2, SEG_EPOCHS, REG_EPOCHS, REG_C,
//! CFT_STEPS, LAMBDA, CFT_LR, NTEST, and the scene parameters BCORR, SCOEF,
//! SNOISE, TEX.

use std::time::Instant;

use dscm_core::auxiliary::*;
use dscm_core::cft::*;
use dscm_core::dscm::Dscm;
use dscm_core::eval::*;
use dscm_core::flow::*;
use dscm_core::hvae::*;
use dscm_core::synth::*;

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> dscm_core::Result<()> {
    let size: usize = env("SIZE", 32);
    let n: usize = env("N", 2000);
    let t0 = Instant::now();
    let mut spec = SceneSpec::three_structures(size, size);
    spec.brightness_corr = env("BCORR", spec.brightness_corr);
    spec.background_texture = env("TEX", spec.background_texture);
    for st in spec.structures.iter_mut() {
        st.size_coef = env("SCOEF", st.size_coef);
        st.noise_std = env("SNOISE", st.noise_std);
        st.texture = env("TEX", st.texture);
    }
    let data = generate_in_memory(n, 0, &spec)?;
    let (ntr, nva, _) = split_sizes(n);
    let (train, rest) = data.split_at(ntr);
    let (val, test) = rest.split_at(nva);
    println!("data {:?}", t0.elapsed());
    let graph = fit_statistics(&spec.graph(), train)?;
    let (flows, fr) = train_flows::<f64>(train, val, &graph, &FlowTrainConfig::default())?;
    println!("flows {:?} {:?}", fr, t0.elapsed());
    let mut hc = HvaeConfig::new(size, size, graph.image_parents.len());
    hc.channels = vec![env("C0", 8), env("C1", 16), env("C2", 16)];
    let hvae = Hvae::<f32>::new(hc, 0)?;
    let tc = HvaeTrainConfig { epochs: env("EPOCHS", 10), ..Default::default() };
    let (hvae, _, hr) = train_hvae(hvae, train, val, &graph, &tc)?;
    println!("hvae {:?} {:?}", hr, t0.elapsed());
    let model = Dscm::new(graph.clone(), flows, hvae)?;
    let mut mae = 0.0;
    for o in test.iter().take(50) {
        mae += model.reconstruct(&o.image, &o.attributes)?.mean_abs_diff(&o.image);
    }
    println!("recon mae {}", mae / 50.0);
    let structures = spec.structure_names();
    let ac = AuxTrainConfig { epochs: env("SEG_EPOCHS", 6), ..Default::default() };
    let segc = SegmentorConfig { structures: structures.clone(), height: size, width: size, channels: 8, pixel_area: 1.0 };
    let (seg_ft, r1) = train_segmentor(Segmentor::<f32>::new(segc.clone(), AuxRole::Finetune, 1)?, train, val, &AuxTrainConfig { seed: 1, ..ac.clone() })?;
    let (seg_ev, r2) = train_segmentor(Segmentor::<f32>::new(segc, AuxRole::Eval, 2)?, train, val, &AuxTrainConfig { seed: 2, ..ac.clone() })?;
    println!("seg {:?} {:?} {:?}", r1, r2, t0.elapsed());
    let rc = RegressorConfig::from_graph(&graph, &structures, size, size, env("REG_C", 16))?;
    let (reg, rr) = train_regressor(Regressor::<f32>::new(rc, AuxRole::Finetune, 3)?, train, val, &AuxTrainConfig { seed: 3, epochs: env("REG_EPOCHS", 15), ..ac.clone() })?;
    println!("reg {:?} {:?}", rr, t0.elapsed());
    let mut cc = CftConfig::new(Regime::Reg, structures.clone());
    cc.steps = env("CFT_STEPS", 400);
    cc.lambda = env("LAMBDA", 1.0);
    cc.lr = env("CFT_LR", 5e-4);
    let (m_reg, log_reg) = finetune(model.clone(), Guide::Reg(&reg), train, val, &cc)?;
    println!("reg cft {:?} last {:?}", t0.elapsed(), log_reg.last());
    cc.regime = Regime::Seg;
    let (m_seg, log_seg) = finetune(model.clone(), Guide::Seg(&seg_ft), train, val, &cc)?;
    println!("seg cft {:?} last {:?}", t0.elapsed(), log_seg.last());
    for r in log_seg.iter().chain(&log_reg).filter(|r| r.snapshot_attribute_loss.is_some()) {
        println!("  {:?} {} {:?} anchor {:.3}", r.regime, r.step, r.snapshot_attribute_loss, r.anchor);
    }
    let proto = EvalProtocol::new(structures.clone());
    let ids = vec![seg_ft.id(), reg.id()];
    let evalset = &test[..env("NTEST", 100).min(test.len())];
    let mut rows = Vec::new();
    for (name, m) in [("none", &model), ("reg", &m_reg), ("seg", &m_seg)] {
        rows.extend(effectiveness(name, m, &seg_ev, &ids, evalset, &proto)?);
    }
    let report = EffectivenessReport { metric: Metric::Mape, columns: structures, rows, evaluator_id: seg_ev.id()[..8].into(), dataset_id: "mem".into(), seed: 0 };
    println!("{}", report.to_table());
    println!("total {:?}", t0.elapsed());
    Ok(())
}
