//! Staged experiment runner over an output root.
//!
//! Layout under `out/`:
//! `run.json`, `data/`, `flows.json`, `hvae.json`, `aux/{segmentor-finetune,
//! regressor-finetune,segmentor-eval}.json`, `cft/{none,reg,seg}.json` plus
//! `.log.jsonl`, and `eval/{table.csv,report.json,panels-*.png}`.
//!
//! Every checkpoint records the hashes of the artifacts it was built from;
//! later stages refuse inputs whose recorded provenance disagrees.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auxiliary::{
    train_regressor, train_segmentor, AuxRole, Regressor, RegressorConfig, Segmentor, SegmentorConfig,
};
use crate::cft::{finetune, log_to_jsonl, Guide, Regime};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, SeedStream};
use crate::dscm::{AbductionMode, Dscm};
use crate::error::{Error, Result};
use crate::eval::{effectiveness, EffectivenessReport};
use crate::flow::{fit_statistics, train_flows, FlowSet};
use crate::graph::{Intervention, Observation};
use crate::hvae::{train_hvae, Hvae};
use crate::report::{render_panels, render_report, PanelLayout, PanelRow};
use crate::synth::{generate_dataset, load_dataset, Dataset, Split};

pub const RUN_MANIFEST: &str = "run.json";
const LOCK: &str = ".lock";

/// Exclusive hold on an output root; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub overrides: Vec<String>,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn flows(&self) -> PathBuf {
        self.root.join("flows.json")
    }
    pub fn hvae(&self) -> PathBuf {
        self.root.join("hvae.json")
    }
    pub fn segmentor(&self, role: AuxRole) -> PathBuf {
        match role {
            AuxRole::Finetune => self.root.join("aux/segmentor-finetune.json"),
            AuxRole::Eval => self.root.join("aux/segmentor-eval.json"),
        }
    }
    pub fn regressor(&self) -> PathBuf {
        self.root.join("aux/regressor-finetune.json")
    }
    pub fn model(&self, regime: Regime) -> PathBuf {
        self.root.join(format!("cft/{}.json", regime.name()))
    }
    pub fn cft_log(&self, regime: Regime) -> PathBuf {
        self.root.join(format!("cft/{}.log.jsonl", regime.name()))
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn require(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn check_provenance(ck: &Checkpoint, key: &str, expected: &str, what: &Path) -> Result<()> {
    match ck.provenance.get(key) {
        Some(found) if found == expected => Ok(()),
        found => Err(Error::Provenance(format!(
            "{} was built from {key} {}, current {key} is {expected}",
            what.display(),
            found.map(String::as_str).unwrap_or("<unrecorded>")
        ))),
    }
}

/// A loaded regime model with its evaluation segmentor.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub regime: Regime,
    pub model: Dscm<f32>,
    pub evaluator: Segmentor<f32>,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub overrides: Vec<String>,
    pub config_hash: String,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, overrides: Vec<String>) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash();
        let layout = Layout {
            root: config.out.clone(),
        };
        Ok(Self {
            config,
            overrides,
            config_hash,
            layout,
        })
    }

    pub fn lock(&self) -> Result<RunLock> {
        RunLock::acquire(&self.layout.root)
    }

    fn write_manifest(&self) -> Result<()> {
        let m = RunManifest {
            config_hash: self.config_hash.clone(),
            overrides: self.overrides.clone(),
            config: self.config.clone(),
        };
        let path = self.layout.root.join(RUN_MANIFEST);
        ensure_parent(&path)?;
        std::fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))
    }

    fn stamp(&self, ck: Checkpoint) -> Result<Checkpoint> {
        ck.with_meta("config_hash", &self.config_hash)
    }

    fn save(&self, ck: &Checkpoint, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        self.write_manifest()?;
        ck.save(path)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.config.data.path.clone().unwrap_or_else(|| self.layout.data())
    }

    pub fn generate_data(&self) -> Result<Dataset> {
        if self.config.data.path.is_some() {
            return self.dataset();
        }
        let spec = self.config.data.scene_spec();
        self.write_manifest()?;
        generate_dataset(self.config.data.n, self.config.seed_for(SeedStream::Data), &spec, &self.layout.data())?;
        self.dataset()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.data_dir())
    }

    pub fn train_flows(&self) -> Result<FlowSet<f64>> {
        let ds = self.dataset()?;
        let graph = fit_statistics(&ds.manifest.graph, &ds.train)?;
        let (flows, report) = train_flows::<f64>(&ds.train, &ds.val, &graph, &self.config.flow_train())?;
        log::info!("flows: val nll {:.4} -> {:.4}", report.initial_val_nll, report.final_val_nll);
        let ck = self.stamp(flows.to_checkpoint(&graph)?)?.with_provenance("dataset", &ds.id());
        self.save(&ck, &self.layout.flows())?;
        Ok(flows)
    }

    fn load_flows(&self, ds: &Dataset) -> Result<(FlowSet<f64>, crate::graph::CausalGraph, String)> {
        let path = self.layout.flows();
        let ck = require(&path)?;
        check_provenance(&ck, "dataset", &ds.id(), &path)?;
        let hash = ck.param_hash()?;
        let (flows, graph) = FlowSet::from_checkpoint(&ck)?;
        Ok((flows, graph, hash))
    }

    pub fn train_hvae(&self) -> Result<Hvae<f32>> {
        let ds = self.dataset()?;
        let (_, graph, flows_hash) = self.load_flows(&ds)?;
        let hvae = Hvae::<f32>::new(
            self.config.hvae_model(graph.image_parents.len()),
            self.config.seed_for(SeedStream::Hvae),
        )?;
        let (hvae, opt, report) = train_hvae(hvae, &ds.train, &ds.val, &graph, &self.config.hvae_train())?;
        log::info!("hvae: {} steps, val nelbo {:?}", report.steps, report.val_nelbo.last());
        let ck = self
            .stamp(hvae.to_checkpoint(&graph.structure_hash())?)?
            .with_optimizer(&opt)
            .with_provenance("dataset", &ds.id())
            .with_provenance("flows", &flows_hash);
        self.save(&ck, &self.layout.hvae())?;
        Ok(hvae)
    }

    fn load_base(&self, ds: &Dataset) -> Result<(Dscm<f32>, String)> {
        let (flows, graph, flows_hash) = self.load_flows(ds)?;
        let path = self.layout.hvae();
        let ck = require(&path)?;
        check_provenance(&ck, "dataset", &ds.id(), &path)?;
        check_provenance(&ck, "flows", &flows_hash, &path)?;
        ck.check_graph(&graph.structure_hash())?;
        let hash = ck.param_hash()?;
        Ok((Dscm::new(graph, flows, Hvae::from_checkpoint(&ck)?)?, hash))
    }

    fn structures(&self, ds: &Dataset) -> Vec<String> {
        ds.manifest.spec.structure_names()
    }

    fn segmentor_config(&self, ds: &Dataset) -> SegmentorConfig {
        SegmentorConfig {
            structures: self.structures(ds),
            height: ds.manifest.spec.height,
            width: ds.manifest.spec.width,
            channels: self.config.aux.segmentor_channels,
            pixel_area: ds.manifest.spec.pixel_area,
        }
    }

    /// `Finetune` trains the guiding segmentor and regressor; `Eval` trains
    /// the independent evaluation segmentor.
    pub fn train_aux(&self, role: AuxRole) -> Result<()> {
        let ds = self.dataset()?;
        let (_, graph, _) = self.load_flows(&ds)?;
        let gh = graph.structure_hash();
        let stream = match role {
            AuxRole::Finetune => SeedStream::FinetuneSegmentor,
            AuxRole::Eval => SeedStream::EvalSegmentor,
        };
        let tc = self.config.aux_train(stream);
        let seg = Segmentor::<f32>::new(self.segmentor_config(&ds), role, tc.seed)?;
        let (seg, report) = train_segmentor(seg, &ds.train, &ds.val, &tc)?;
        log::info!("segmentor ({role:?}): val dice {:?}", report.val_dice);
        for w in &report.warnings {
            log::warn!("{w}");
        }
        let ck = self.stamp(seg.to_checkpoint(&gh)?)?.with_provenance("dataset", &ds.id());
        self.save(&ck, &self.layout.segmentor(role))?;
        if role == AuxRole::Finetune {
            let rc = RegressorConfig::from_graph(
                &graph,
                &self.structures(&ds),
                ds.manifest.spec.height,
                ds.manifest.spec.width,
                self.config.aux.regressor_channels,
            )?;
            let tc = self.config.aux_train(SeedStream::FinetuneRegressor);
            let reg = Regressor::<f32>::new(rc, role, tc.seed)?;
            let (reg, report) = train_regressor(reg, &ds.train, &ds.val, &tc)?;
            log::info!("regressor: val mape {:?}", report.val_mape);
            let ck = self.stamp(reg.to_checkpoint(&gh)?)?.with_provenance("dataset", &ds.id());
            self.save(&ck, &self.layout.regressor())?;
        }
        Ok(())
    }

    fn load_segmentor(&self, ds: &Dataset, role: AuxRole) -> Result<Segmentor<f32>> {
        let path = self.layout.segmentor(role);
        let ck = require(&path)?;
        check_provenance(&ck, "dataset", &ds.id(), &path)?;
        Segmentor::from_checkpoint(&ck)
    }

    fn load_regressor(&self, ds: &Dataset) -> Result<Regressor<f32>> {
        let path = self.layout.regressor();
        let ck = require(&path)?;
        check_provenance(&ck, "dataset", &ds.id(), &path)?;
        Regressor::from_checkpoint(&ck)
    }

    /// Fine-tunes the base HVAE under `regime`. For `none` the output
    /// parameters are the input parameters.
    pub fn finetune(&self, regime: Regime) -> Result<Dscm<f32>> {
        let ds = self.dataset()?;
        let (base, base_hash) = self.load_base(&ds)?;
        let cc = self.config.cft(regime, self.structures(&ds));
        let gh = base.graph.structure_hash();
        let (model, log, guide_id) = match regime {
            Regime::None => (base, Vec::new(), None),
            Regime::Reg => {
                let reg = self.load_regressor(&ds)?;
                let (m, l) = finetune(base, Guide::Reg(&reg), &ds.train, &ds.val, &cc)?;
                (m, l, Some(reg.id()))
            }
            Regime::Seg => {
                let seg = self.load_segmentor(&ds, AuxRole::Finetune)?;
                let (m, l) = finetune(base, Guide::Seg(&seg), &ds.train, &ds.val, &cc)?;
                (m, l, Some(seg.id()))
            }
        };
        let mut ck = self
            .stamp(model.hvae.to_checkpoint(&gh)?)?
            .with_meta("regime", &regime)?
            .with_provenance("dataset", &ds.id())
            .with_provenance("hvae", &base_hash);
        if let Some(id) = &guide_id {
            ck = ck.with_provenance("guide", id);
        }
        let path = self.layout.model(regime);
        self.save(&ck, &path)?;
        let log_path = self.layout.cft_log(regime);
        std::fs::write(&log_path, log_to_jsonl(&log)).map_err(|e| Error::io(&log_path, e))?;
        Ok(model)
    }

    /// Loads a fine-tuned model and the evaluation segmentor, checking that
    /// both were built from the current dataset and base model.
    pub fn load_model(&self, ds: &Dataset, regime: Regime) -> Result<(LoadedModel, Option<String>)> {
        let (base, base_hash) = self.load_base(ds)?;
        let path = self.layout.model(regime);
        let ck = require(&path)?;
        check_provenance(&ck, "dataset", &ds.id(), &path)?;
        check_provenance(&ck, "hvae", &base_hash, &path)?;
        let model = Dscm::new(base.graph, base.flows, Hvae::from_checkpoint(&ck)?)?;
        let evaluator = self.load_segmentor(ds, AuxRole::Eval)?;
        Ok((
            LoadedModel {
                regime,
                model,
                evaluator,
            },
            ck.provenance.get("guide").cloned(),
        ))
    }

    pub fn evaluate(&self, regimes: &[Regime]) -> Result<EffectivenessReport> {
        let ds = self.dataset()?;
        let structures = self.structures(&ds);
        let protocol = self.config.protocol(structures.clone());
        let test = ds.split(Split::Test);
        let n = match self.config.eval.n_test {
            0 => test.len(),
            k => k.min(test.len()),
        };
        let test = &test[..n];
        // Every fine-tuning auxiliary that exists counts against independence.
        let mut finetune_ids = Vec::new();
        if self.layout.segmentor(AuxRole::Finetune).exists() {
            finetune_ids.push(self.load_segmentor(&ds, AuxRole::Finetune)?.id());
        }
        if self.layout.regressor().exists() {
            finetune_ids.push(self.load_regressor(&ds)?.id());
        }
        let mut rows = Vec::new();
        let mut evaluator_id = String::new();
        let mut panels = Vec::new();
        for &regime in regimes {
            let (loaded, guide) = self.load_model(&ds, regime)?;
            finetune_ids.extend(guide);
            evaluator_id = loaded.evaluator.id();
            rows.extend(effectiveness(
                regime.name(),
                &loaded.model,
                &loaded.evaluator,
                &finetune_ids,
                test,
                &protocol,
            )?);
            panels.push((regime, self.example_panels(&loaded, test)?));
        }
        let report = EffectivenessReport {
            metric: protocol.metric,
            columns: structures,
            rows,
            evaluator_id: evaluator_id.chars().take(16).collect(),
            dataset_id: ds.id().chars().take(16).collect(),
            seed: self.config.seed,
        };
        let dir = self.layout.eval();
        render_report(&dir, &report, &[])?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
        for (regime, rows) in panels {
            if !rows.is_empty() {
                render_panels(&rows, PanelLayout::default()).save(&dir.join(format!("panels-{}.png", regime.name())))?;
            }
        }
        Ok(report)
    }

    fn example_panels(&self, loaded: &LoadedModel, test: &[Observation]) -> Result<Vec<PanelRow>> {
        let structures = &loaded.evaluator.config.structures;
        let shift = self.config.eval.relative_shifts.last().copied().unwrap_or(1.0);
        test.iter()
            .take(self.config.eval.panels)
            .enumerate()
            .map(|(i, o)| {
                let v = &structures[i % structures.len()];
                let iv = Intervention::single(v, o.attributes.get(v)? * shift);
                panel_row(loaded, o, &iv, AbductionMode::Mean)
            })
            .collect()
    }

    /// Counterfactual for one sample; writes `panel.png` into `out`.
    pub fn counterfactual(&self, regime: Regime, sample: &str, intervention: &Intervention, out: &Path) -> Result<PanelRow> {
        let ds = self.dataset()?;
        let o = ds
            .find(sample)
            .ok_or_else(|| Error::Config(format!("unknown sample `{sample}`")))?;
        let (loaded, _) = self.load_model(&ds, regime)?;
        let row = panel_row(&loaded, o, intervention, AbductionMode::Mean)?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        render_panels(std::slice::from_ref(&row), PanelLayout::default()).save(&out.join("panel.png"))?;
        Ok(row)
    }

    pub fn run_all(&self) -> Result<EffectivenessReport> {
        let _lock = self.lock()?;
        self.generate_data()?;
        self.train_flows()?;
        self.train_hvae()?;
        self.train_aux(AuxRole::Finetune)?;
        self.train_aux(AuxRole::Eval)?;
        let regimes = [Regime::None, Regime::Reg, Regime::Seg];
        for r in regimes {
            self.finetune(r)?;
        }
        self.evaluate(&regimes)
    }
}

/// Factual and counterfactual images with evaluation-segmentor contours and areas.
pub fn panel_row(loaded: &LoadedModel, o: &Observation, iv: &Intervention, mode: AbductionMode) -> Result<PanelRow> {
    let cf = loaded.model.counterfactual(&o.image, &o.attributes, iv, mode)?;
    let fm = loaded.evaluator.predict_masks(&o.image)?;
    let cm = loaded.evaluator.predict_masks(&cf.image_cf)?;
    let areas = |m: &crate::image::SoftMask| -> Result<Vec<f64>> {
        m.structures.iter().map(|s| crate::auxiliary::soft_area(m, s)).collect()
    };
    Ok(PanelRow {
        factual: o.image.clone(),
        counterfactual: cf.image_cf,
        factual_areas: areas(&fm)?,
        counterfactual_areas: areas(&cm)?,
        factual_masks: Some(fm),
        counterfactual_masks: Some(cm),
        intervened: iv.assignments.keys().next().cloned(),
    })
}
