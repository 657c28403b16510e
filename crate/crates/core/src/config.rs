//! Declarative experiment configuration: one TOML file per experiment,
//! leaf overrides from the command line, and a stable content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auxiliary::{AreaReadout, AuxTrainConfig};
use crate::cft::{CftConfig, Regime};
use crate::error::{Error, Result};
use crate::eval::{EvalProtocol, Metric, UnintervenedReference};
use crate::flow::FlowTrainConfig;
use crate::hvae::{HvaeConfig, HvaeTrainConfig};
use crate::synth::SceneSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    #[default]
    ThreeStructures,
    Vessel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneKind,
    pub size: usize,
    pub n: usize,
    /// Use an existing dataset directory instead of generating one.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneKind::ThreeStructures,
            size: 32,
            n: 2000,
            path: None,
        }
    }
}

impl DataConfig {
    pub fn scene_spec(&self) -> SceneSpec {
        match self.scene {
            SceneKind::ThreeStructures => SceneSpec::three_structures(self.size, self.size),
            SceneKind::Vessel => SceneSpec::vessel(self.size, self.size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowsSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden_width: usize,
}

impl Default for FlowsSection {
    fn default() -> Self {
        let d = FlowTrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            hidden_width: d.hidden_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HvaeSection {
    pub channels: Vec<usize>,
    pub latent_channels: usize,
    pub sigma_x: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kl_warmup_steps: usize,
    pub clip_norm: f64,
}

impl Default for HvaeSection {
    fn default() -> Self {
        let m = HvaeConfig::new(32, 32, 1);
        let t = HvaeTrainConfig::default();
        Self {
            channels: m.channels,
            latent_channels: m.latent_channels,
            sigma_x: m.sigma_x,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            kl_warmup_steps: t.kl_warmup_steps,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxSection {
    pub segmentor_channels: usize,
    pub regressor_channels: usize,
    pub segmentor_epochs: usize,
    pub regressor_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AuxSection {
    fn default() -> Self {
        let t = AuxTrainConfig::default();
        Self {
            segmentor_channels: 8,
            regressor_channels: 16,
            segmentor_epochs: 6,
            regressor_epochs: 15,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CftSection {
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub snapshot_every: usize,
}

impl Default for CftSection {
    fn default() -> Self {
        let d = CftConfig::new(Regime::Seg, Vec::new());
        Self {
            lambda: d.lambda,
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.lr,
            snapshot_every: d.snapshot_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub relative_shifts: Vec<f64>,
    pub reference: UnintervenedReference,
    pub readout: AreaReadout,
    pub metric: Metric,
    pub dilation_radius: usize,
    pub batch_size: usize,
    /// Evaluate on the first `n_test` test records (0 = all).
    pub n_test: usize,
    /// Example rows in each regime's panel image.
    pub panels: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = EvalProtocol::new(Vec::new());
        Self {
            relative_shifts: p.relative_shifts,
            reference: p.reference,
            readout: p.readout,
            metric: p.metric,
            dilation_radius: p.dilation_radius,
            batch_size: p.batch_size,
            n_test: 0,
            panels: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Output root. Not part of the config hash.
    pub out: PathBuf,
    pub data: DataConfig,
    pub flows: FlowsSection,
    pub hvae: HvaeSection,
    pub aux: AuxSection,
    pub cft: CftSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            flows: FlowsSection::default(),
            hvae: HvaeSection::default(),
            aux: AuxSection::default(),
            cft: CftSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Stage seeds are derived from the experiment seed so that the evaluation
/// segmentor can never share initialisation with the fine-tuning one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeedStream {
    Data,
    Flows,
    Hvae,
    FinetuneSegmentor,
    FinetuneRegressor,
    EvalSegmentor,
    Cft,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.data.size < 8 || !self.data.size.is_multiple_of(8) {
            return bad("data.size must be a positive multiple of 8");
        }
        if self.data.path.is_none() && self.data.n < 10 {
            return bad("data.n must be at least 10");
        }
        if self.hvae.channels.len() != 3 || self.hvae.channels.contains(&0) {
            return bad("hvae.channels needs three positive entries");
        }
        if self.hvae.sigma_x <= 0.0 {
            return bad("hvae.sigma_x must be positive");
        }
        if self.eval.relative_shifts.is_empty() || self.eval.relative_shifts.iter().any(|s| *s <= 0.0) {
            return bad("eval.relative_shifts must be non-empty and positive");
        }
        for (name, v) in [
            ("flows.batch_size", self.flows.batch_size),
            ("hvae.batch_size", self.hvae.batch_size),
            ("aux.batch_size", self.aux.batch_size),
            ("cft.batch_size", self.cft.batch_size),
            ("eval.batch_size", self.eval.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything except the output root.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn seed_for(&self, stream: SeedStream) -> u64 {
        let offset = match stream {
            SeedStream::Data => 0,
            SeedStream::Flows => 1,
            SeedStream::Hvae => 2,
            SeedStream::FinetuneSegmentor => 3,
            SeedStream::FinetuneRegressor => 4,
            SeedStream::EvalSegmentor => 5,
            SeedStream::Cft => 6,
        };
        self.seed.wrapping_mul(1000).wrapping_add(offset)
    }

    pub fn flow_train(&self) -> FlowTrainConfig {
        FlowTrainConfig {
            epochs: self.flows.epochs,
            batch_size: self.flows.batch_size,
            lr: self.flows.lr,
            hidden_width: self.flows.hidden_width,
            seed: self.seed_for(SeedStream::Flows),
        }
    }

    pub fn hvae_model(&self, parent_dim: usize) -> HvaeConfig {
        let mut c = HvaeConfig::new(self.data.size, self.data.size, parent_dim);
        c.channels = self.hvae.channels.clone();
        c.latent_channels = self.hvae.latent_channels;
        c.sigma_x = self.hvae.sigma_x;
        c
    }

    pub fn hvae_train(&self) -> HvaeTrainConfig {
        HvaeTrainConfig {
            epochs: self.hvae.epochs,
            batch_size: self.hvae.batch_size,
            lr: self.hvae.lr,
            kl_warmup_steps: self.hvae.kl_warmup_steps,
            clip_norm: self.hvae.clip_norm,
            seed: self.seed_for(SeedStream::Hvae),
        }
    }

    pub fn aux_train(&self, stream: SeedStream) -> AuxTrainConfig {
        let epochs = match stream {
            SeedStream::FinetuneRegressor => self.aux.regressor_epochs,
            _ => self.aux.segmentor_epochs,
        };
        AuxTrainConfig {
            epochs,
            batch_size: self.aux.batch_size,
            lr: self.aux.lr,
            seed: self.seed_for(stream),
        }
    }

    pub fn cft(&self, regime: Regime, variables: Vec<String>) -> CftConfig {
        let mut c = CftConfig::new(regime, variables);
        c.lambda = self.cft.lambda;
        c.steps = self.cft.steps;
        c.batch_size = self.cft.batch_size;
        c.lr = self.cft.lr;
        c.snapshot_every = self.cft.snapshot_every;
        c.seed = self.seed_for(SeedStream::Cft);
        c
    }

    pub fn protocol(&self, variables: Vec<String>) -> EvalProtocol {
        EvalProtocol {
            variables,
            relative_shifts: self.eval.relative_shifts.clone(),
            reference: self.eval.reference,
            readout: self.eval.readout,
            metric: self.eval.metric,
            dilation_radius: self.eval.dilation_radius,
            batch_size: self.eval.batch_size,
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as TOML and falls back to a
/// bare string, so `data.scene=vessel` works without quotes.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = table;
    for part in &path[..path.len() - 1] {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-table")))?;
    }
    node.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_reach_leaves() {
        let c = ExperimentConfig::from_toml(
            "[hvae]\nepochs = 3\n",
            &["hvae.epochs=5".into(), "data.scene=vessel".into(), "eval.relative_shifts=[0.5, 1.5]".into()],
        )
        .unwrap();
        assert_eq!(c.hvae.epochs, 5);
        assert_eq!(c.data.scene, SceneKind::Vessel);
        assert_eq!(c.eval.relative_shifts, vec![0.5, 1.5]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[hvae]\nepoch = 3\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml("", &["noequals".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_root() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let c = ExperimentConfig::default();
        let eval = c.seed_for(SeedStream::EvalSegmentor);
        assert_ne!(eval, c.seed_for(SeedStream::FinetuneSegmentor));
        assert_ne!(eval, c.seed_for(SeedStream::FinetuneRegressor));
    }
}
