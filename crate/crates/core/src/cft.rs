//! Counterfactual fine-tuning of the HVAE under a frozen auxiliary guide.
//!
//! Each step samples one intervention per batch element, builds the
//! counterfactual image through the same abduct → intervene → decode path as
//! inference, reads the structure attributes back with the guide and
//! penalises the squared error against the counterfactual parents on the
//! standardised scale. An ELBO term on the factual batch anchors realism.

use std::collections::BTreeMap;

use dscm_autograd::{Adam, Binding, Bound, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{Regressor, Segmentor};
use crate::dscm::Dscm;
use crate::error::{Error, Result};
use crate::graph::{AttributeVector, Intervention, Observation};
use crate::hvae::{image_batch, parent_batch};
use crate::scm::{abduct_noise, predict_parents};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    None,
    Reg,
    Seg,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::Reg => "reg",
            Regime::Seg => "seg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Regime::None),
            "reg" => Ok(Regime::Reg),
            "seg" => Ok(Regime::Seg),
            other => Err(Error::Config(format!("unknown regime `{other}` (expected none, reg or seg)"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Frozen auxiliary that reads attributes from counterfactual images.
#[derive(Clone, Copy, Debug)]
pub enum Guide<'a, T: Scalar> {
    None,
    Reg(&'a Regressor<T>),
    Seg(&'a Segmentor<T>),
}

impl<T: Scalar> Guide<'_, T> {
    pub fn regime(&self) -> Regime {
        match self {
            Guide::None => Regime::None,
            Guide::Reg(_) => Regime::Reg,
            Guide::Seg(_) => Regime::Seg,
        }
    }

    pub fn structures(&self) -> &[String] {
        match self {
            Guide::None => &[],
            Guide::Reg(r) => &r.config.structures,
            Guide::Seg(s) => &s.config.structures,
        }
    }

    pub fn id(&self) -> Option<String> {
        match self {
            Guide::None => None,
            Guide::Reg(r) => Some(r.id()),
            Guide::Seg(s) => Some(s.id()),
        }
    }
}

/// Picks one eligible variable uniformly and a target from its training marginal.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionPolicy {
    pub variables: Vec<String>,
    pub marginals: BTreeMap<String, Vec<f64>>,
}

impl InterventionPolicy {
    pub fn from_data(variables: &[String], train: &[Observation]) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::Config("intervention policy has no eligible variables".into()));
        }
        let mut marginals = BTreeMap::new();
        for v in variables {
            let values = train.iter().map(|o| o.attributes.get(v)).collect::<Result<Vec<_>>>()?;
            if values.is_empty() {
                return Err(Error::Config("intervention policy needs training records".into()));
            }
            marginals.insert(v.clone(), values);
        }
        Ok(Self {
            variables: variables.to_vec(),
            marginals,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Intervention {
        let v = &self.variables[rng.gen_range(0..self.variables.len())];
        let values = &self.marginals[v];
        Intervention::single(v, values[rng.gen_range(0..values.len())])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CftConfig {
    pub regime: Regime,
    /// Structure variables eligible for intervention.
    pub variables: Vec<String>,
    /// Weight of the per-pixel negative ELBO anchor.
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Log a held-out snapshot every this many steps (0 disables).
    pub snapshot_every: usize,
}

impl CftConfig {
    pub fn new(regime: Regime, variables: Vec<String>) -> Self {
        Self {
            regime,
            variables,
            lambda: 1.0,
            steps: 400,
            batch_size: 16,
            lr: 5e-4,
            seed: 0,
            snapshot_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("cft: lambda must be non-negative".into()));
        }
        if self.regime != Regime::None && self.variables.is_empty() {
            return Err(Error::Config("cft: no eligible variables".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub attribute: f64,
    pub anchor: f64,
    pub total: f64,
}

/// One line of the fine-tuning log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CftLogRecord {
    pub step: usize,
    pub regime: Regime,
    pub attribute_loss: f64,
    pub anchor: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_attribute_loss: Option<f64>,
}

pub fn log_to_jsonl(records: &[CftLogRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("log record serialises") + "\n")
        .collect()
}

struct Prepared<T: Scalar> {
    x: Tensor<T>,
    pa: Tensor<T>,
    pa_cf: Tensor<T>,
    /// Standardised counterfactual values of the guide's structures, `[N, S]`.
    target: Tensor<T>,
    means: Tensor<T>,
    inv_stds: Tensor<T>,
}

fn prepare<T: Scalar>(
    model: &Dscm<T>,
    structures: &[String],
    batch: &[&Observation],
    ivs: &[Intervention],
) -> Result<Prepared<T>> {
    let graph = &model.graph;
    let mut cf: Vec<AttributeVector> = Vec::with_capacity(batch.len());
    for (o, iv) in batch.iter().zip(ivs) {
        let noise = abduct_noise(graph, &model.flows, &o.attributes)?;
        cf.push(predict_parents(graph, &model.flows, &o.attributes, &noise, iv)?);
    }
    let norms = structures
        .iter()
        .map(|s| graph.attribute(s).map(|a| a.normalization))
        .collect::<Result<Vec<_>>>()?;
    let (n, s) = (batch.len(), structures.len());
    let mut target = Vec::with_capacity(n * s);
    let mut means = Vec::with_capacity(n * s);
    let mut inv = Vec::with_capacity(n * s);
    for p in &cf {
        for (name, norm) in structures.iter().zip(&norms) {
            target.push(T::lit(norm.standardize(p.get(name)?)));
            means.push(T::lit(norm.mean));
            inv.push(T::lit(1.0 / norm.std));
        }
    }
    let attrs: Vec<&AttributeVector> = batch.iter().map(|o| &o.attributes).collect();
    let cf_refs: Vec<&AttributeVector> = cf.iter().collect();
    Ok(Prepared {
        x: image_batch(batch),
        pa: parent_batch(graph, &attrs)?,
        pa_cf: parent_batch(graph, &cf_refs)?,
        target: Tensor::from_vec(&[n, s], target),
        means: Tensor::from_vec(&[n, s], means),
        inv_stds: Tensor::from_vec(&[n, s], inv),
    })
}

/// Standardised guide readout of `image`, `[N, S]`.
fn readout<'t, T: Scalar>(guide: Guide<'_, T>, aux: &Bound<'t, T>, image: Var<'t, T>, prep: &Prepared<T>) -> Result<Var<'t, T>> {
    let tape = image.tape();
    match guide {
        Guide::None => Err(Error::Config("no guide for regime none".into())),
        Guide::Reg(r) => Ok(r.predict_on(aux, image)),
        Guide::Seg(s) => {
            let areas = s.soft_areas_on(aux, image);
            Ok((areas - tape.constant(prep.means.clone())) * tape.constant(prep.inv_stds.clone()))
        }
    }
}

/// Loss, HVAE gradients and (for auditing) auxiliary gradients of one step.
pub struct StepGradients<T: Scalar> {
    pub breakdown: LossBreakdown,
    pub hvae: Vec<Tensor<T>>,
    pub auxiliary: Vec<Tensor<T>>,
}

/// Builds the step loss on a fresh tape. The auxiliary is bound frozen, so
/// its gradients come back as zeros by construction.
pub fn step_gradients<T: Scalar>(
    model: &Dscm<T>,
    guide: Guide<'_, T>,
    batch: &[&Observation],
    ivs: &[Intervention],
    lambda: f64,
    eps: &[Tensor<T>],
) -> Result<StepGradients<T>> {
    let aux_params = match guide {
        Guide::None => return Err(Error::Config("no guide for regime none".into())),
        Guide::Reg(r) => &r.params,
        Guide::Seg(s) => &s.params,
    };
    let prep = prepare(model, guide.structures(), batch, ivs)?;
    let tape = Tape::new();
    let p = model.hvae.params.bind(&tape, Binding::Trainable);
    let aux = aux_params.bind(&tape, Binding::Frozen);
    let x = tape.constant(prep.x.clone());
    let pa = tape.constant(prep.pa.clone());
    let pa_cf = tape.constant(prep.pa_cf.clone());

    let post = model.hvae.encode_on(&p, x, pa);
    let z: Vec<_> = post.iter().map(|(loc, _)| *loc).collect();
    let x_cf = model.hvae.decode_on(&p, &z, pa_cf);
    let predicted = readout(guide, &aux, x_cf, &prep)?;
    let n = batch.len() as f64;
    let attribute = (predicted - tape.constant(prep.target.clone()))
        .square()
        .sum()
        .scale(T::lit(1.0 / n));

    let mut total = attribute;
    let mut anchor_value = 0.0;
    if lambda > 0.0 {
        let e = model.hvae.elbo_on(&p, x, pa, eps);
        let anchor = e.total.scale(T::lit(1.0 / model.hvae.pixels() as f64));
        anchor_value = anchor.item().to_f64_lossy();
        total = total + anchor.scale(T::lit(lambda));
    }
    let attribute_value = attribute.item().to_f64_lossy();
    let total_value = total.item().to_f64_lossy();
    if !total_value.is_finite() {
        return Err(Error::NonFinite {
            stage: format!("{} fine-tuning", guide.regime()),
            detail: format!("attribute {attribute_value}, anchor {anchor_value}"),
        });
    }
    let grads = tape.backward(total);
    let auxiliary = aux.vars().iter().map(|v| grads.get_or_zeros(*v)).collect();
    Ok(StepGradients {
        breakdown: LossBreakdown {
            attribute: attribute_value,
            anchor: anchor_value,
            total: total_value,
        },
        hvae: p.grads(&grads),
        auxiliary,
    })
}

/// Attribute loss on `batch` without updating anything.
pub fn attribute_loss<T: Scalar>(
    model: &Dscm<T>,
    guide: Guide<'_, T>,
    batch: &[&Observation],
    ivs: &[Intervention],
) -> Result<f64> {
    let aux_params = match guide {
        Guide::None => return Err(Error::Config("no guide for regime none".into())),
        Guide::Reg(r) => &r.params,
        Guide::Seg(s) => &s.params,
    };
    let prep = prepare(model, guide.structures(), batch, ivs)?;
    let tape = Tape::new();
    let p = model.hvae.params.bind(&tape, Binding::Frozen);
    let aux = aux_params.bind(&tape, Binding::Frozen);
    let post = model
        .hvae
        .encode_on(&p, tape.constant(prep.x.clone()), tape.constant(prep.pa.clone()));
    let z: Vec<_> = post.iter().map(|(loc, _)| *loc).collect();
    let x_cf = model.hvae.decode_on(&p, &z, tape.constant(prep.pa_cf.clone()));
    let predicted = readout(guide, &aux, x_cf, &prep)?;
    let loss = (predicted - tape.constant(prep.target.clone())).square().sum();
    Ok(loss.item().to_f64_lossy() / batch.len() as f64)
}

/// Runs the fine-tuning loop. `Regime::None` returns the model untouched.
pub fn finetune<T: Scalar>(
    model: Dscm<T>,
    guide: Guide<'_, T>,
    train: &[Observation],
    held_out: &[Observation],
    config: &CftConfig,
) -> Result<(Dscm<T>, Vec<CftLogRecord>)> {
    config.validate()?;
    if guide.regime() != config.regime {
        return Err(Error::Config(format!(
            "cft regime {} needs a matching auxiliary, got {}",
            config.regime,
            guide.regime()
        )));
    }
    if config.regime == Regime::None {
        return Ok((model, Vec::new()));
    }
    let mut model = model;
    let policy = InterventionPolicy::from_data(&config.variables, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(&model.hvae.params, config.lr).with_clip(100.0);

    // Fixed held-out probe for snapshots.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xface);
    let probe: Vec<&Observation> = held_out.iter().take(32).collect();
    let probe_ivs: Vec<Intervention> = probe.iter().map(|_| policy.sample(&mut probe_rng)).collect();

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let ivs: Vec<Intervention> = batch.iter().map(|_| policy.sample(&mut rng)).collect();
        let eps = model.hvae.draw_eps(batch.len(), &mut rng);
        let g = step_gradients(&model, guide, &batch, &ivs, config.lambda, &eps)?;
        opt.step(&mut model.hvae.params, &g.hvae);
        let snapshot = if config.snapshot_every > 0 && !probe.is_empty() && (step + 1) % config.snapshot_every == 0 {
            Some(attribute_loss(&model, guide, &probe, &probe_ivs)?)
        } else {
            None
        };
        log.push(CftLogRecord {
            step,
            regime: config.regime,
            attribute_loss: g.breakdown.attribute,
            anchor: g.breakdown.anchor,
            total: g.breakdown.total,
            snapshot_attribute_loss: snapshot,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_names_round_trip() {
        for r in [Regime::None, Regime::Reg, Regime::Seg] {
            assert_eq!(Regime::parse(r.name()).unwrap(), r);
        }
        assert!(Regime::parse("both").is_err());
    }

    #[test]
    fn policy_with_one_variable_always_picks_it() {
        let obs = vec![Observation {
            id: "0".into(),
            image: crate::image::Image::zeros(4, 4),
            attributes: AttributeVector::from_pairs([("a", 3.0), ("b", 4.0)]),
            masks: None,
        }];
        let p = InterventionPolicy::from_data(&["b".to_string()], &obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let iv = p.sample(&mut rng);
            assert_eq!(iv.assignments.keys().collect::<Vec<_>>(), vec!["b"]);
            assert_eq!(iv.assignments["b"], 4.0);
        }
        assert!(InterventionPolicy::from_data(&[], &obs).is_err());
    }
}
