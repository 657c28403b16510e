//! Conditional normalizing flows for scalar attributes.
//!
//! Each mechanism pushes standard-normal noise through one parent-conditioned
//! affine step, denormalises with the attribute's training statistics and,
//! for positive attributes, applies a softplus range map:
//!
//! ```text
//! u ──affine(shift(pa), log_scale(pa))──▶ y ──mean + std·y──▶ w ──softplus──▶ a
//! ```
//!
//! The conditioner is a one-hidden-layer MLP of the standardised parents, or
//! a pair of learned constants for parentless attributes. Its output layer
//! starts at zero so an untrained flow is the identity up to the fixed maps.

use dscm_autograd::nn::Linear;
use dscm_autograd::{Adam, Binding, Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auxiliary::install;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{AttributeKind, AttributeSpec, CausalGraph, Normalization, Observation};
use crate::scm::Mechanisms;

pub const LOG_SCALE_BOUND: f64 = 7.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug)]
enum Conditioner {
    /// `[2, 1]` column holding (shift, log_scale).
    Constant(ParamId),
    Mlp { hidden: Linear, out: Linear },
}

#[derive(Clone, Debug)]
pub struct FlowMechanism<T: Scalar> {
    pub attribute: String,
    pub kind: AttributeKind,
    pub parents: Vec<String>,
    pub normalization: Normalization,
    pub parent_normalization: Vec<Normalization>,
    pub hidden_width: usize,
    conditioner: Conditioner,
    pub params: ParamStore<T>,
}

/// Fixed range map `w ↦ a`.
fn range_forward<T: Scalar>(kind: AttributeKind, w: T) -> T {
    match kind {
        AttributeKind::ContinuousPositive => w.max(T::zero()) + (-w.abs()).exp().ln_1p(),
        _ => w,
    }
}

fn range_inverse<T: Scalar>(kind: AttributeKind, a: T) -> Option<T> {
    match kind {
        AttributeKind::ContinuousPositive => {
            if !(a > T::zero()) || !a.is_finite() {
                return None;
            }
            // softplus⁻¹(a) = a + ln(1 − e^{−a})
            Some(a + (-(-a).exp_m1()).ln())
        }
        _ => a.is_finite().then_some(a),
    }
}

/// `ln |dw/da|` at `w`.
fn range_log_det_inverse<T: Scalar>(kind: AttributeKind, w: T) -> T {
    match kind {
        // dw/da = 1 / sigmoid(w)
        AttributeKind::ContinuousPositive => (-w).max(T::zero()) + (-w.abs()).exp().ln_1p(),
        _ => T::zero(),
    }
}

impl<T: Scalar> FlowMechanism<T> {
    /// Identity-initialised mechanism for `spec`, reading parent statistics from `graph`.
    pub fn new<R: rand::Rng + ?Sized>(
        spec: &AttributeSpec,
        graph: &CausalGraph,
        hidden_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let parent_normalization = spec
            .parents
            .iter()
            .map(|p| graph.attribute(p).map(|a| a.normalization))
            .collect::<Result<Vec<_>>>()?;
        let mut params = ParamStore::new();
        let conditioner = if spec.parents.is_empty() {
            Conditioner::Constant(params.add("constants", Tensor::zeros(&[2, 1])))
        } else {
            let hidden = Linear::new(&mut params, "hidden", spec.parents.len(), hidden_width, 1.0, rng);
            let out = Linear::new(&mut params, "out", hidden_width, 2, 0.0, rng);
            Conditioner::Mlp { hidden, out }
        };
        Ok(Self {
            attribute: spec.name.clone(),
            kind: spec.kind,
            parents: spec.parents.clone(),
            normalization: spec.normalization,
            parent_normalization,
            hidden_width,
            conditioner,
            params,
        })
    }

    /// Sets (shift, log-scale) of a parentless mechanism.
    pub fn set_constants(&mut self, shift: T, log_scale: T) {
        match self.conditioner {
            Conditioner::Constant(id) => {
                self.params.get_mut(id).data_mut().copy_from_slice(&[shift, log_scale]);
            }
            Conditioner::Mlp { .. } => panic!("set_constants on a conditioned mechanism"),
        }
    }

    fn standardized_parents(&self, parents: &[Vec<T>]) -> Tensor<T> {
        let p = self.parents.len();
        let mut data = Vec::with_capacity(parents.len() * p);
        for row in parents {
            assert_eq!(row.len(), p, "{}: expected {p} parent values", self.attribute);
            for (v, norm) in row.iter().zip(&self.parent_normalization) {
                data.push(T::lit(norm.standardize(v.to_f64_lossy())));
            }
        }
        Tensor::from_vec(&[parents.len(), p], data)
    }

    /// `[N, 1]` shift and clamped log-scale for a batch of parent rows.
    pub fn conditioner_on<'t>(
        &self,
        p: &Bound<'t, T>,
        tape: &'t Tape<T>,
        parents: &[Vec<T>],
    ) -> (Var<'t, T>, Var<'t, T>) {
        let n = parents.len();
        let raw = match &self.conditioner {
            Conditioner::Constant(id) => tape.constant(Tensor::ones(&[n, 1])).linear(p.get(*id), None),
            Conditioner::Mlp { hidden, out } => {
                let x = tape.constant(self.standardized_parents(parents));
                out.forward(p, hidden.forward(p, x).tanh())
            }
        };
        let bound = T::lit(LOG_SCALE_BOUND);
        (raw.slice_channels(0, 1), raw.slice_channels(1, 1).clamp(-bound, bound))
    }

    /// (shift, log_scale) at one parent configuration.
    pub fn shift_log_scale(&self, parents: &[T]) -> (T, T) {
        let tape = Tape::new();
        let p = self.params.bind(&tape, Binding::Frozen);
        let (s, l) = self.conditioner_on(&p, &tape, &[parents.to_vec()]);
        (s.item(), l.item())
    }

    fn domain_error(&self, a: T) -> Error {
        Error::Domain {
            attribute: self.attribute.clone(),
            value: a.to_f64_lossy(),
        }
    }

    /// `a = f(u; pa)`.
    pub fn forward(&self, u: T, parents: &[T]) -> T {
        let (shift, log_scale) = self.shift_log_scale(parents);
        let y = shift + log_scale.exp() * u;
        let w = T::lit(self.normalization.mean) + T::lit(self.normalization.std) * y;
        range_forward(self.kind, w)
    }

    /// `u = f⁻¹(a; pa)`.
    pub fn inverse(&self, a: T, parents: &[T]) -> Result<T> {
        let w = range_inverse(self.kind, a).ok_or_else(|| self.domain_error(a))?;
        let (shift, log_scale) = self.shift_log_scale(parents);
        let y = (w - T::lit(self.normalization.mean)) / T::lit(self.normalization.std);
        Ok((y - shift) * (-log_scale).exp())
    }

    /// `ln p(a | pa)` by change of variables.
    pub fn log_prob(&self, a: T, parents: &[T]) -> Result<T> {
        let w = range_inverse(self.kind, a).ok_or_else(|| self.domain_error(a))?;
        let (shift, log_scale) = self.shift_log_scale(parents);
        let y = (w - T::lit(self.normalization.mean)) / T::lit(self.normalization.std);
        let u = (y - shift) * (-log_scale).exp();
        Ok(T::lit(-0.5) * u * u - T::lit(HALF_LN_2PI) - log_scale
            - T::lit(self.normalization.std.ln())
            + range_log_det_inverse(self.kind, w))
    }

    /// Summed log-density of a batch, differentiable in the parameters.
    pub fn log_prob_on<'t>(
        &self,
        p: &Bound<'t, T>,
        tape: &'t Tape<T>,
        values: &[T],
        parents: &[Vec<T>],
    ) -> Result<Var<'t, T>> {
        let n = values.len();
        let mut y = Vec::with_capacity(n);
        let mut constant = T::zero();
        for &a in values {
            let w = range_inverse(self.kind, a).ok_or_else(|| self.domain_error(a))?;
            y.push((w - T::lit(self.normalization.mean)) / T::lit(self.normalization.std));
            constant += range_log_det_inverse(self.kind, w)
                - T::lit(HALF_LN_2PI + self.normalization.std.ln());
        }
        let (shift, log_scale) = self.conditioner_on(p, tape, parents);
        let y = tape.constant(Tensor::from_vec(&[n, 1], y));
        let u = (y - shift) * (-log_scale).exp();
        let per = u.square().scale(T::lit(-0.5)) - log_scale;
        Ok(per.sum().add_scalar(constant))
    }
}

/// One mechanism per graph attribute, in declaration order.
#[derive(Clone, Debug)]
pub struct FlowSet<T: Scalar> {
    pub graph_hash: String,
    pub mechanisms: Vec<FlowMechanism<T>>,
}

impl<T: Scalar> FlowSet<T> {
    pub fn identity(graph: &CausalGraph, hidden_width: usize, seed: u64) -> Result<Self> {
        graph.ensure_valid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mechanisms = graph
            .attributes
            .iter()
            .map(|a| FlowMechanism::new(a, graph, hidden_width, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            graph_hash: graph.structure_hash(),
            mechanisms,
        })
    }

    pub fn get(&self, attribute: &str) -> Result<&FlowMechanism<T>> {
        self.mechanisms
            .iter()
            .find(|m| m.attribute == attribute)
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))
    }

    pub fn get_mut(&mut self, attribute: &str) -> Result<&mut FlowMechanism<T>> {
        self.mechanisms
            .iter_mut()
            .find(|m| m.attribute == attribute)
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))
    }

    pub fn check_graph(&self, graph: &CausalGraph) -> Result<()> {
        let expected = graph.structure_hash();
        if expected != self.graph_hash {
            return Err(Error::GraphHashMismatch {
                expected,
                found: self.graph_hash.clone(),
            });
        }
        Ok(())
    }

    /// Mean negative log-likelihood per record over `data`, in nats.
    pub fn mean_nll(&self, data: &[Observation]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for m in &self.mechanisms {
            let (values, parents) = columns::<T>(m, data)?;
            for (a, pa) in values.iter().zip(&parents) {
                total -= m.log_prob(*a, pa)?.to_f64_lossy();
            }
        }
        Ok(total / data.len() as f64)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FlowCheckpointConfig {
    graph: CausalGraph,
    hidden_width: usize,
}

impl<T: Scalar> FlowSet<T> {
    /// Saves every mechanism together with the statistics-carrying graph.
    pub fn to_checkpoint(&self, graph: &CausalGraph) -> Result<Checkpoint> {
        self.check_graph(graph)?;
        let mut store = ParamStore::<T>::new();
        for m in &self.mechanisms {
            for (name, t) in m.params.iter() {
                store.add(format!("{}/{name}", m.attribute), t.clone());
            }
        }
        let hidden_width = self.mechanisms.first().map_or(0, |m| m.hidden_width);
        let config = FlowCheckpointConfig {
            graph: graph.clone(),
            hidden_width,
        };
        Checkpoint::new("flows", &self.graph_hash, &config, &store)
    }

    /// Restores the flows and the graph (with training statistics) they were fitted on.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, CausalGraph)> {
        ck.expect_kind("flows")?;
        let config: FlowCheckpointConfig = ck.config()?;
        ck.check_graph(&config.graph.structure_hash())?;
        let mut flows = Self::identity(&config.graph, config.hidden_width, 0)?;
        let saved = ck.store::<T>()?;
        for m in flows.mechanisms.iter_mut() {
            let prefix = format!("{}/", m.attribute);
            let mut store = ParamStore::new();
            for (name, t) in saved.iter() {
                if let Some(rest) = name.strip_prefix(&prefix) {
                    store.add(rest.to_string(), t.clone());
                }
            }
            install(&mut m.params, store)?;
        }
        Ok((flows, config.graph))
    }
}

fn to_t<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

impl<T: Scalar> Mechanisms for FlowSet<T> {
    fn forward(&self, attribute: &str, u: f64, parents: &[f64]) -> Result<f64> {
        Ok(self.get(attribute)?.forward(T::lit(u), &to_t(parents)).to_f64_lossy())
    }

    fn inverse(&self, attribute: &str, a: f64, parents: &[f64]) -> Result<f64> {
        Ok(self.get(attribute)?.inverse(T::lit(a), &to_t(parents))?.to_f64_lossy())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden_width: usize,
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 256,
            lr: 1e-2,
            hidden_width: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainReport {
    pub initial_val_nll: f64,
    pub final_val_nll: f64,
}

fn columns<T: Scalar>(m: &FlowMechanism<T>, data: &[Observation]) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    let mut values = Vec::with_capacity(data.len());
    let mut parents = Vec::with_capacity(data.len());
    for obs in data {
        values.push(T::lit(obs.attributes.get(&m.attribute)?));
        parents.push(
            m.parents
                .iter()
                .map(|p| obs.attributes.get(p).map(T::lit))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((values, parents))
}

/// Maximum-likelihood fit of every mechanism. `graph` must already carry
/// training-set normalisation statistics (see [`fit_statistics`]).
pub fn train_flows<T: Scalar>(
    train: &[Observation],
    val: &[Observation],
    graph: &CausalGraph,
    config: &FlowTrainConfig,
) -> Result<(FlowSet<T>, FlowTrainReport)> {
    let mut flows = FlowSet::<T>::identity(graph, config.hidden_width, config.seed)?;
    let initial_val_nll = flows.mean_nll(val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    for m in flows.mechanisms.iter_mut() {
        let (values, parents) = columns(m, train)?;
        let mut opt = Adam::new(&m.params, config.lr);
        let mut order: Vec<usize> = (0..values.len()).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let v: Vec<T> = chunk.iter().map(|&i| values[i]).collect();
                let pa: Vec<Vec<T>> = chunk.iter().map(|&i| parents[i].clone()).collect();
                let tape = Tape::new();
                let bound = m.params.bind(&tape, Binding::Trainable);
                let nll = -m.log_prob_on(&bound, &tape, &v, &pa)?.scale(T::lit(1.0 / v.len() as f64));
                let loss = nll.item().to_f64_lossy();
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        stage: format!("flow `{}`", m.attribute),
                        detail: format!("epoch {epoch}: nll = {loss}"),
                    });
                }
                let grads = bound.grads(&tape.backward(nll));
                opt.step(&mut m.params, &grads);
            }
        }
    }
    let final_val_nll = flows.mean_nll(val)?;
    Ok((
        flows,
        FlowTrainReport {
            initial_val_nll,
            final_val_nll,
        },
    ))
}

/// Copy of `graph` with normalisation statistics and observed ranges fitted
/// on `train`.
pub fn fit_statistics(graph: &CausalGraph, train: &[Observation]) -> Result<CausalGraph> {
    let mut out = graph.clone();
    for spec in out.attributes.iter_mut() {
        let values = train
            .iter()
            .map(|o| o.attributes.get(&spec.name))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Config("no training records to fit statistics".into()));
        }
        spec.normalization = Normalization::fit(&values);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        spec.observed_range = Some((min, max));
    }
    Ok(out)
}
