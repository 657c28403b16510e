//! The assembled causal model: attribute flows plus the image HVAE, and the
//! abduction → action → prediction counterfactual procedure.

use std::collections::BTreeMap;

use dscm_autograd::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowSet;
use crate::graph::{AttributeVector, CausalGraph, Intervention, Observation};
use crate::hvae::{parent_batch, Hvae, LatentHierarchy};
use crate::image::Image;
use crate::scm::{abduct_noise, predict_parents};

/// How the image latents are abducted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "seed")]
pub enum AbductionMode {
    /// Posterior location; fully deterministic.
    #[default]
    Mean,
    /// One reparameterised posterior draw from the given seed.
    Sample(u64),
}

#[derive(Clone, Debug)]
pub struct ExogenousState<T: Scalar> {
    pub attribute_noise: BTreeMap<String, f64>,
    pub image_latent: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct CounterfactualResult<T: Scalar> {
    pub image_cf: Image,
    pub parents_cf: AttributeVector,
    /// `x̃ − x`.
    pub diff: Image,
    /// The intervention actually applied, after clamping to feasible ranges.
    pub applied: Intervention,
    pub exogenous: ExogenousState<T>,
    pub warnings: Vec<String>,
}

/// Attribute flows are kept in `f64`: they are tiny and exact round trips
/// matter more than speed there.
#[derive(Clone, Debug)]
pub struct Dscm<T: Scalar> {
    pub graph: CausalGraph,
    pub flows: FlowSet<f64>,
    pub hvae: Hvae<T>,
}

impl<T: Scalar> Dscm<T> {
    pub fn new(graph: CausalGraph, flows: FlowSet<f64>, hvae: Hvae<T>) -> Result<Self> {
        graph.ensure_valid()?;
        flows.check_graph(&graph)?;
        if hvae.config.parent_dim != graph.image_parents.len() {
            return Err(Error::Config(format!(
                "hvae expects {} parents, graph has {}",
                hvae.config.parent_dim,
                graph.image_parents.len()
            )));
        }
        Ok(Self { graph, flows, hvae })
    }

    fn pick(&self, q: &LatentHierarchy<T>, mode: AbductionMode) -> Vec<Tensor<T>> {
        match mode {
            AbductionMode::Mean => q.loc.clone(),
            AbductionMode::Sample(seed) => q.sample(&mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn abduct(&self, image: &Image, attributes: &AttributeVector, mode: AbductionMode) -> Result<ExogenousState<T>> {
        attributes.check(&self.graph)?;
        let attribute_noise = abduct_noise(&self.graph, &self.flows, attributes)?;
        let x = Image::batch::<T>(&[image]);
        let pa = parent_batch::<T>(&self.graph, &[attributes])?;
        let q = self.hvae.encode(&x, &pa)?;
        Ok(ExogenousState {
            attribute_noise,
            image_latent: self.pick(&q, mode),
        })
    }

    /// `decode(abduct(x, pa), pa)`.
    pub fn reconstruct(&self, image: &Image, attributes: &AttributeVector) -> Result<Image> {
        let ex = self.abduct(image, attributes, AbductionMode::Mean)?;
        let pa = parent_batch::<T>(&self.graph, &[attributes])?;
        Ok(Image::unbatch(&self.hvae.decode(&ex.image_latent, &pa)?, 0).remove(0))
    }

    pub fn counterfactual(
        &self,
        image: &Image,
        attributes: &AttributeVector,
        intervention: &Intervention,
        mode: AbductionMode,
    ) -> Result<CounterfactualResult<T>> {
        image.check_dims(self.hvae.config.height, self.hvae.config.width)?;
        let (applied, warnings) = intervention.clamped(&self.graph)?;
        let exogenous = self.abduct(image, attributes, mode)?;
        let parents_cf = predict_parents(&self.graph, &self.flows, attributes, &exogenous.attribute_noise, &applied)?;
        let pa_cf = parent_batch::<T>(&self.graph, &[&parents_cf])?;
        let out = self.hvae.decode(&exogenous.image_latent, &pa_cf)?;
        let image_cf = Image::unbatch(&out, 0).remove(0);
        let diff = image_cf.diff(image);
        Ok(CounterfactualResult {
            image_cf,
            parents_cf,
            diff,
            applied,
            exogenous,
            warnings,
        })
    }

    /// Counterfactual parents for every record under its own intervention.
    pub fn counterfactual_parents(&self, obs: &[&Observation], ivs: &[Intervention]) -> Result<Vec<(AttributeVector, Intervention)>> {
        obs.iter()
            .zip(ivs)
            .map(|(o, iv)| {
                let (applied, _) = iv.clamped(&self.graph)?;
                let noise = abduct_noise(&self.graph, &self.flows, &o.attributes)?;
                let cf = predict_parents(&self.graph, &self.flows, &o.attributes, &noise, &applied)?;
                Ok((cf, applied))
            })
            .collect()
    }

    /// Batched mean-abduction counterfactual images.
    pub fn counterfactual_batch(&self, obs: &[&Observation], parents_cf: &[&AttributeVector]) -> Result<Vec<Image>> {
        let images: Vec<&Image> = obs.iter().map(|o| &o.image).collect();
        let x = Image::batch::<T>(&images);
        let attrs: Vec<&AttributeVector> = obs.iter().map(|o| &o.attributes).collect();
        let pa = parent_batch::<T>(&self.graph, &attrs)?;
        let q = self.hvae.encode(&x, &pa)?;
        let pa_cf = parent_batch::<T>(&self.graph, parents_cf)?;
        Ok(Image::unbatch(&self.hvae.decode(&q.loc, &pa_cf)?, 0))
    }
}
