//! Causal graph over scalar attributes plus the image node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{Image, SoftMask};

/// Name reserved for the image node.
pub const IMAGE_NODE: &str = "image";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeKind {
    ContinuousPositive,
    ContinuousReal,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl Normalization {
    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn destandardize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    /// Mean and population standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(1e-8),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub parents: Vec<String>,
    #[serde(default)]
    pub normalization: Normalization,
    /// `[min, max]` of the training marginal, once known.
    #[serde(default)]
    pub observed_range: Option<(f64, f64)>,
}

impl AttributeSpec {
    pub fn new(name: &str, kind: AttributeKind, unit: &str, parents: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind,
            unit: unit.to_string(),
            parents: parents.iter().map(|p| p.to_string()).collect(),
            normalization: Normalization::default(),
            observed_range: None,
        }
    }

    /// Training range widened by 10% of its width on both sides.
    pub fn feasible_range(&self) -> Option<(f64, f64)> {
        let (min, max) = self.observed_range?;
        let margin = 0.1 * (max - min);
        let mut lo = min - margin;
        if self.kind == AttributeKind::ContinuousPositive && lo <= 0.0 {
            lo = 0.5 * min;
        }
        Some((lo, max + margin))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub attributes: Vec<AttributeSpec>,
    pub image_parents: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateName(String),
    ReservedName(String),
    UnknownParent { attribute: String, parent: String },
    UnknownImageParent(String),
    Cycle(Vec<String>),
    NonPositiveStd(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateName(n) => write!(f, "duplicate attribute {n}"),
            Violation::ReservedName(n) => write!(f, "attribute name {n} is reserved"),
            Violation::UnknownParent { attribute, parent } => {
                write!(f, "unknown parent {parent} (of {attribute})")
            }
            Violation::UnknownImageParent(p) => write!(f, "unknown parent {p} (of {IMAGE_NODE})"),
            Violation::Cycle(nodes) => write!(f, "cycle {}", nodes.join(",")),
            Violation::NonPositiveStd(n) => write!(f, "non-positive std for {n}"),
        }
    }
}

impl CausalGraph {
    pub fn new(attributes: Vec<AttributeSpec>, image_parents: &[&str]) -> Self {
        Self {
            attributes,
            image_parents: image_parents.iter().map(|p| p.to_string()).collect(),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn attribute(&self, name: &str) -> Result<&AttributeSpec> {
        self.attributes
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn attribute_mut(&mut self, name: &str) -> Result<&mut AttributeSpec> {
        self.attributes
            .iter_mut()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    /// All graph invariants; an empty list means the graph is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(a.name.as_str()) {
                out.push(Violation::DuplicateName(a.name.clone()));
            }
            if a.name == IMAGE_NODE {
                out.push(Violation::ReservedName(a.name.clone()));
            }
            if !(a.normalization.std > 0.0) {
                out.push(Violation::NonPositiveStd(a.name.clone()));
            }
        }
        for a in &self.attributes {
            for p in &a.parents {
                if !seen.contains(p.as_str()) {
                    out.push(Violation::UnknownParent {
                        attribute: a.name.clone(),
                        parent: p.clone(),
                    });
                }
            }
        }
        for p in &self.image_parents {
            if !seen.contains(p.as_str()) {
                out.push(Violation::UnknownImageParent(p.clone()));
            }
        }
        let on_cycle = self.cycle_members();
        if !on_cycle.is_empty() {
            out.push(Violation::Cycle(on_cycle));
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGraph(
                v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            ))
        }
    }

    fn parent_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.attributes[i]
            .parents
            .iter()
            .filter_map(|p| self.index_of(p))
    }

    /// Attributes that lie on a directed cycle, in declaration order.
    fn cycle_members(&self) -> Vec<String> {
        let n = self.attributes.len();
        (0..n)
            .filter(|&start| {
                // can `start` reach itself by following parent edges?
                let mut stack: Vec<usize> = self.parent_indices(start).collect();
                let mut visited = vec![false; n];
                while let Some(v) = stack.pop() {
                    if v == start {
                        return true;
                    }
                    if !std::mem::replace(&mut visited[v], true) {
                        stack.extend(self.parent_indices(v));
                    }
                }
                false
            })
            .map(|i| self.attributes[i].name.clone())
            .collect()
    }

    /// Parents before children, ties broken by declaration order.
    pub fn topological_order(&self) -> Result<Vec<String>> {
        let n = self.attributes.len();
        let mut placed = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let next = (0..n).find(|&i| {
                !placed[i] && self.parent_indices(i).all(|p| placed[p])
            });
            match next {
                Some(i) => {
                    placed[i] = true;
                    order.push(self.attributes[i].name.clone());
                }
                None => return Err(Error::Cycle(self.cycle_members())),
            }
        }
        Ok(order)
    }

    /// Attributes reachable from any of `roots` along child edges, roots included.
    pub fn descendants(&self, roots: &[&str]) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = roots.iter().map(|r| r.to_string()).collect();
        let mut changed = true;
        while changed {
            changed = false;
            for a in &self.attributes {
                if !out.contains(&a.name) && a.parents.iter().any(|p| out.contains(p)) {
                    out.insert(a.name.clone());
                    changed = true;
                }
            }
        }
        out
    }

    /// Stable identifier of the graph structure (not of fitted statistics).
    pub fn structure_hash(&self) -> String {
        #[derive(Serialize)]
        struct Shape<'a> {
            attributes: Vec<(&'a str, AttributeKind, &'a str, &'a [String])>,
            image_parents: &'a [String],
        }
        let shape = Shape {
            attributes: self
                .attributes
                .iter()
                .map(|a| (a.name.as_str(), a.kind, a.unit.as_str(), a.parents.as_slice()))
                .collect(),
            image_parents: &self.image_parents,
        };
        let bytes = serde_json::to_vec(&shape).expect("graph serialises");
        hex::encode(Sha256::digest(bytes))
    }

    /// Standardised image-parent vector, in `image_parents` order.
    pub fn image_parent_vector(&self, values: &AttributeVector) -> Result<Vec<f64>> {
        self.image_parents
            .iter()
            .map(|p| {
                let spec = self.attribute(p)?;
                Ok(spec.normalization.standardize(values.get(p)?))
            })
            .collect()
    }
}

/// Attribute values in original units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub values: BTreeMap<String, f64>,
}

impl AttributeVector {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        Self {
            values: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.values
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn set(&mut self, name: &str, v: f64) {
        self.values.insert(name.to_string(), v);
    }

    /// Keys match the graph and kind constraints hold.
    pub fn check(&self, graph: &CausalGraph) -> Result<()> {
        for a in &graph.attributes {
            let v = self.get(&a.name)?;
            let ok = match a.kind {
                AttributeKind::ContinuousPositive => v > 0.0,
                AttributeKind::ContinuousReal => v.is_finite(),
                AttributeKind::Binary => v == 0.0 || v == 1.0,
            };
            if !ok {
                return Err(Error::Domain {
                    attribute: a.name.clone(),
                    value: v,
                });
            }
        }
        if let Some(extra) = self.values.keys().find(|k| graph.index_of(k).is_none()) {
            return Err(Error::UnknownAttribute(extra.clone()));
        }
        Ok(())
    }

    pub fn ordered(&self, names: &[String]) -> Result<Vec<f64>> {
        names.iter().map(|n| self.get(n)).collect()
    }
}

/// `do(a_k := c)` for one or more attributes, applied simultaneously.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub assignments: BTreeMap<String, f64>,
}

impl Intervention {
    pub fn single(name: &str, value: f64) -> Self {
        Self {
            assignments: [(name.to_string(), value)].into_iter().collect(),
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        Self {
            assignments: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    /// Offending variables, if any; empty means structurally valid.
    pub fn problems(&self, graph: &CausalGraph) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.assignments.is_empty() {
            out.push((String::new(), "intervention assigns nothing".to_string()));
        }
        for (name, &v) in &self.assignments {
            if name == IMAGE_NODE {
                out.push((name.clone(), "the image node cannot be intervened on".into()));
            } else if let Ok(spec) = graph.attribute(name) {
                let kind_ok = match spec.kind {
                    AttributeKind::ContinuousPositive => v.is_finite() && v > 0.0,
                    AttributeKind::ContinuousReal => v.is_finite(),
                    AttributeKind::Binary => v == 0.0 || v == 1.0,
                };
                if !kind_ok {
                    out.push((name.clone(), format!("value {v} violates {:?}", spec.kind)));
                }
            } else {
                out.push((name.clone(), "unknown attribute".into()));
            }
        }
        out
    }

    pub fn validate(&self, graph: &CausalGraph) -> Result<()> {
        let problems = self.problems(graph);
        if problems.is_empty() {
            return Ok(());
        }
        Err(Error::InvalidIntervention(
            problems
                .iter()
                .map(|(n, why)| if n.is_empty() { why.clone() } else { format!("{n}: {why}") })
                .collect::<Vec<_>>()
                .join("; "),
        ))
    }

    /// Clamps targets into each attribute's feasible range, returning one
    /// warning per clamped variable.
    pub fn clamped(&self, graph: &CausalGraph) -> Result<(Intervention, Vec<String>)> {
        self.validate(graph)?;
        let mut out = self.clone();
        let mut warnings = Vec::new();
        for (name, v) in out.assignments.iter_mut() {
            if let Some((lo, hi)) = graph.attribute(name)?.feasible_range() {
                if *v < lo || *v > hi {
                    let c = v.clamp(lo, hi);
                    warnings.push(format!(
                        "target {v} for {name} clamped to {c} (feasible range [{lo}, {hi}])"
                    ));
                    *v = c;
                }
            }
        }
        Ok((out, warnings))
    }
}

/// A factual record: image, attributes and (synthetic data only) masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub id: String,
    pub image: Image,
    pub attributes: AttributeVector,
    pub masks: Option<SoftMask>,
}
