//! Counterfactual effectiveness and locality, aggregated into a
//! regime × intervention table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dscm_autograd::Scalar;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{area, AreaReadout, Segmentor};
use crate::dscm::Dscm;
use crate::error::{Error, Result};
use crate::graph::{AttributeVector, Intervention, Observation};
use crate::image::{Image, SoftMask};

pub const TABLE_HEADER: &str = "# dscm effectiveness table v1";

/// `100 · mean(|pred − target| / |target|)`.
pub fn mape(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::Metric("mape of an empty sample".into()));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if *t == 0.0 {
            return Err(Error::Metric("mape with a zero target".into()));
        }
        sum += ((p - t) / t).abs();
    }
    Ok(100.0 * sum / pred.len() as f64)
}

/// `mean |pred − target|`.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Metric(format!("length mismatch: {} vs {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::Metric("mae of an empty sample".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Mape,
    Mae,
}

impl Metric {
    pub fn apply(self, pred: &[f64], target: &[f64]) -> Result<f64> {
        match self {
            Metric::Mape => mape(pred, target),
            Metric::Mae => mae(pred, target),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mape => "mape",
            Metric::Mae => "mae",
        }
    }
}

/// Binary mask grown by every pixel within Euclidean distance `radius`.
pub fn dilate(mask: &Image, radius: usize) -> Image {
    let (h, w) = mask.dims();
    let r = radius as isize;
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) < 0.5 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        out.set(yy as usize, xx as usize, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Share of `Σ|x̃ − x|` that lies outside the target mask dilated by `radius`.
pub fn locality(x: &Image, x_cf: &Image, target_mask: &Image, radius: usize) -> f64 {
    assert_eq!(x.dims(), x_cf.dims(), "locality of differently sized images");
    assert_eq!(x.dims(), target_mask.dims(), "mask size differs from image");
    let grown = dilate(target_mask, radius);
    let (mut outside, mut total) = (0.0f64, 0.0f64);
    for ((a, b), m) in x.data.iter().zip(&x_cf.data).zip(&grown.data) {
        let d = (*b as f64 - *a as f64).abs();
        total += d;
        if *m < 0.5 {
            outside += d;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        (outside / total).clamp(0.0, 1.0)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Reference for unintervened columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnintervenedReference {
    #[default]
    Factual,
    /// The counterfactual value after propagation through the attribute SCM.
    Propagated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Structure variables that are intervened on and read out.
    pub variables: Vec<String>,
    /// Targets are `shift · factual` for each listed shift.
    pub relative_shifts: Vec<f64>,
    pub reference: UnintervenedReference,
    pub readout: AreaReadout,
    pub metric: Metric,
    pub dilation_radius: usize,
    pub batch_size: usize,
}

impl EvalProtocol {
    pub fn new(variables: Vec<String>) -> Self {
        Self {
            variables,
            relative_shifts: vec![0.75, 1.25],
            reference: UnintervenedReference::Factual,
            readout: AreaReadout::Soft,
            metric: Metric::Mape,
            dilation_radius: 2,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub column: String,
    pub value: f64,
    pub intervened: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub regime: String,
    pub intervention: String,
    pub cells: Vec<Cell>,
    pub locality_median: f64,
    pub n: usize,
}

impl ReportRow {
    pub fn cell(&self, column: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.column == column)
    }

    pub fn intervened(&self) -> &Cell {
        self.cells.iter().find(|c| c.intervened).expect("one intervened column")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessReport {
    pub metric: Metric,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub evaluator_id: String,
    pub dataset_id: String,
    pub seed: u64,
}

impl EffectivenessReport {
    pub fn row(&self, regime: &str, intervention: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.regime == regime && r.intervention == intervention)
    }

    /// Delimited table with a schema header and fixed column order.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{TABLE_HEADER}").unwrap();
        writeln!(
            out,
            "# metric={} evaluator={} dataset={} seed={}",
            self.metric.name(),
            self.evaluator_id,
            self.dataset_id,
            self.seed
        )
        .unwrap();
        write!(out, "regime,intervention,n").unwrap();
        for c in &self.columns {
            write!(out, ",{c}").unwrap();
        }
        writeln!(out, ",locality_median").unwrap();
        for r in &self.rows {
            write!(out, "{},{},{}", r.regime, r.intervention, r.n).unwrap();
            for c in &self.columns {
                match r.cell(c) {
                    Some(cell) if cell.intervened => write!(out, ",*{:.4}", cell.value).unwrap(),
                    Some(cell) => write!(out, ",{:.4}", cell.value).unwrap(),
                    None => write!(out, ",").unwrap(),
                }
            }
            writeln!(out, ",{:.4}", r.locality_median).unwrap();
        }
        out
    }
}

pub fn intervention_label(variable: &str) -> String {
    format!("do({variable})")
}

/// Refuses an evaluator that is one of the fine-tuning auxiliaries.
pub fn check_independence(evaluator_id: &str, finetune_ids: &[String]) -> Result<()> {
    if finetune_ids.iter().any(|id| id == evaluator_id) {
        return Err(Error::AuxiliaryReuse(evaluator_id.to_string()));
    }
    Ok(())
}

/// One generated counterfactual with everything the table needs.
#[derive(Clone, Debug)]
pub struct EvaluatedCounterfactual {
    pub record: usize,
    pub variable: String,
    pub parents_cf: AttributeVector,
    pub image_cf: Image,
    pub predicted: BTreeMap<String, f64>,
    pub locality: f64,
}

/// Generates `do(V := shift · V)` counterfactuals for every record, variable
/// and shift, and reads them with the evaluation segmentor.
pub fn generate_and_read<T: Scalar>(
    model: &Dscm<T>,
    evaluator: &Segmentor<T>,
    data: &[Observation],
    protocol: &EvalProtocol,
) -> Result<Vec<EvaluatedCounterfactual>> {
    let mut jobs = Vec::new();
    for v in &protocol.variables {
        for (i, o) in data.iter().enumerate() {
            let factual = o.attributes.get(v)?;
            for s in &protocol.relative_shifts {
                jobs.push((i, v.clone(), Intervention::single(v, factual * s)));
            }
        }
    }
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(protocol.batch_size.max(1)) {
        let obs: Vec<&Observation> = chunk.iter().map(|(i, _, _)| &data[*i]).collect();
        let ivs: Vec<Intervention> = chunk.iter().map(|(_, _, iv)| iv.clone()).collect();
        let parents = model.counterfactual_parents(&obs, &ivs)?;
        let cf_refs: Vec<&AttributeVector> = parents.iter().map(|(p, _)| p).collect();
        let images = model.counterfactual_batch(&obs, &cf_refs)?;
        let batch: Vec<&Image> = images.iter().collect();
        let probs = evaluator.predict_batch(&Image::batch::<T>(&batch))?;
        let s = evaluator.config.structures.len();
        for (k, ((i, v, _), image_cf)) in chunk.iter().zip(images).enumerate() {
            let grids = (0..s).map(|j| Image::unbatch(&probs, j).swap_remove(k)).collect();
            let mask = SoftMask::new(evaluator.config.structures.clone(), grids, evaluator.config.pixel_area)?;
            let predicted = protocol
                .variables
                .iter()
                .map(|c| Ok((c.clone(), area(&mask, c, protocol.readout)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let gt = data[*i]
                .masks
                .as_ref()
                .and_then(|m| m.grid(v))
                .ok_or_else(|| Error::Dataset {
                    record: data[*i].id.clone(),
                    detail: format!("no ground-truth mask for {v}"),
                })?;
            let loc = locality(&data[*i].image, &image_cf, gt, protocol.dilation_radius);
            out.push(EvaluatedCounterfactual {
                record: *i,
                variable: v.clone(),
                parents_cf: parents[k].0.clone(),
                image_cf,
                predicted,
                locality: loc,
            });
        }
    }
    Ok(out)
}

/// Aggregates evaluated counterfactuals into one row per intervened variable.
pub fn aggregate(
    regime: &str,
    data: &[Observation],
    evaluated: &[EvaluatedCounterfactual],
    protocol: &EvalProtocol,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for v in &protocol.variables {
        let items: Vec<&EvaluatedCounterfactual> = evaluated.iter().filter(|e| &e.variable == v).collect();
        let mut cells = Vec::new();
        for c in &protocol.variables {
            let mut pred = Vec::with_capacity(items.len());
            let mut target = Vec::with_capacity(items.len());
            for e in &items {
                pred.push(e.predicted[c]);
                let reference = if c == v || protocol.reference == UnintervenedReference::Propagated {
                    e.parents_cf.get(c)?
                } else {
                    data[e.record].attributes.get(c)?
                };
                target.push(reference);
            }
            cells.push(Cell {
                column: c.clone(),
                value: protocol.metric.apply(&pred, &target)?,
                intervened: c == v,
            });
        }
        let localities: Vec<f64> = items.iter().map(|e| e.locality).collect();
        rows.push(ReportRow {
            regime: regime.to_string(),
            intervention: intervention_label(v),
            cells,
            locality_median: median(&localities),
            n: items.len(),
        });
    }
    Ok(rows)
}

/// Table rows for one regime's model.
pub fn effectiveness<T: Scalar>(
    regime: &str,
    model: &Dscm<T>,
    evaluator: &Segmentor<T>,
    finetune_ids: &[String],
    data: &[Observation],
    protocol: &EvalProtocol,
) -> Result<Vec<ReportRow>> {
    check_independence(&evaluator.id(), finetune_ids)?;
    let evaluated = generate_and_read(model, evaluator, data, protocol)?;
    aggregate(regime, data, &evaluated, protocol)
}
