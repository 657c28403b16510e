//! Frozen auxiliary predictors: a U-Net segmentor whose soft masks give
//! differentiable structure areas, and a residual CNN regressor that reads
//! the areas directly.

use std::collections::BTreeMap;

use dscm_autograd::nn::{Conv2d, Linear};
use dscm_autograd::{Adam, Binding, Bound, ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{param_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, Normalization, Observation};
use crate::hvae::image_batch;
use crate::image::{Image, SoftMask};

pub const DICE_EPS: f64 = 1e-6;
const LEAK: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxRole {
    Finetune,
    Eval,
}

impl std::fmt::Display for AuxRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AuxRole::Finetune => "finetune",
            AuxRole::Eval => "eval",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AreaSource {
    Regressor,
    SegmentorArea,
}

/// Area readout from a soft mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AreaReadout {
    #[default]
    Soft,
    /// Count of pixels with probability ≥ 0.5.
    Thresholded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedAttributes {
    pub values: BTreeMap<String, f64>,
    pub source: AreaSource,
}

/// `1 − (2Σpt + ε)/(Σp + Σt + ε)` averaged over structures.
pub fn dice_loss(pred: &SoftMask, target: &SoftMask) -> Result<f64> {
    if pred.structures != target.structures || pred.dims() != target.dims() {
        return Err(Error::Shape {
            expected: format!("{:?} {:?}", target.structures, target.dims()),
            got: format!("{:?} {:?}", pred.structures, pred.dims()),
        });
    }
    let mut total = 0.0;
    for (p, t) in pred.grids.iter().zip(&target.grids) {
        let (mut inter, mut sp, mut st) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in p.data.iter().zip(&t.data) {
            inter += a as f64 * b as f64;
            sp += a as f64;
            st += b as f64;
        }
        total += 1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS);
    }
    Ok(total / pred.grids.len() as f64)
}

/// `pixel_area · Σ m̂` for one structure.
pub fn soft_area(mask: &SoftMask, structure: &str) -> Result<f64> {
    let grid = mask
        .grid(structure)
        .ok_or_else(|| Error::UnknownAttribute(structure.to_string()))?;
    Ok(mask.pixel_area * grid.data.iter().map(|&v| v as f64).sum::<f64>())
}

/// Area of the `≥ 0.5` region for one structure.
pub fn thresholded_area(mask: &SoftMask, structure: &str) -> Result<f64> {
    let grid = mask
        .grid(structure)
        .ok_or_else(|| Error::UnknownAttribute(structure.to_string()))?;
    Ok(mask.pixel_area * grid.data.iter().filter(|&&v| v >= 0.5).count() as f64)
}

pub fn area(mask: &SoftMask, structure: &str, readout: AreaReadout) -> Result<f64> {
    match readout {
        AreaReadout::Soft => soft_area(mask, structure),
        AreaReadout::Thresholded => thresholded_area(mask, structure),
    }
}

/// Batched soft Dice loss on the tape, averaged over samples and structures.
pub fn dice_loss_on<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>) -> Var<'t, T> {
    let eps = T::lit(DICE_EPS);
    let inter = (pred * target).sum_spatial().scale(T::lit(2.0)).add_scalar(eps);
    let denom = (pred.sum_spatial() + target.sum_spatial()).add_scalar(eps);
    let coef = (inter / denom).mean();
    -coef.add_scalar(-T::one())
}

fn check_image<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
        return Err(Error::Shape {
            expected: format!("[N, 1, {h}, {w}]"),
            got: format!("{s:?}"),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

impl Block {
    fn new<T: Scalar, R: Rng + ?Sized>(s: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            a: Conv2d::new(s, &format!("{name}.a"), cin, cout, 3, 1, rng),
            b: Conv2d::new(s, &format!("{name}.b"), cout, cout, 3, 1, rng),
        }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let slope = T::lit(LEAK);
        self.b.forward(p, self.a.forward(p, x).leaky_relu(slope)).leaky_relu(slope)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentorConfig {
    pub structures: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixel_area: f64,
}

/// Two-level U-Net with one independent sigmoid map per structure.
#[derive(Clone, Debug)]
pub struct Segmentor<T: Scalar> {
    pub config: SegmentorConfig,
    pub role: AuxRole,
    pub seed: u64,
    pub params: ParamStore<T>,
    enc1: Block,
    enc2: Block,
    mid: Block,
    dec2: Block,
    dec1: Block,
    head: Conv2d,
}

impl<T: Scalar> Segmentor<T> {
    pub fn new(config: SegmentorConfig, role: AuxRole, seed: u64) -> Result<Self> {
        if config.structures.is_empty() || !config.height.is_multiple_of(4) || !config.width.is_multiple_of(4) {
            return Err(Error::Config("segmentor needs structures and a size divisible by 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = config.channels;
        let enc1 = Block::new(&mut s, "enc1", 1, c, &mut rng);
        let enc2 = Block::new(&mut s, "enc2", c, 2 * c, &mut rng);
        let mid = Block::new(&mut s, "mid", 2 * c, 2 * c, &mut rng);
        let dec2 = Block::new(&mut s, "dec2", 4 * c, 2 * c, &mut rng);
        let dec1 = Block::new(&mut s, "dec1", 3 * c, c, &mut rng);
        let head = Conv2d::new(&mut s, "head", c, config.structures.len(), 1, 1, &mut rng);
        Ok(Self {
            config,
            role,
            seed,
            params: s,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            head,
        })
    }

    pub fn id(&self) -> String {
        param_hash(&self.params)
    }

    /// Probability maps `[N, S, H, W]`.
    pub fn probs_on<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let tape = x.tape();
        let e1 = self.enc1.forward(p, x);
        let e2 = self.enc2.forward(p, e1.avg_pool2());
        let m = self.mid.forward(p, e2.avg_pool2());
        let d2 = self.dec2.forward(p, tape.concat(&[m.upsample2(), e2]));
        let d1 = self.dec1.forward(p, tape.concat(&[d2.upsample2(), e1]));
        self.head.forward(p, d1).sigmoid()
    }

    /// Soft areas `[N, S]` in `pixel_area` units.
    pub fn soft_areas_on<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        self.probs_on(p, x).sum_spatial().scale(T::lit(self.config.pixel_area))
    }

    pub fn predict_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image(x, self.config.height, self.config.width)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, Binding::Frozen);
        let probs = self.probs_on(&p, tape.constant(x.clone()));
        let out = (*probs.value()).clone();
        Ok(out)
    }

    pub fn predict_masks(&self, image: &Image) -> Result<SoftMask> {
        let probs = self.predict_batch(&Image::batch(&[image]))?;
        let grids = (0..self.config.structures.len())
            .map(|s| Image::unbatch(&probs, s).remove(0))
            .collect();
        SoftMask::new(self.config.structures.clone(), grids, self.config.pixel_area)
    }

    pub fn predict_attributes(&self, image: &Image, readout: AreaReadout) -> Result<PredictedAttributes> {
        let mask = self.predict_masks(image)?;
        let values = self
            .config
            .structures
            .iter()
            .map(|s| Ok((s.clone(), area(&mask, s, readout)?)))
            .collect::<Result<_>>()?;
        Ok(PredictedAttributes {
            values,
            source: AreaSource::SegmentorArea,
        })
    }

    pub fn to_checkpoint(&self, graph_hash: &str) -> Result<Checkpoint> {
        Checkpoint::new("segmentor", graph_hash, &self.config, &self.params)?
            .with_meta("role", &self.role)?
            .with_meta("seed", &self.seed)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("segmentor")?;
        let mut m = Self::new(ck.config()?, ck.meta("role")?, ck.meta("seed")?)?;
        install(&mut m.params, ck.store()?)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub structures: Vec<String>,
    /// Training statistics used to standardise targets, one per structure.
    pub normalization: Vec<Normalization>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl RegressorConfig {
    pub fn from_graph(graph: &CausalGraph, structures: &[String], height: usize, width: usize, channels: usize) -> Result<Self> {
        let normalization = structures
            .iter()
            .map(|s| graph.attribute(s).map(|a| a.normalization))
            .collect::<Result<_>>()?;
        Ok(Self {
            structures: structures.to_vec(),
            normalization,
            height,
            width,
            channels,
        })
    }
}

/// Residual CNN with global average pooling and a linear head that predicts
/// standardised areas.
#[derive(Clone, Debug)]
pub struct Regressor<T: Scalar> {
    pub config: RegressorConfig,
    pub role: AuxRole,
    pub seed: u64,
    pub params: ParamStore<T>,
    stem: Conv2d,
    stages: Vec<(Conv2d, Block)>,
    head: Linear,
}

impl<T: Scalar> Regressor<T> {
    pub fn new(config: RegressorConfig, role: AuxRole, seed: u64) -> Result<Self> {
        if config.structures.is_empty() || config.normalization.len() != config.structures.len() {
            return Err(Error::Config("regressor needs one normalisation per structure".into()));
        }
        if !config.height.is_multiple_of(4) || !config.width.is_multiple_of(4) {
            return Err(Error::Config("regressor input size must be divisible by 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = config.channels;
        let stem = Conv2d::new(&mut s, "stem", 1, c, 3, 1, &mut rng);
        let mut stages = Vec::new();
        let widths = [c, 2 * c, 2 * c];
        for (i, w) in widths.iter().enumerate() {
            let cin = if i == 0 { c } else { widths[i - 1] };
            let proj = Conv2d::new(&mut s, &format!("stage{i}.proj"), cin, *w, 1, 1, &mut rng);
            stages.push((proj, Block::new(&mut s, &format!("stage{i}"), *w, *w, &mut rng)));
        }
        let head = Linear::new(&mut s, "head", widths[2], config.structures.len(), 1.0, &mut rng);
        Ok(Self {
            config,
            role,
            seed,
            params: s,
            stem,
            stages,
            head,
        })
    }

    pub fn id(&self) -> String {
        param_hash(&self.params)
    }

    /// Standardised area predictions `[N, S]`.
    pub fn predict_on<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let slope = T::lit(LEAK);
        let mut h = self.stem.forward(p, x).leaky_relu(slope);
        for (i, (proj, block)) in self.stages.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2();
            }
            let skip = proj.forward(p, h);
            h = (skip + block.forward(p, skip)).leaky_relu(slope);
        }
        self.head.forward(p, h.mean_spatial())
    }

    /// Areas in original units, `[N, S]`.
    pub fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        check_image(x, self.config.height, self.config.width)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, Binding::Frozen);
        let out = self.predict_on(&p, tape.constant(x.clone())).value();
        let s = self.config.structures.len();
        Ok(out
            .data()
            .chunks(s)
            .map(|row| {
                row.iter()
                    .zip(&self.config.normalization)
                    .map(|(v, n)| n.destandardize(v.to_f64_lossy()))
                    .collect()
            })
            .collect())
    }

    pub fn predict_attributes(&self, image: &Image) -> Result<PredictedAttributes> {
        let row = self.predict_batch(&Image::batch(&[image]))?.remove(0);
        Ok(PredictedAttributes {
            values: self.config.structures.iter().cloned().zip(row).collect(),
            source: AreaSource::Regressor,
        })
    }

    pub fn to_checkpoint(&self, graph_hash: &str) -> Result<Checkpoint> {
        Checkpoint::new("regressor", graph_hash, &self.config, &self.params)?
            .with_meta("role", &self.role)?
            .with_meta("seed", &self.seed)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("regressor")?;
        let mut m = Self::new(ck.config()?, ck.meta("role")?, ck.meta("seed")?)?;
        install(&mut m.params, ck.store()?)?;
        Ok(m)
    }
}

/// Replaces `dst`'s tensors after checking names and shapes agree.
pub(crate) fn install<T: Scalar>(dst: &mut ParamStore<T>, src: ParamStore<T>) -> Result<()> {
    if dst.names() != src.names() {
        return Err(Error::Checkpoint("parameter names do not match the configuration".into()));
    }
    for (a, b) in dst.tensors().iter().zip(src.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::Checkpoint("parameter shapes do not match the configuration".into()));
        }
    }
    *dst = src;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentorReport {
    /// Mean Dice coefficient of thresholded masks on the validation split.
    pub val_dice: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorReport {
    /// Validation MAPE (%) per structure.
    pub val_mape: BTreeMap<String, f64>,
    /// MAPE of predicting the training mean, per structure.
    pub baseline_mape: BTreeMap<String, f64>,
}

fn masks_of(obs: &Observation) -> Result<&SoftMask> {
    obs.masks.as_ref().ok_or_else(|| Error::Dataset {
        record: obs.id.clone(),
        detail: "no ground-truth masks".into(),
    })
}

fn finite_or_abort(stage: &str, epoch: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.into(),
            detail: format!("epoch {epoch}: loss {v}"),
        })
    }
}

/// Records whose every ground-truth mask is empty.
pub fn background_only(data: &[Observation]) -> Vec<String> {
    data.iter()
        .filter(|o| {
            o.masks
                .as_ref()
                .is_some_and(|m| m.grids.iter().all(|g| g.data.iter().all(|&v| v == 0.0)))
        })
        .map(|o| o.id.clone())
        .collect()
}

pub fn train_segmentor<T: Scalar>(
    model: Segmentor<T>,
    train: &[Observation],
    val: &[Observation],
    config: &AuxTrainConfig,
) -> Result<(Segmentor<T>, SegmentorReport)> {
    let mut model = model;
    let mut warnings = Vec::new();
    let empty = background_only(train);
    if !empty.is_empty() {
        let msg = format!("{} training record(s) have all-background masks, e.g. {}", empty.len(), empty[0]);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let structures = model.config.structures.clone();
    for o in train {
        if masks_of(o)?.structures != structures {
            return Err(Error::Dataset {
                record: o.id.clone(),
                detail: format!("mask structures differ from {structures:?}"),
            });
        }
    }
    let mut opt = Adam::new(&model.params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let obs: Vec<&Observation> = chunk.iter().map(|&i| &train[i]).collect();
            let masks: Vec<&SoftMask> = obs.iter().map(|o| masks_of(o)).collect::<Result<_>>()?;
            let tape = Tape::new();
            let p = model.params.bind(&tape, Binding::Trainable);
            let x = tape.constant(image_batch::<T>(&obs));
            let t = tape.constant(SoftMask::batch::<T>(&masks));
            let loss = dice_loss_on(model.probs_on(&p, x), t);
            finite_or_abort("segmentor training", epoch, loss.item().to_f64_lossy())?;
            let grads = p.grads(&tape.backward(loss));
            opt.step(&mut model.params, &grads);
        }
    }
    let val_dice = thresholded_dice(&model, val)?;
    Ok((model, SegmentorReport { val_dice, warnings }))
}

/// Mean Dice coefficient between `≥ 0.5` predicted masks and ground truth.
pub fn thresholded_dice<T: Scalar>(model: &Segmentor<T>, data: &[Observation]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for o in data {
        let gt = masks_of(o)?;
        let mut pred = model.predict_masks(&o.image)?;
        for g in pred.grids.iter_mut() {
            for v in g.data.iter_mut() {
                *v = if *v >= 0.5 { 1.0 } else { 0.0 };
            }
        }
        total += 1.0 - dice_loss(&pred, gt)?;
    }
    Ok(total / data.len() as f64)
}

pub fn train_regressor<T: Scalar>(
    model: Regressor<T>,
    train: &[Observation],
    val: &[Observation],
    config: &AuxTrainConfig,
) -> Result<(Regressor<T>, RegressorReport)> {
    let mut model = model;
    let structures = model.config.structures.clone();
    let norms = model.config.normalization.clone();
    let targets = |obs: &[&Observation]| -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(obs.len() * structures.len());
        for o in obs {
            for (s, n) in structures.iter().zip(&norms) {
                data.push(T::lit(n.standardize(o.attributes.get(s)?)));
            }
        }
        Ok(Tensor::from_vec(&[obs.len(), structures.len()], data))
    };
    let mut opt = Adam::new(&model.params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let obs: Vec<&Observation> = chunk.iter().map(|&i| &train[i]).collect();
            let tape = Tape::new();
            let p = model.params.bind(&tape, Binding::Trainable);
            let x = tape.constant(image_batch::<T>(&obs));
            let t = tape.constant(targets(&obs)?);
            let loss = (model.predict_on(&p, x) - t).square().mean();
            finite_or_abort("regressor training", epoch, loss.item().to_f64_lossy())?;
            let grads = p.grads(&tape.backward(loss));
            opt.step(&mut model.params, &grads);
        }
    }
    let val_mape = regressor_mape(&model, val)?;
    let mut baseline_mape = BTreeMap::new();
    for (s, n) in structures.iter().zip(&norms) {
        let truth = val.iter().map(|o| o.attributes.get(s)).collect::<Result<Vec<_>>>()?;
        let pred = vec![n.mean; truth.len()];
        baseline_mape.insert(s.clone(), crate::eval::mape(&pred, &truth)?);
    }
    Ok((
        model,
        RegressorReport {
            val_mape,
            baseline_mape,
        },
    ))
}

/// MAPE (%) of the regressor per structure over `data`.
pub fn regressor_mape<T: Scalar>(model: &Regressor<T>, data: &[Observation]) -> Result<BTreeMap<String, f64>> {
    let mut preds: Vec<Vec<f64>> = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let refs: Vec<&Observation> = chunk.iter().collect();
        preds.extend(model.predict_batch(&image_batch::<T>(&refs))?);
    }
    let mut out = BTreeMap::new();
    for (j, s) in model.config.structures.iter().enumerate() {
        let truth = data.iter().map(|o| o.attributes.get(s)).collect::<Result<Vec<_>>>()?;
        let pred: Vec<f64> = preds.iter().map(|r| r[j]).collect();
        out.insert(s.clone(), crate::eval::mape(&pred, &truth)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(grid: Vec<f32>, h: usize, w: usize) -> SoftMask {
        SoftMask::new(vec!["a".into()], vec![Image::new(h, w, grid)], 1.0).unwrap()
    }

    #[test]
    fn dice_edge_cases() {
        let a = mask(vec![1.0, 1.0, 0.0, 0.0], 2, 2);
        let b = mask(vec![0.0, 0.0, 1.0, 1.0], 2, 2);
        let c = mask(vec![0.0, 1.0, 1.0, 0.0], 2, 2);
        assert!(dice_loss(&a, &a).unwrap() < 1e-6);
        assert!((dice_loss(&a, &b).unwrap() - 1.0).abs() < 1e-6);
        assert!((dice_loss(&a, &c).unwrap() - 0.5).abs() < 1e-6);
        assert_eq!(dice_loss(&a, &c).unwrap(), dice_loss(&c, &a).unwrap());
    }

    #[test]
    fn soft_area_cases() {
        assert_eq!(soft_area(&mask(vec![0.0; 64], 8, 8), "a").unwrap(), 0.0);
        assert_eq!(soft_area(&mask(vec![1.0; 4096], 64, 64), "a").unwrap(), 4096.0);
        assert!(soft_area(&mask(vec![1.0; 4], 2, 2), "b").is_err());
    }

    #[test]
    fn tape_dice_matches_scalar_dice() {
        let a = mask(vec![0.9, 0.2, 0.4, 0.0], 2, 2);
        let b = mask(vec![1.0, 0.0, 1.0, 0.0], 2, 2);
        let tape = Tape::<f64>::new();
        let p = tape.constant(SoftMask::batch(&[&a]));
        let t = tape.constant(SoftMask::batch(&[&b]));
        let got = dice_loss_on(p, t).item();
        assert!((got - dice_loss(&a, &b).unwrap()).abs() < 1e-12);
    }

    fn seg(seed: u64) -> Segmentor<f32> {
        let cfg = SegmentorConfig {
            structures: vec!["a".into(), "b".into()],
            height: 8,
            width: 8,
            channels: 2,
            pixel_area: 1.0,
        };
        Segmentor::new(cfg, AuxRole::Finetune, seed).unwrap()
    }

    #[test]
    fn segmentor_contract() {
        let m = seg(0);
        let masks = m.predict_masks(&Image::zeros(8, 8)).unwrap();
        assert_eq!(masks.grids.len(), 2);
        assert!(masks.grids.iter().all(|g| g.data.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(seg(0).id(), seg(1).id());
        assert!(m.predict_masks(&Image::zeros(4, 4)).is_err());
    }

    #[test]
    fn regressor_outputs_are_finite() {
        let cfg = RegressorConfig {
            structures: vec!["a".into()],
            normalization: vec![Normalization { mean: 100.0, std: 10.0 }],
            height: 8,
            width: 8,
            channels: 2,
        };
        let m = Regressor::<f32>::new(cfg, AuxRole::Eval, 3).unwrap();
        let p = m.predict_attributes(&Image::zeros(8, 8)).unwrap();
        assert!(p.values["a"].is_finite());
        assert_eq!(p.source, AreaSource::Regressor);
    }
}
