//! Parent-conditioned hierarchical VAE for the image mechanism.
//!
//! Latent level `l` lives at resolution `H/2^l`. The encoder runs a
//! fine→coarse pyramid, the decoder runs coarse→fine; the standardised parent
//! vector is broadcast to every resolution and concatenated at every encoder
//! block, posterior head and decoder block. Priors are independent standard
//! normals per level and the likelihood is Gaussian with fixed scale.

use dscm_autograd::nn::Conv2d;
use dscm_autograd::{Adam, Binding, Bound, ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auxiliary::install;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{AttributeVector, CausalGraph, Observation};
use crate::image::Image;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const LEAK: f64 = 0.1;
const MIN_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HvaeConfig {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    /// Feature channels at each level, finest first.
    pub channels: Vec<usize>,
    pub latent_channels: usize,
    pub parent_dim: usize,
    pub sigma_x: f64,
}

impl HvaeConfig {
    pub fn new(height: usize, width: usize, parent_dim: usize) -> Self {
        Self {
            height,
            width,
            levels: 3,
            channels: vec![8, 16, 16],
            latent_channels: 2,
            parent_dim,
            sigma_x: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.levels.saturating_sub(1);
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "hvae: {} levels but {} channel widths",
                self.levels,
                self.channels.len()
            )));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "hvae: image {}x{} not divisible by {div}",
                self.height, self.width
            )));
        }
        if !(self.sigma_x > 0.0) {
            return Err(Error::Config("hvae: sigma_x must be positive".into()));
        }
        if self.latent_channels == 0 || self.parent_dim == 0 {
            return Err(Error::Config("hvae: latent and parent widths must be positive".into()));
        }
        Ok(())
    }

    /// `(height, width)` of latent level `l`.
    pub fn level_dims(&self, l: usize) -> (usize, usize) {
        (self.height >> l, self.width >> l)
    }
}

/// Per-level posterior parameters for a batch, `[N, zc, h_l, w_l]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentHierarchy<T: Scalar> {
    pub loc: Vec<Tensor<T>>,
    pub scale: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentHierarchy<T> {
    pub fn levels(&self) -> usize {
        self.loc.len()
    }

    /// `loc + scale·ε` with `ε` drawn from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor<T>> {
        self.loc
            .iter()
            .zip(&self.scale)
            .map(|(m, s)| {
                let eps = Tensor::<T>::randn(m.shape(), 1.0, rng);
                let noise = s.zip_map(&eps, |sd, e| sd * e);
                m.zip_map(&noise, |mu, d| mu + d)
            })
            .collect()
    }

    /// Latents of batch element `i`, each `[1, zc, h, w]`.
    pub fn element(&self, i: usize) -> LatentHierarchy<T> {
        let pick = |ts: &[Tensor<T>]| -> Vec<Tensor<T>> {
            ts.iter()
                .map(|t| {
                    let mut shape = t.shape().to_vec();
                    shape[0] = 1;
                    Tensor::from_vec(&shape, t.outer(i).to_vec())
                })
                .collect()
        };
        LatentHierarchy {
            loc: pick(&self.loc),
            scale: pick(&self.scale),
        }
    }
}

/// Negative ELBO of a batch, summed over pixels/sites and averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub kl: Vec<f64>,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn per_pixel(&self, pixels: usize) -> f64 {
        self.total / pixels as f64
    }
}

/// Batch-mean ELBO terms still on the tape.
pub struct ElboVars<'t, T: Scalar> {
    pub reconstruction: Var<'t, T>,
    pub kl: Vec<Var<'t, T>>,
    pub total: Var<'t, T>,
}

#[derive(Clone, Debug)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

impl Block {
    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let slope = T::lit(LEAK);
        let h = self.a.forward(p, x).leaky_relu(slope);
        self.b.forward(p, h).leaky_relu(slope)
    }
}

#[derive(Clone, Debug)]
pub struct Hvae<T: Scalar> {
    pub config: HvaeConfig,
    pub params: ParamStore<T>,
    enc: Vec<Block>,
    heads: Vec<Conv2d>,
    dec: Vec<Block>,
    out: Conv2d,
}

fn block<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut R,
) -> Block {
    Block {
        a: Conv2d::new(store, &format!("{name}.a"), cin, cout, 3, 1, rng),
        b: Conv2d::new(store, &format!("{name}.b"), cout, cout, 3, 1, rng),
    }
}

impl<T: Scalar> Hvae<T> {
    pub fn new(config: HvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (p, zc, c) = (config.parent_dim, config.latent_channels, &config.channels);
        let mut enc = Vec::new();
        let mut heads = Vec::new();
        for l in 0..config.levels {
            let cin = if l == 0 { 1 } else { c[l - 1] };
            enc.push(block(&mut params, &format!("enc{l}"), cin + p, c[l], &mut rng));
            heads.push(Conv2d::with_gain(
                &mut params,
                &format!("head{l}"),
                c[l] + p,
                2 * zc,
                3,
                1,
                0.1,
                &mut rng,
            ));
        }
        let mut dec = Vec::new();
        for l in 0..config.levels {
            let above = if l + 1 < config.levels { c[l + 1] } else { 0 };
            dec.push(block(&mut params, &format!("dec{l}"), zc + p + above, c[l], &mut rng));
        }
        let out = Conv2d::new(&mut params, "out", c[0], 1, 3, 1, &mut rng);
        Ok(Self {
            config,
            params,
            enc,
            heads,
            dec,
            out,
        })
    }

    /// Rebuilds the architecture for `config` and installs saved tensors.
    pub fn from_params(config: HvaeConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        install(&mut model.params, params)?;
        Ok(model)
    }

    pub fn to_checkpoint(&self, graph_hash: &str) -> Result<Checkpoint> {
        Checkpoint::new("hvae", graph_hash, &self.config, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("hvae")?;
        Self::from_params(ck.config()?, ck.store()?)
    }

    pub fn pixels(&self) -> usize {
        self.config.height * self.config.width
    }

    fn check_inputs(&self, x: &Tensor<T>, pa: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let want = [s.first().copied().unwrap_or(0), 1, self.config.height, self.config.width];
        if s != want {
            return Err(Error::Shape {
                expected: format!("{want:?}"),
                got: format!("{s:?}"),
            });
        }
        let want_pa = [s[0], self.config.parent_dim];
        if pa.shape() != want_pa {
            return Err(Error::Shape {
                expected: format!("{want_pa:?}"),
                got: format!("{:?}", pa.shape()),
            });
        }
        Ok(())
    }

    fn check_latents(&self, z: &[Tensor<T>], n: usize) -> Result<()> {
        if z.len() != self.config.levels {
            return Err(Error::Shape {
                expected: format!("{} latent levels", self.config.levels),
                got: format!("{}", z.len()),
            });
        }
        for (l, t) in z.iter().enumerate() {
            let (h, w) = self.config.level_dims(l);
            let want = [n, self.config.latent_channels, h, w];
            if t.shape() != want {
                return Err(Error::Shape {
                    expected: format!("level {l} {want:?}"),
                    got: format!("{:?}", t.shape()),
                });
            }
        }
        Ok(())
    }

    fn with_parents<'t>(x: Var<'t, T>, pa: Var<'t, T>) -> Var<'t, T> {
        let s = x.shape();
        x.tape().concat(&[x, pa.broadcast_spatial(s[2], s[3])])
    }

    /// Posterior (loc, scale) per level.
    pub fn encode_on<'t>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        pa: Var<'t, T>,
    ) -> Vec<(Var<'t, T>, Var<'t, T>)> {
        let zc = self.config.latent_channels;
        let mut h = x;
        let mut out = Vec::with_capacity(self.config.levels);
        for l in 0..self.config.levels {
            if l > 0 {
                h = h.avg_pool2();
            }
            h = self.enc[l].forward(p, Self::with_parents(h, pa));
            let q = self.heads[l].forward(p, Self::with_parents(h, pa));
            let loc = q.slice_channels(0, zc);
            let scale = q.slice_channels(zc, zc).softplus().add_scalar(T::lit(MIN_SCALE));
            out.push((loc, scale));
        }
        out
    }

    /// Likelihood mean in (0, 1), `[N, 1, H, W]`.
    pub fn decode_on<'t>(&self, p: &Bound<'t, T>, z: &[Var<'t, T>], pa: Var<'t, T>) -> Var<'t, T> {
        let mut d: Option<Var<'t, T>> = None;
        for l in (0..self.config.levels).rev() {
            let mut parts = vec![z[l]];
            if let Some(above) = d {
                parts.push(above.upsample2());
            }
            let input = Self::with_parents(z[l].tape().concat(&parts), pa);
            d = Some(self.dec[l].forward(p, input));
        }
        self.out.forward(p, d.expect("at least one level")).sigmoid()
    }

    /// Negative ELBO terms with reparameterised posterior samples `loc + scale·eps`.
    pub fn elbo_on<'t>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        pa: Var<'t, T>,
        eps: &[Tensor<T>],
    ) -> ElboVars<'t, T> {
        let tape = x.tape();
        let n = x.shape()[0];
        let post = self.encode_on(p, x, pa);
        let mut z = Vec::with_capacity(post.len());
        let mut kl = Vec::with_capacity(post.len());
        for ((loc, scale), e) in post.iter().zip(eps) {
            z.push(*loc + *scale * tape.constant(e.clone()));
            kl.push(kl_standard_normal(*loc, *scale).scale(T::lit(1.0 / n as f64)));
        }
        let mean = self.decode_on(p, &z, pa);
        let reconstruction = gaussian_nll(x, mean, self.config.sigma_x).scale(T::lit(1.0 / n as f64));
        let mut total = reconstruction;
        for k in &kl {
            total = total + *k;
        }
        ElboVars {
            reconstruction,
            kl,
            total,
        }
    }

    pub fn encode(&self, x: &Tensor<T>, pa: &Tensor<T>) -> Result<LatentHierarchy<T>> {
        self.check_inputs(x, pa)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, Binding::Frozen);
        let post = self.encode_on(&p, tape.constant(x.clone()), tape.constant(pa.clone()));
        Ok(LatentHierarchy {
            loc: post.iter().map(|(m, _)| (*m.value()).clone()).collect(),
            scale: post.iter().map(|(_, s)| (*s.value()).clone()).collect(),
        })
    }

    /// Decoded image mean clamped to `[0, 1]`, `[N, 1, H, W]`.
    pub fn decode(&self, z: &[Tensor<T>], pa: &Tensor<T>) -> Result<Tensor<T>> {
        let n = pa.shape().first().copied().unwrap_or(0);
        self.check_latents(z, n)?;
        if pa.shape() != [n, self.config.parent_dim] {
            return Err(Error::Shape {
                expected: format!("[{n}, {}]", self.config.parent_dim),
                got: format!("{:?}", pa.shape()),
            });
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, Binding::Frozen);
        let zs: Vec<_> = z.iter().map(|t| tape.constant(t.clone())).collect();
        let mean = self.decode_on(&p, &zs, tape.constant(pa.clone()));
        Ok(mean.value().map(|v| v.max(T::zero()).min(T::one())))
    }

    /// Negative ELBO with posterior samples drawn from `rng`.
    pub fn elbo<R: Rng + ?Sized>(&self, x: &Tensor<T>, pa: &Tensor<T>, rng: &mut R) -> Result<ElboBreakdown> {
        self.check_inputs(x, pa)?;
        let eps = self.draw_eps(x.shape()[0], rng);
        let tape = Tape::new();
        let p = self.params.bind(&tape, Binding::Frozen);
        let e = self.elbo_on(&p, tape.constant(x.clone()), tape.constant(pa.clone()), &eps);
        breakdown(&e)
    }

    pub fn draw_eps<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Tensor<T>> {
        (0..self.config.levels)
            .map(|l| {
                let (h, w) = self.config.level_dims(l);
                Tensor::randn(&[n, self.config.latent_channels, h, w], 1.0, rng)
            })
            .collect()
    }
}

pub(crate) fn breakdown<T: Scalar>(e: &ElboVars<'_, T>) -> Result<ElboBreakdown> {
    let reconstruction = e.reconstruction.item().to_f64_lossy();
    if !reconstruction.is_finite() {
        return Err(Error::NonFinite {
            stage: "hvae reconstruction".into(),
            detail: format!("{reconstruction}"),
        });
    }
    let mut kl = Vec::with_capacity(e.kl.len());
    for (l, k) in e.kl.iter().enumerate() {
        let v = k.item().to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                stage: format!("hvae kl level {l}"),
                detail: format!("{v}"),
            });
        }
        kl.push(v);
    }
    Ok(ElboBreakdown {
        reconstruction,
        total: reconstruction + kl.iter().sum::<f64>(),
        kl,
    })
}

/// `Σ KL(N(loc, scale²) ‖ N(0, 1))` over all sites.
pub fn kl_standard_normal<'t, T: Scalar>(loc: Var<'t, T>, scale: Var<'t, T>) -> Var<'t, T> {
    let half = T::lit(0.5);
    ((scale.square() + loc.square()).add_scalar(-T::one()).scale(half) - scale.ln()).sum()
}

/// `Σ −ln N(x; mean, σ²)` over all pixels.
pub fn gaussian_nll<'t, T: Scalar>(x: Var<'t, T>, mean: Var<'t, T>, sigma: f64) -> Var<'t, T> {
    let n = x.value().len() as f64;
    (x - mean)
        .square()
        .scale(T::lit(0.5 / (sigma * sigma)))
        .sum()
        .add_scalar(T::lit(n * (sigma.ln() + HALF_LN_2PI)))
}

/// `[N, 1, H, W]` image batch.
pub fn image_batch<T: Scalar>(obs: &[&Observation]) -> Tensor<T> {
    let images: Vec<&Image> = obs.iter().map(|o| &o.image).collect();
    Image::batch(&images)
}

/// `[N, P]` standardised image-parent batch.
pub fn parent_batch<T: Scalar>(graph: &CausalGraph, attrs: &[&AttributeVector]) -> Result<Tensor<T>> {
    let p = graph.image_parents.len();
    let mut data = Vec::with_capacity(attrs.len() * p);
    for a in attrs {
        data.extend(graph.image_parent_vector(a)?.into_iter().map(T::lit));
    }
    Ok(Tensor::from_vec(&[attrs.len(), p], data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear KL warm-up length in optimiser steps (0 disables).
    pub kl_warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for HvaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 2e-3,
            kl_warmup_steps: 200,
            clip_norm: 100.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HvaeTrainReport {
    /// Per-pixel negative ELBO on the validation split before training.
    pub initial_val_nelbo: f64,
    /// Per-pixel negative ELBO on the validation split after each epoch.
    pub val_nelbo: Vec<f64>,
    pub steps: u64,
}

impl HvaeTrainReport {
    pub fn final_val_nelbo(&self) -> f64 {
        self.val_nelbo.last().copied().unwrap_or(self.initial_val_nelbo)
    }
}

/// Mean per-pixel negative ELBO over `data` with a fixed evaluation seed.
pub fn mean_nelbo<T: Scalar>(model: &Hvae<T>, graph: &CausalGraph, data: &[Observation], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in data.chunks(64) {
        let refs: Vec<&Observation> = chunk.iter().collect();
        let x = image_batch::<T>(&refs);
        let attrs: Vec<_> = chunk.iter().map(|o| &o.attributes).collect();
        let pa = parent_batch::<T>(graph, &attrs)?;
        total += model.elbo(&x, &pa, &mut rng)?.total * chunk.len() as f64;
    }
    Ok(total / (data.len().max(1) * model.pixels()) as f64)
}

/// Likelihood training; returns the trained model, the optimiser and a report.
pub fn train_hvae<T: Scalar>(
    model: Hvae<T>,
    train: &[Observation],
    val: &[Observation],
    graph: &CausalGraph,
    config: &HvaeTrainConfig,
) -> Result<(Hvae<T>, Adam<T>, HvaeTrainReport)> {
    let mut model = model;
    let mut opt = Adam::new(&model.params, config.lr).with_clip(config.clip_norm);
    let eval_seed = config.seed ^ 0x5eed;
    let initial_val_nelbo = mean_nelbo(&model, graph, val, eval_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut val_nelbo = Vec::with_capacity(config.epochs);
    let pixels = model.pixels() as f64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let obs: Vec<&Observation> = chunk.iter().map(|&i| &train[i]).collect();
            let x = image_batch::<T>(&obs);
            let attrs: Vec<_> = obs.iter().map(|o| &o.attributes).collect();
            let pa = parent_batch::<T>(graph, &attrs)?;
            let eps = model.draw_eps(obs.len(), &mut rng);
            let beta = if config.kl_warmup_steps == 0 {
                1.0
            } else {
                ((opt.steps_taken() + 1) as f64 / config.kl_warmup_steps as f64).min(1.0)
            };
            let tape = Tape::new();
            let p = model.params.bind(&tape, Binding::Trainable);
            let e = model.elbo_on(&p, tape.constant(x), tape.constant(pa), &eps);
            let mut loss = e.reconstruction;
            for k in &e.kl {
                loss = loss + k.scale(T::lit(beta));
            }
            let loss = loss.scale(T::lit(1.0 / pixels));
            let v = loss.item().to_f64_lossy();
            if !v.is_finite() {
                let terms = breakdown(&e).err().map(|e| e.to_string()).unwrap_or_default();
                return Err(Error::NonFinite {
                    stage: "hvae training".into(),
                    detail: format!("epoch {epoch}, step {}: loss {v} {terms}", opt.steps_taken()),
                });
            }
            let grads = p.grads(&tape.backward(loss));
            opt.step(&mut model.params, &grads);
        }
        let v = mean_nelbo(&model, graph, val, eval_seed)?;
        log::info!("hvae epoch {epoch}: val nelbo/px {v:.4}");
        val_nelbo.push(v);
    }
    let steps = opt.steps_taken();
    Ok((
        model,
        opt,
        HvaeTrainReport {
            initial_val_nelbo,
            val_nelbo,
            steps,
        },
    ))
}
