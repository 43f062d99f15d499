//! DCGAN-style convolutional VAE: Gaussian posterior heads, tanh decoder,
//! closed-form KL to the standard normal prior, Gaussian likelihood and the
//! β-weighted training objective.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Real, Tensor};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;
const KERNEL: usize = 4;

/// Omitted fields take their defaults when deserialized; an omitted
/// `likelihood_sigma` follows `beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PartialModelConfig")]
pub struct ModelConfig {
    /// Square input side in pixels; a power of two, at least 16.
    pub image_size: usize,
    pub in_channels: usize,
    /// Width of the first encoder block; doubles per block.
    pub base_channels: usize,
    pub latent_dim: usize,
    /// Weight of the KL term in the training loss.
    pub beta: f64,
    /// Fixed decoder standard deviation used by the likelihood scores.
    pub likelihood_sigma: f64,
    /// Batch normalization in hidden blocks.
    pub batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(128, 3, 64, 300, 0.01)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialModelConfig {
    image_size: Option<usize>,
    in_channels: Option<usize>,
    base_channels: Option<usize>,
    latent_dim: Option<usize>,
    beta: Option<f64>,
    likelihood_sigma: Option<f64>,
    batch_norm: Option<bool>,
}

impl From<PartialModelConfig> for ModelConfig {
    fn from(p: PartialModelConfig) -> Self {
        let d = ModelConfig::default();
        let mut c = ModelConfig::new(
            p.image_size.unwrap_or(d.image_size),
            p.in_channels.unwrap_or(d.in_channels),
            p.base_channels.unwrap_or(d.base_channels),
            p.latent_dim.unwrap_or(d.latent_dim),
            p.beta.unwrap_or(d.beta),
        )
        .with_batch_norm(p.batch_norm.unwrap_or(d.batch_norm));
        if let Some(s) = p.likelihood_sigma {
            c.likelihood_sigma = s;
        }
        c
    }
}

impl ModelConfig {
    /// Config with `likelihood_sigma = sqrt(beta / 2)`, which makes the
    /// training loss an affine transform of the Gaussian ELBO.
    pub fn new(
        image_size: usize,
        in_channels: usize,
        base_channels: usize,
        latent_dim: usize,
        beta: f64,
    ) -> Self {
        Self {
            image_size,
            in_channels,
            base_channels,
            latent_dim,
            beta,
            likelihood_sigma: (beta / 2.0).sqrt(),
            batch_norm: true,
        }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn num_blocks(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 2
    }

    pub fn data_dim(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "in_channels, base_channels and latent_dim must be positive".into(),
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.likelihood_sigma > 0.0 && self.likelihood_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "likelihood_sigma must be positive, got {}",
                self.likelihood_sigma
            )));
        }
        Ok(())
    }

    fn channels(&self, block: usize) -> usize {
        self.base_channels << block
    }
}

/// Diagonal Gaussian `N(mean, diag(exp(log_var)))`, one row per batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag<T> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Real> GaussianDiag<T> {
    pub fn new(mean: Tensor<T>, log_var: Tensor<T>) -> Result<Self> {
        if mean.shape() != log_var.shape() || mean.shape().len() != 2 {
            return Err(Error::dim(format!(
                "GaussianDiag needs matching [B,M] shapes, got {:?} and {:?}",
                mean.shape(),
                log_var.shape()
            )));
        }
        Ok(Self { mean, log_var })
    }

    /// The standard normal prior for `batch` rows of width `dim`.
    pub fn standard(batch: usize, dim: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[batch, dim]),
            log_var: Tensor::zeros(&[batch, dim]),
        }
    }

    pub fn batch(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mean.shape()[1]
    }

    pub fn row(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let m = self.dim();
        let f = |t: &Tensor<T>| {
            t.data()[i * m..(i + 1) * m]
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect()
        };
        (f(&self.mean), f(&self.log_var))
    }
}

/// `z = mean + eps · exp(log_var / 2)`.
pub fn reparameterize<T: Real>(q: &GaussianDiag<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    if eps.shape() != q.mean.shape() {
        return Err(Error::dim(format!(
            "eps shape {:?} does not match posterior {:?}",
            eps.shape(),
            q.mean.shape()
        )));
    }
    let half = T::c(0.5);
    let data = q
        .mean
        .data()
        .iter()
        .zip(q.log_var.data())
        .zip(eps.data())
        .map(|((m, lv), e)| *m + *e * (*lv * half).exp())
        .collect();
    Tensor::new(q.mean.shape().to_vec(), data)
}

/// KL(N(mean, exp(log_var)) ‖ N(0, 1)) summed over one row.
pub fn kl_standard_normal(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Per-item KL(q ‖ N(0, I)).
pub fn kl_divergence<T: Real>(q: &GaussianDiag<T>) -> Tensor<T> {
    let b = q.batch();
    Tensor::from_fn(&[b], |i| {
        let (m, lv) = q.row(i);
        T::c(kl_standard_normal(&m, &lv))
    })
}

/// `log N(x; mean, sigma² I)` for flat vectors.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let n = x.len() as f64;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * n * (2.0 * PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
}

/// Per-item `log N(x; mu_dec, sigma² I)` over all non-batch dimensions.
pub fn gaussian_log_likelihood<T: Real>(
    x: &Tensor<T>,
    mu_dec: &Tensor<T>,
    sigma: f64,
) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(Error::arg(format!("sigma must be positive, got {sigma}")));
    }
    if x.shape() != mu_dec.shape() || x.shape().is_empty() {
        return Err(Error::dim(format!(
            "likelihood shapes {:?} and {:?}",
            x.shape(),
            mu_dec.shape()
        )));
    }
    let b = x.shape()[0];
    let n = x.numel() / b.max(1);
    let xs = x.to_f64_vec();
    let ms = mu_dec.to_f64_vec();
    Ok(Tensor::from_fn(&[b], |i| {
        T::c(gaussian_log_density(
            &xs[i * n..(i + 1) * n],
            &ms[i * n..(i + 1) * n],
            sigma,
        ))
    }))
}

/// Whether hidden batch normalization uses batch statistics and parameters
/// are differentiated (training) or running statistics with frozen
/// parameters (evaluation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics gathered during a training-mode forward pass, keyed by
/// normalization layer.
pub type LayerStats<T> = Vec<(String, BatchStats<T>)>;

/// Scalar loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub loss: T,
    /// Mean over items of the squared reconstruction error.
    pub reconstruction: T,
    /// Mean over items of KL(q(z|x) ‖ p(z)).
    pub kl: T,
}

/// Handles to the loss values recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub loss: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub mean: Var,
    pub log_var: Var,
    pub reconstruction_mean: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel<T> {
    pub config: ModelConfig,
    pub params: ParameterStore<T>,
    /// Normalization running statistics (`*.running_mean`, `*.running_var`).
    pub buffers: BTreeMap<String, Tensor<T>>,
}

fn normal_tensor<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    Tensor::from_fn(shape, |_| T::c(dist.sample(rng)))
}

struct Forward<'a, T> {
    model: &'a VaeModel<T>,
    mode: Mode,
    stats: LayerStats<T>,
}

impl<T: Real> Forward<'_, T> {
    fn p(&self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        match self.mode {
            Mode::Train => tape.param(&self.model.params, name),
            Mode::Eval => tape.frozen_param(&self.model.params, name),
        }
    }

    fn opt_bias(&self, tape: &mut Tape<T>, layer: &str) -> Result<Option<Var>> {
        let name = format!("{layer}.bias");
        if self.model.params.get(&name).is_some() {
            Ok(Some(self.p(tape, &name)?))
        } else {
            Ok(None)
        }
    }

    fn norm(&mut self, tape: &mut Tape<T>, layer: &str, h: Var) -> Result<Var> {
        let bn = format!("{layer}.bn");
        if self.model.params.get(&format!("{bn}.gamma")).is_none() {
            return Ok(h);
        }
        let gamma = self.p(tape, &format!("{bn}.gamma"))?;
        let beta = self.p(tape, &format!("{bn}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(h, gamma, beta, T::c(BN_EPS))?;
                self.stats.push((bn, stats));
                Ok(y)
            }
            Mode::Eval => {
                let rm = &self.model.buffers[&format!("{bn}.running_mean")];
                let rv = &self.model.buffers[&format!("{bn}.running_var")];
                tape.batch_norm_eval(h, gamma, beta, rm.data(), rv.data(), T::c(BN_EPS))
            }
        }
    }

    fn encode(&mut self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let cfg = &self.model.config;
        let s = tape.shape(x).to_vec();
        if s.len() != 4
            || s[1] != cfg.in_channels
            || s[2] != cfg.image_size
            || s[3] != cfg.image_size
        {
            return Err(Error::dim(format!(
                "encoder expects [B,{},{},{}], got {:?}",
                cfg.in_channels, cfg.image_size, cfg.image_size, s
            )));
        }
        let batch = s[0];
        let latent = cfg.latent_dim;
        let mut h = x;
        for i in 0..cfg.num_blocks() {
            let layer = format!("enc.{i}");
            let w = self.p(tape, &format!("{layer}.weight"))?;
            let b = self.opt_bias(tape, &layer)?;
            h = tape.conv2d(h, w, b, 2, 1)?;
            h = self.norm(tape, &layer, h)?;
            h = tape.leaky_relu(h, T::c(LEAKY_SLOPE))?;
        }
        let mut head = |name: &str| -> Result<Var> {
            let w = self.p(tape, &format!("enc.{name}.weight"))?;
            let b = self.p(tape, &format!("enc.{name}.bias"))?;
            let y = tape.conv2d(h, w, Some(b), 1, 0)?;
            tape.reshape(y, &[batch, latent])
        };
        let mean = head("mean")?;
        let raw = head("logvar")?;
        let log_var = tape.clamp(raw, T::c(LOG_VAR_MIN), T::c(LOG_VAR_MAX))?;
        Ok((mean, log_var))
    }

    fn decode(&mut self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let s = tape.shape(z).to_vec();
        if s.len() != 2 || s[1] != cfg.latent_dim {
            return Err(Error::dim(format!(
                "decoder expects [B,{}], got {:?}",
                cfg.latent_dim, s
            )));
        }
        let n = cfg.num_blocks();
        let mut h = tape.reshape(z, &[s[0], cfg.latent_dim, 1, 1])?;
        let w = self.p(tape, "dec.proj.weight")?;
        let b = self.opt_bias(tape, "dec.proj")?;
        h = tape.conv_transpose2d(h, w, b, 1, 0)?;
        h = self.norm(tape, "dec.proj", h)?;
        h = tape.leaky_relu(h, T::zero())?;
        for j in 0..n {
            let layer = format!("dec.{j}");
            let w = self.p(tape, &format!("{layer}.weight"))?;
            let b = self.opt_bias(tape, &layer)?;
            h = tape.conv_transpose2d(h, w, b, 2, 1)?;
            if j + 1 < n {
                h = self.norm(tape, &layer, h)?;
                h = tape.leaky_relu(h, T::zero())?;
            } else {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

impl<T: Real> VaeModel<T> {
    /// Freshly initialized model: conv weights `N(0, 0.02²)`, biases zero,
    /// normalization scale one and shift zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let mut buffers = BTreeMap::new();
        let n = config.num_blocks();
        let bn = config.batch_norm;

        let mut add_bn = |params: &mut ParameterStore<T>, layer: &str, c: usize| -> Result<()> {
            params.insert(format!("{layer}.bn.gamma"), Tensor::full(&[c], T::one()))?;
            params.insert(format!("{layer}.bn.beta"), Tensor::zeros(&[c]))?;
            buffers.insert(format!("{layer}.bn.running_mean"), Tensor::zeros(&[c]));
            buffers.insert(format!("{layer}.bn.running_var"), Tensor::full(&[c], T::one()));
            Ok(())
        };

        for i in 0..n {
            let layer = format!("enc.{i}");
            let cin = if i == 0 {
                config.in_channels
            } else {
                config.channels(i - 1)
            };
            let cout = config.channels(i);
            params.insert(
                format!("{layer}.weight"),
                normal_tensor(&[cout, cin, KERNEL, KERNEL], &mut rng),
            )?;
            // the first block is never normalized (DCGAN)
            if bn && i > 0 {
                add_bn(&mut params, &layer, cout)?;
            } else {
                params.insert(format!("{layer}.bias"), Tensor::zeros(&[cout]))?;
            }
        }
        let top = config.channels(n - 1);
        for head in ["mean", "logvar"] {
            params.insert(
                format!("enc.{head}.weight"),
                normal_tensor(&[config.latent_dim, top, KERNEL, KERNEL], &mut rng),
            )?;
            params.insert(format!("enc.{head}.bias"), Tensor::zeros(&[config.latent_dim]))?;
        }

        params.insert(
            "dec.proj.weight",
            normal_tensor(&[config.latent_dim, top, KERNEL, KERNEL], &mut rng),
        )?;
        if bn {
            add_bn(&mut params, "dec.proj", top)?;
        } else {
            params.insert("dec.proj.bias", Tensor::zeros(&[top]))?;
        }
        for j in 0..n {
            let layer = format!("dec.{j}");
            let cin = config.channels(n - 1 - j);
            let last = j + 1 == n;
            let cout = if last {
                config.in_channels
            } else {
                config.channels(n - 2 - j)
            };
            params.insert(
                format!("{layer}.weight"),
                normal_tensor(&[cin, cout, KERNEL, KERNEL], &mut rng),
            )?;
            if bn && !last {
                add_bn(&mut params, &layer, cout)?;
            } else {
                params.insert(format!("{layer}.bias"), Tensor::zeros(&[cout]))?;
            }
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    fn forward(&self, mode: Mode) -> Forward<'_, T> {
        Forward {
            model: self,
            mode,
            stats: Vec::new(),
        }
    }

    /// Record the encoder on `tape`; returns `(mean, log_var)` handles of
    /// shape `[B, M]` plus training-mode batch statistics.
    pub fn encode_on(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<(Var, Var, LayerStats<T>)> {
        let mut f = self.forward(mode);
        let (m, lv) = f.encode(tape, x)?;
        Ok((m, lv, f.stats))
    }

    /// Record the decoder on `tape`; returns the `[B,C,H,W]` mean image.
    pub fn decode_on(&self, tape: &mut Tape<T>, z: Var, mode: Mode) -> Result<(Var, LayerStats<T>)> {
        let mut f = self.forward(mode);
        let y = f.decode(tape, z)?;
        Ok((y, f.stats))
    }

    /// Posterior `q(z|x)` with frozen normalization statistics.
    pub fn encode(&self, x: &Tensor<T>) -> Result<GaussianDiag<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let (m, lv, _) = self.encode_on(&mut tape, xv, Mode::Eval)?;
        GaussianDiag::new(tape.tensor(m), tape.tensor(lv))
    }

    /// Decoder mean `μ_dec(z)` with frozen normalization statistics.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z)?;
        let (y, _) = self.decode_on(&mut tape, zv, Mode::Eval)?;
        Ok(tape.tensor(y))
    }

    /// Record the training objective: per item, squared error plus β·KL,
    /// averaged over the batch. `eps` supplies one standard-normal draw per
    /// item.
    pub fn loss_on(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        eps: &Tensor<T>,
        mode: Mode,
    ) -> Result<(LossVars, LayerStats<T>)> {
        let xv = tape.constant(x)?;
        let (mean, log_var, mut stats) = self.encode_on(tape, xv, mode)?;
        if eps.shape() != tape.shape(mean) {
            return Err(Error::dim(format!(
                "eps shape {:?}, posterior {:?}",
                eps.shape(),
                tape.shape(mean)
            )));
        }
        let e = tape.constant(eps)?;
        let half = tape.scale(log_var, T::c(0.5))?;
        let std = tape.exp(half)?;
        let noise = tape.mul(e, std)?;
        let z = tape.add(mean, noise)?;
        let (recon, dec_stats) = self.decode_on(tape, z, mode)?;
        stats.extend(dec_stats);

        let diff = tape.sub(xv, recon)?;
        let sq = tape.square(diff)?;
        let sse = tape.sum(sq, &[1, 2, 3])?;

        let m2 = tape.square(mean)?;
        let var = tape.exp(log_var)?;
        let t = tape.add(m2, var)?;
        let t = tape.sub(t, log_var)?;
        let t = tape.add_scalar(t, -T::one())?;
        let ksum = tape.sum(t, &[1])?;
        let kl = tape.scale(ksum, T::c(0.5))?;

        let weighted = tape.scale(kl, T::c(self.config.beta))?;
        let per_item = tape.add(sse, weighted)?;
        let loss = tape.mean_all(per_item)?;
        let reconstruction = tape.mean_all(sse)?;
        let kl_mean = tape.mean_all(kl)?;
        Ok((
            LossVars {
                loss,
                reconstruction,
                kl: kl_mean,
                mean,
                log_var,
                reconstruction_mean: recon,
            },
            stats,
        ))
    }

    /// Fold training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &LayerStats<T>) {
        let m = T::c(BN_MOMENTUM);
        let keep = T::one() - m;
        for (layer, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{layer}.{suffix}")) {
                    for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                        *r = keep * *r + m * *b;
                    }
                }
            }
        }
    }
}

/// Value of the training objective for one batch (training-mode
/// normalization, no parameter or statistics update).
pub fn training_loss<T: Real>(
    model: &VaeModel<T>,
    x: &Tensor<T>,
    eps: &Tensor<T>,
) -> Result<LossParts<T>> {
    let mut tape = Tape::new();
    let (vars, _) = model.loss_on(&mut tape, x, eps, Mode::Train)?;
    Ok(LossParts {
        loss: tape.value(vars.loss)[0],
        reconstruction: tape.value(vars.reconstruction)[0],
        kl: tape.value(vars.kl)[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(bn: bool) -> VaeModel<f64> {
        VaeModel::new(ModelConfig::new(16, 3, 4, 5, 0.01).with_batch_norm(bn), 3).unwrap()
    }

    #[test]
    fn config_rules() {
        assert_eq!(ModelConfig::default().num_blocks(), 5);
        assert_eq!(ModelConfig::new(32, 3, 8, 4, 0.01).num_blocks(), 3);
        assert!(ModelConfig::new(24, 3, 8, 4, 0.01).validate().is_err());
        assert!(ModelConfig::new(8, 3, 8, 4, 0.01).validate().is_err());
        assert!(ModelConfig::new(16, 3, 8, 4, 0.0).validate().is_err());
        assert!(ModelConfig::new(16, 3, 8, 0, 0.1).validate().is_err());
        let c = ModelConfig::new(16, 3, 8, 4, 0.02);
        assert!((c.likelihood_sigma - 0.1).abs() < 1e-15);
    }

    #[test]
    fn partial_config_json() {
        let c: ModelConfig = serde_json::from_str(r#"{"image_size": 32, "beta": 0.5}"#).unwrap();
        assert_eq!(c.image_size, 32);
        assert_eq!(c.latent_dim, 300);
        assert!((c.likelihood_sigma - 0.5).abs() < 1e-15);
        let full = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&full).unwrap(), c);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"latent": 3}"#).is_err());
    }

    #[test]
    fn architecture_shapes() {
        for size in [16usize, 32, 64] {
            let cfg = ModelConfig::new(size, 3, 2, 7, 0.01);
            let model = VaeModel::<f64>::new(cfg.clone(), 0).unwrap();
            let blocks = (0..)
                .take_while(|i| model.params.get(&format!("enc.{i}.weight")).is_some())
                .count();
            assert_eq!(blocks, size.trailing_zeros() as usize - 2);
            let x = Tensor::zeros(&[2, 3, size, size]);
            let q = model.encode(&x).unwrap();
            assert_eq!(q.mean.shape(), [2, 7]);
            let y = model.decode(&q.mean).unwrap();
            assert_eq!(y.shape(), [2, 3, size, size]);
        }
    }

    #[test]
    fn wrong_input_sizes() {
        let m = tiny(true);
        assert!(matches!(
            m.encode(&Tensor::zeros(&[1, 3, 32, 32])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            m.decode(&Tensor::zeros(&[1, 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn reparameterize_cases() {
        let q = GaussianDiag::new(
            Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap(),
            Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap(),
        )
        .unwrap();
        assert_eq!(reparameterize(&q, &Tensor::zeros(&[1, 3])).unwrap(), q.mean);
        let e = Tensor::new(vec![1, 3], vec![0.25, -1.5, 3.0]).unwrap();
        let std = GaussianDiag::<f64>::standard(1, 3);
        assert_eq!(reparameterize(&std, &e).unwrap(), e);
        assert!(reparameterize(&q, &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn kl_analytic_cases() {
        let prior = GaussianDiag::<f64>::standard(2, 4);
        assert_eq!(kl_divergence(&prior).data(), [0.0, 0.0]);
        let q = GaussianDiag::new(
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
        )
        .unwrap();
        assert!((kl_divergence(&q).data()[0] - 0.5f64).abs() < 1e-12);
        let q = GaussianDiag::new(
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![2f64.ln()]).unwrap(),
        )
        .unwrap();
        // ½(2 − 1 − ln 2)
        assert!((kl_divergence(&q).data()[0] - 0.153426).abs() < 1e-6);
    }

    #[test]
    fn likelihood_cases() {
        let x = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        let ll = gaussian_log_likelihood(&x, &x, 1.0).unwrap();
        assert!((ll.data()[0] + 0.918939f64).abs() < 1e-6);
        let mu = Tensor::new(vec![1, 1], vec![1.3]).unwrap();
        let ll = gaussian_log_likelihood(&x, &mu, 1.0).unwrap();
        assert!((ll.data()[0] + 1.418939f64).abs() < 1e-6);
        assert!(matches!(
            gaussian_log_likelihood(&x, &mu, 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn fresh_model_is_finite_and_clamped() {
        let m = tiny(true);
        let x = Tensor::from_fn(&[3, 3, 16, 16], |i| ((i as f64) * 0.37).sin());
        let q = m.encode(&x).unwrap();
        assert!(q.mean.is_finite());
        assert!(q
            .log_var
            .data()
            .iter()
            .all(|v| (LOG_VAR_MIN..=LOG_VAR_MAX).contains(v)));
        let y = m.decode(&q.mean).unwrap();
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_inputs_identical_rows() {
        let m = tiny(true);
        let one = Tensor::from_fn(&[3, 16, 16], |i| ((i as f64) * 0.11).cos());
        let x = Tensor::stack(&[&one, &one]).unwrap();
        let q = m.encode(&x).unwrap();
        assert_eq!(q.row(0), q.row(1));
        let y = m.decode(&q.mean).unwrap();
        assert_eq!(y.index_first(0).unwrap(), y.index_first(1).unwrap());
    }

    #[test]
    fn loss_vanishes_in_isolation() {
        // β = 0: loss is exactly the mean squared-error sum
        let mut m = VaeModel::<f64>::new(ModelConfig::new(16, 1, 2, 3, 0.5), 1).unwrap();
        m.config.beta = 0.0;
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i as f64) * 0.05).sin() * 0.5);
        let eps = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1);
        let parts = training_loss(&m, &x, &eps).unwrap();
        assert_eq!(parts.loss, parts.reconstruction);
        assert!(parts.kl > 0.0);
    }

    #[test]
    fn running_stats_update() {
        let mut m = tiny(true);
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i as f64) * 0.21).sin());
        let eps = Tensor::zeros(&[2, 5]);
        let mut tape = Tape::new();
        let (_, stats) = m.loss_on(&mut tape, &x, &eps, Mode::Train).unwrap();
        assert!(!stats.is_empty());
        let before = m.buffers.clone();
        m.update_running_stats(&stats);
        assert_ne!(before, m.buffers);
        let mut tape = Tape::new();
        let (_, stats) = m.loss_on(&mut tape, &x, &eps, Mode::Eval).unwrap();
        assert!(stats.is_empty());
    }
}
