//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vae_anomaly::autodiff::Tape;
use vae_anomaly::model::{training_loss, Mode, ModelConfig, VaeModel};
use vae_anomaly::scores::LatentModel;
use vae_anomaly::Tensor;

pub fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Result of comparing backprop against central finite differences for one
/// parameter tensor.
pub struct GradCheck {
    pub name: String,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)
    pub relative_error: f64,
    pub numel: usize,
}

/// Central finite differences (step `h`) of the training loss with respect
/// to every scalar of every parameter.
pub fn gradient_check(
    model: &VaeModel<f64>,
    x: &Tensor<f64>,
    eps: &Tensor<f64>,
    h: f64,
) -> Vec<GradCheck> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let (vars, _) = m.loss_on(&mut tape, x, eps, Mode::Train).unwrap();
    tape.backward(vars.loss, &mut m.params).unwrap();
    let names: Vec<String> = m.params.names().cloned().collect();
    let mut out = Vec::new();
    for name in names {
        let analytic = m.params.get(&name).unwrap().grad().unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        let mut probe = model.clone();
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = probe.params.get(&name).unwrap().data()[i];
            probe.params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = training_loss(&probe, x, eps).unwrap().loss;
            probe.params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = training_loss(&probe, x, eps).unwrap().loss;
            probe.params.get_mut(&name).unwrap().data_mut()[i] = orig;
            *n = (up - down) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
        out.push(GradCheck {
            name,
            relative_error: norm(&diff) / scale,
            numel: analytic.len(),
        });
    }
    out
}

/// Small model (16×16 RGB, M = 4, width 8) with weights moved away from
/// the N(0, 0.02) init so every path carries signal.
pub fn tiny_model(seed: u64) -> VaeModel<f64> {
    let mut model = VaeModel::new(ModelConfig::new(16, 3, 8, 4, 0.01), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, p) in model.params.iter_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.15..0.15);
        }
    }
    model
}

/// Same architecture as [`tiny_model`], at a point where the loss is smooth
/// across a ±1e-3 step in any parameter: every piecewise-linear unit sits far
/// from its kink. Normalization shifts alternate between about +3 and −3 per
/// channel with gains near 0.3 (so both activation branches are exercised),
/// the first block's biases alternate near ±1, and the weights feeding
/// normalization are scaled up 5× so a step is a small relative change.
pub fn smooth_model(seed: u64) -> VaeModel<f64> {
    let mut model = VaeModel::new(ModelConfig::new(16, 3, 8, 4, 0.01), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let sign = |i: usize| if i % 2 == 0 { 1.0 } else { -1.0 };
    for (name, p) in model.params.iter_mut() {
        if name.ends_with("bn.gamma") {
            for v in p.data_mut() {
                *v = rng.random_range(0.25..0.35);
            }
        } else if name.ends_with("bn.beta") {
            for (i, v) in p.data_mut().iter_mut().enumerate() {
                *v = sign(i) * rng.random_range(2.5..3.5);
            }
        } else if name == "enc.0.bias" {
            for (i, v) in p.data_mut().iter_mut().enumerate() {
                *v = sign(i) * rng.random_range(0.8..1.2);
            }
        } else if ["enc.1.weight", "dec.proj.weight", "dec.0.weight"].contains(&name.as_str()) {
            for v in p.data_mut() {
                *v *= 5.0;
            }
        }
    }
    model
}

/// Linear-Gaussian generative model `p(z) = N(0, I)`,
/// `p(x|z) = N(W z + b, σ² I)` whose columns of `W` are orthogonal, paired
/// with an encoder that returns the exact posterior mean and the exact
/// posterior variances inflated by `inflation`.
pub struct LinearGaussian {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub sigma: f64,
    pub inflation: f64,
}

impl LinearGaussian {
    pub fn new(data_dim: usize, latent_dim: usize, sigma: f64, inflation: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(data_dim, latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let scales = DVector::from_fn(latent_dim, |j, _| 0.6 + 0.3 * j as f64);
        let w = q.columns(0, latent_dim).into_owned() * DMatrix::from_diagonal(&scales);
        let b = DVector::from_fn(data_dim, |_, _| rng.random_range(-0.5..0.5));
        Self {
            w,
            b,
            sigma,
            inflation,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Exact `log p(x)` from the marginal `N(b, W Wᵀ + σ² I)`.
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let d = self.data_dim();
        let cov = &self.w * self.w.transpose()
            + DMatrix::identity(d, d) * (self.sigma * self.sigma);
        let chol = cov.cholesky().expect("positive definite");
        let r = DVector::from_column_slice(x) - &self.b;
        let sol = chol.solve(&r);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&sol))
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = DVector::from_fn(self.latent_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = DVector::from_fn(self.data_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.w * z + &self.b + n * self.sigma).iter().copied().collect()
    }

    fn posterior_cov(&self) -> DMatrix<f64> {
        let m = self.latent_dim();
        let prec = DMatrix::identity(m, m) + self.w.transpose() * &self.w / (self.sigma * self.sigma);
        prec.try_inverse().expect("invertible")
    }
}

impl LatentModel for LinearGaussian {
    fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    fn likelihood_sigma(&self) -> f64 {
        self.sigma
    }

    fn posterior(&self, x: &[f64]) -> vae_anomaly::Result<(Vec<f64>, Vec<f64>)> {
        let s = self.posterior_cov();
        let r = DVector::from_column_slice(x) - &self.b;
        let mean = &s * self.w.transpose() * r / (self.sigma * self.sigma);
        let log_var = s
            .diagonal()
            .iter()
            .map(|v| (v * self.inflation).ln())
            .collect();
        Ok((mean.iter().copied().collect(), log_var))
    }

    fn decode_means(&self, zs: &[Vec<f64>]) -> vae_anomaly::Result<Vec<Vec<f64>>> {
        Ok(zs
            .iter()
            .map(|z| {
                (&self.w * DVector::from_column_slice(z) + &self.b)
                    .iter()
                    .copied()
                    .collect()
            })
            .collect())
    }
}
