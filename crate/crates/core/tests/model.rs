//! Model-level oracles: gradients, per-item encoding, reparameterization and
//! KL Monte-Carlo statistics, likelihood and loss recomputation.

mod common;

use std::f64::consts::PI;

use common::{gradient_check, normal_tensor, smooth_model, tiny_model, uniform_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vae_anomaly::autodiff::Tape;
use vae_anomaly::model::{
    gaussian_log_likelihood, kl_divergence, reparameterize, training_loss, GaussianDiag, Mode,
    ModelConfig, VaeModel,
};
use vae_anomaly::Tensor;

fn assert_gradients(model: &VaeModel<f64>, data_seed: u64, h: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let x = uniform_tensor(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
    let eps = normal_tensor(&[2, 4], &mut rng);
    let checks = gradient_check(model, &x, &eps, h);
    assert_eq!(checks.len(), model.params.len());
    for c in &checks {
        assert!(c.relative_error < 1e-4, "{}: {:.3e}", c.name, c.relative_error);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    assert_gradients(&smooth_model(11), 12, 1e-3);
}

/// At a generic point some units lie within a 1e-3 step of a kink, so the
/// check there uses a step that stays inside one linear piece.
#[test]
fn loss_gradients_match_at_generic_point() {
    assert_gradients(&tiny_model(11), 12, 1e-5);
}

fn row_of(t: &Tensor<f64>, i: usize) -> Tensor<f64> {
    t.index_first(i).unwrap()
}

#[test]
fn batch_encoding_equals_per_item() {
    for bn in [false, true] {
        let cfg = ModelConfig::new(16, 3, 4, 6, 0.01).with_batch_norm(bn);
        let model = VaeModel::<f64>::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = uniform_tensor(&[4, 3, 16, 16], -1.0, 1.0, &mut rng);
        let q = model.encode(&x).unwrap();
        for i in 0..4 {
            let one = row_of(&x, i).reshape(&[1, 3, 16, 16]).unwrap();
            let qi = model.encode(&one).unwrap();
            let (m, lv) = q.row(i);
            let (m1, lv1) = qi.row(0);
            for (a, b) in m.iter().chain(&lv).zip(m1.iter().chain(&lv1)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn encoder_and_decoder_contracts() {
    let model = VaeModel::<f64>::new(ModelConfig::new(32, 3, 4, 5, 0.01), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform_tensor(&[1, 3, 32, 32], -1.0, 1.0, &mut rng);
    let twice = Tensor::stack(&[&row_of(&x, 0), &row_of(&x, 0)]).unwrap();
    let q = model.encode(&twice).unwrap();
    assert_eq!(q.row(0), q.row(1));
    assert!(q.log_var.data().iter().all(|v| v.is_finite() && (-10.0..=10.0).contains(v)));

    let z = normal_tensor(&[2, 5], &mut rng);
    let z = Tensor::stack(&[&row_of(&z, 0), &row_of(&z, 0), &row_of(&z, 1)]).unwrap();
    let y = model.decode(&z).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1.0));
    assert_eq!(row_of(&y, 0), row_of(&y, 1));

    assert!(model.encode(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
    assert!(model.decode(&Tensor::zeros(&[1, 4])).is_err());
}

#[test]
fn reparameterize_cases_and_moments() {
    let mean = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let log_var = Tensor::new(vec![1, 3], vec![0.0, -1.5, 1.2]).unwrap();
    let q = GaussianDiag::new(mean.clone(), log_var.clone()).unwrap();
    assert_eq!(reparameterize(&q, &Tensor::zeros(&[1, 3])).unwrap(), mean);
    let e = Tensor::new(vec![1, 3], vec![0.3, -2.0, 1.7]).unwrap();
    assert_eq!(reparameterize(&GaussianDiag::standard(1, 3), &e).unwrap(), e);
    assert!(reparameterize(&q, &Tensor::zeros(&[1, 2])).is_err());

    let n = 100_000;
    let big = GaussianDiag::new(
        Tensor::from_fn(&[n, 3], |i| mean.data()[i % 3]),
        Tensor::from_fn(&[n, 3], |i| log_var.data()[i % 3]),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = reparameterize(&big, &normal_tensor(&[n, 3], &mut rng)).unwrap();
    for j in 0..3 {
        let col: Vec<f64> = (0..n).map(|i| z.data()[i * 3 + j]).collect();
        let mu = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
        let true_var = log_var.data()[j].exp();
        assert!((mu - mean.data()[j]).abs() < 3.0 * (true_var / n as f64).sqrt());
        // var of the sample variance of a normal is 2σ⁴/(n−1)
        let se_var = (2.0 * true_var * true_var / (n - 1) as f64).sqrt();
        assert!((var - true_var).abs() < 3.0 * se_var, "{var} vs {true_var}");
    }
}

fn log_normal(z: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (z - mean).powi(2) / var)
}

#[test]
fn kl_values_and_monte_carlo() {
    let kl = |m: f64, lv: f64| {
        let q = GaussianDiag::new(
            Tensor::new(vec![1, 1], vec![m]).unwrap(),
            Tensor::new(vec![1, 1], vec![lv]).unwrap(),
        )
        .unwrap();
        kl_divergence(&q).data()[0]
    };
    assert_eq!(kl(0.0, 0.0), 0.0);
    assert!((kl(1.0, 0.0) - 0.5).abs() < 1e-12);
    let analytic = kl(0.0, 2f64.ln());
    assert!((analytic - 0.153426).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 1_000_000;
    let sd = 2f64.sqrt();
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let z = sd * rng.sample::<f64, _>(StandardNormal);
            log_normal(z, 0.0, 2.0) - log_normal(z, 0.0, 1.0)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!((mean - analytic).abs() < 3.0 * sd / (n as f64).sqrt());
}

#[test]
fn likelihood_scalar_oracle() {
    let one = |x: f64, m: f64| {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![x]).unwrap();
        let m = Tensor::new(vec![1, 1, 1, 1], vec![m]).unwrap();
        gaussian_log_likelihood(&x, &m, 1.0).unwrap().data()[0]
    };
    assert!((one(0.4, 0.4) + 0.918939).abs() < 1e-6);
    assert!((one(1.0, 0.0) + 1.418939).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform_tensor(&[3, 2, 4, 4], -1.0, 1.0, &mut rng);
    let m = uniform_tensor(&[3, 2, 4, 4], -1.0, 1.0, &mut rng);
    let sigma = 0.37;
    let ll = gaussian_log_likelihood(&x, &m, sigma).unwrap();
    for b in 0..3 {
        let mut acc = 0.0;
        for i in 0..32 {
            let k = b * 32 + i;
            acc += log_normal(x.data()[k], m.data()[k], sigma * sigma);
        }
        assert!((ll.data()[b] - acc).abs() < 1e-8);
    }
    assert!(gaussian_log_likelihood(&x, &m, 0.0).is_err());
    assert!(gaussian_log_likelihood(&x, &m, -1.0).is_err());
}

/// Per-item squared error and KL recomputed from the model's own encode and
/// decode under training-mode normalization.
fn recompute(model: &VaeModel<f64>, x: &Tensor<f64>, eps: &Tensor<f64>) -> (Vec<f64>, Vec<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let (mv, lvv, _) = model.encode_on(&mut tape, xv, Mode::Train).unwrap();
    let q = GaussianDiag::new(tape.tensor(mv), tape.tensor(lvv)).unwrap();
    let z = reparameterize(&q, eps).unwrap();
    let zv = tape.constant(&z).unwrap();
    let (yv, _) = model.decode_on(&mut tape, zv, Mode::Train).unwrap();
    let y = tape.tensor(yv);
    let b = x.shape()[0];
    let n = x.numel() / b;
    let sse = (0..b)
        .map(|i| {
            (0..n)
                .map(|k| (x.data()[i * n + k] - y.data()[i * n + k]).powi(2))
                .sum()
        })
        .collect();
    (sse, kl_divergence(&q).into_data(), y)
}

#[test]
fn loss_matches_recomputation_from_primitives() {
    let model = tiny_model(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = uniform_tensor(&[3, 3, 16, 16], -1.0, 1.0, &mut rng);
    let eps = normal_tensor(&[3, 4], &mut rng);
    let parts = training_loss(&model, &x, &eps).unwrap();
    let (sse, kl, _) = recompute(&model, &x, &eps);
    let beta = model.config.beta;
    let expect: f64 = sse.iter().zip(&kl).map(|(s, k)| s + beta * k).sum::<f64>() / 3.0;
    assert!((parts.loss - expect).abs() < 1e-6 * expect.abs().max(1.0));
    assert!((parts.reconstruction - sse.iter().sum::<f64>() / 3.0).abs() < 1e-6);
    assert!((parts.kl - kl.iter().sum::<f64>() / 3.0).abs() < 1e-6);
}

#[test]
fn loss_is_affine_in_the_gaussian_elbo() {
    for seed in 0..5u64 {
        let mut model = tiny_model(30 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
        let beta = rng.random_range(0.005..2.0);
        model.config = ModelConfig::new(16, 3, 8, 4, beta);
        let sigma = model.config.likelihood_sigma;
        let x = uniform_tensor(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
        let eps = normal_tensor(&[2, 4], &mut rng);
        let loss = training_loss(&model, &x, &eps).unwrap().loss;
        let (_, kl, y) = recompute(&model, &x, &eps);
        let ll = gaussian_log_likelihood(&x, &y, sigma).unwrap();
        let n = (3 * 16 * 16) as f64;
        let s2 = sigma * sigma;
        let from_elbo: f64 = (0..2)
            .map(|i| {
                let elbo = ll.data()[i] - kl[i];
                -2.0 * s2 * elbo - n * s2 * (2.0 * PI * s2).ln()
            })
            .sum::<f64>()
            / 2.0;
        assert!((loss - from_elbo).abs() < 1e-5, "{loss} vs {from_elbo}");
    }
}

#[test]
fn loss_special_cases() {
    let mut model = tiny_model(50);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = uniform_tensor(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
    let eps = normal_tensor(&[2, 4], &mut rng);
    model.config.beta = 0.0;
    let parts = training_loss(&model, &x, &eps).unwrap();
    assert_eq!(parts.loss, parts.reconstruction);
    assert!(parts.kl > 0.0);
}
