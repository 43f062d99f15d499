//! VAE and importance-weighted anomaly scores.
//!
//! Every score estimates `−log p(x)`, so larger means more anomalous. For
//! each image, one set of `L` posterior draws is shared by all six scores:
//!
//! | score          | value                                              |
//! |----------------|----------------------------------------------------|
//! | `vae`          | `KL(q‖p) − mean_i log p(x|z_i)`                    |
//! | `vae_kl`       | `KL(q‖p)` (closed form)                            |
//! | `vae_reconst`  | `−mean_i log p(x|z_i)`                             |
//! | `iwae`         | `−log mean_i p(x|z_i) p(z_i) / q(z_i|x)`           |
//! | `iwae_kl`      | `−log mean_i p(z_i) / q(z_i|x)`                    |
//! | `iwae_reconst` | `−log mean_i p(x|z_i)`                             |
//!
//! Importance-weighted scores are evaluated in log space with
//! [`log_mean_exp`].

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ops::log_mean_exp;
use crate::error::{Error, Result};
use crate::model::{gaussian_log_density, kl_standard_normal, ModelConfig, VaeModel};
use crate::tensor::{Real, Tensor};

/// A model exposing a diagonal Gaussian posterior and a Gaussian decoder
/// with fixed isotropic standard deviation, over flat `f64` data vectors.
pub trait LatentModel: Sync {
    fn latent_dim(&self) -> usize;

    fn likelihood_sigma(&self) -> f64;

    /// `(mean, log_var)` of `q(z|x)`.
    fn posterior(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Decoder means `μ_dec(z)` for each latent.
    fn decode_means(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

impl<T: Real> LatentModel for VaeModel<T> {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn likelihood_sigma(&self) -> f64 {
        self.config.likelihood_sigma
    }

    fn posterior(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.config.image_size;
        let input = Tensor::new(
            vec![1, self.config.in_channels, s, s],
            x.iter().map(|v| T::c(*v)).collect(),
        )?;
        Ok(self.encode(&input)?.row(0))
    }

    fn decode_means(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let m = self.config.latent_dim;
        let z = Tensor::new(
            vec![zs.len(), m],
            zs.iter().flatten().map(|v| T::c(*v)).collect(),
        )?;
        let out = self.decode(&z)?.to_f64_vec();
        let n = self.config.data_dim();
        Ok(out.chunks(n).map(<[f64]>::to_vec).collect())
    }
}

/// The six score variants, in report column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Vae,
    VaeKl,
    VaeReconst,
    Iwae,
    IwaeKl,
    IwaeReconst,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 6] = [
        ScoreKind::Vae,
        ScoreKind::VaeKl,
        ScoreKind::VaeReconst,
        ScoreKind::Iwae,
        ScoreKind::IwaeKl,
        ScoreKind::IwaeReconst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::Vae => "vae",
            ScoreKind::VaeKl => "vae_kl",
            ScoreKind::VaeReconst => "vae_reconst",
            ScoreKind::Iwae => "iwae",
            ScoreKind::IwaeKl => "iwae_kl",
            ScoreKind::IwaeReconst => "iwae_reconst",
        }
    }

    /// CSV column header, `s_<name>`.
    pub fn column(self) -> String {
        format!("s_{}", self.name())
    }

    /// Parse a comma-separated list; `all` selects every score. The result
    /// is deduplicated and in column order.
    pub fn parse_list(list: &str) -> Result<Vec<ScoreKind>> {
        let mut out = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Self::ALL);
            } else {
                out.push(part.parse()?);
            }
        }
        if out.is_empty() {
            return Err(Error::arg("no score names given"));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.strip_prefix("s_").unwrap_or(s);
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::arg(format!(
                    "unknown score {s:?}; valid names: {}, all",
                    valid.join(", ")
                ))
            })
    }
}

/// Posterior draws for one image and the per-draw log densities every score
/// is computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    /// Closed-form KL(q(z|x) ‖ N(0, I)).
    pub kl: f64,
    /// `log p(x|z_i)`
    pub log_likelihood: Vec<f64>,
    /// `log p(z_i)`
    pub log_prior: Vec<f64>,
    /// `log q(z_i|x)`
    pub log_posterior: Vec<f64>,
}

fn log_standard_normal(z: &[f64]) -> f64 {
    z.iter()
        .map(|v| -0.5 * (2.0 * PI).ln() - 0.5 * v * v)
        .sum()
}

/// `log N(z; mean, diag(exp(log_var)))`.
pub fn log_normal_diag(z: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    z.iter()
        .zip(mean)
        .zip(log_var)
        .map(|((z, m), lv)| -0.5 * ((2.0 * PI).ln() + lv + (z - m) * (z - m) / lv.exp()))
        .sum()
}

impl Draws {
    pub fn samples(&self) -> usize {
        self.log_likelihood.len()
    }

    pub fn vae_kl(&self) -> f64 {
        self.kl
    }

    pub fn vae_reconst(&self) -> f64 {
        -self.log_likelihood.iter().sum::<f64>() / self.samples() as f64
    }

    pub fn vae(&self) -> f64 {
        self.vae_kl() + self.vae_reconst()
    }

    fn log_weights(&self) -> Vec<f64> {
        self.log_likelihood
            .iter()
            .zip(&self.log_prior)
            .zip(&self.log_posterior)
            .map(|((ll, lp), lq)| ll + lp - lq)
            .collect()
    }

    pub fn iwae(&self) -> f64 {
        -log_mean_exp(&self.log_weights()).expect("at least one draw")
    }

    pub fn iwae_kl(&self) -> f64 {
        let ratios: Vec<f64> = self
            .log_prior
            .iter()
            .zip(&self.log_posterior)
            .map(|(lp, lq)| lp - lq)
            .collect();
        -log_mean_exp(&ratios).expect("at least one draw")
    }

    pub fn iwae_reconst(&self) -> f64 {
        -log_mean_exp(&self.log_likelihood).expect("at least one draw")
    }

    pub fn score(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Vae => self.vae(),
            ScoreKind::VaeKl => self.vae_kl(),
            ScoreKind::VaeReconst => self.vae_reconst(),
            ScoreKind::Iwae => self.iwae(),
            ScoreKind::IwaeKl => self.iwae_kl(),
            ScoreKind::IwaeReconst => self.iwae_reconst(),
        }
    }

    /// The first `n` draws, e.g. for nested comparisons across `L`.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            kl: self.kl,
            log_likelihood: self.log_likelihood[..n].to_vec(),
            log_prior: self.log_prior[..n].to_vec(),
            log_posterior: self.log_posterior[..n].to_vec(),
        }
    }
}

/// Draw `samples` reparameterized latents from `q(z|x)` and evaluate the
/// densities at each.
pub fn draw<M, R>(model: &M, x: &[f64], samples: usize, rng: &mut R) -> Result<Draws>
where
    M: LatentModel + ?Sized,
    R: Rng + ?Sized,
{
    if samples == 0 {
        return Err(Error::arg("number of samples L must be at least 1"));
    }
    let (mean, log_var) = model.posterior(x)?;
    let m = model.latent_dim();
    if mean.len() != m || log_var.len() != m {
        return Err(Error::dim("posterior width does not match latent_dim"));
    }
    let std: Vec<f64> = log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
    let zs: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            (0..m)
                .map(|j| mean[j] + rng.sample::<f64, _>(StandardNormal) * std[j])
                .collect()
        })
        .collect();
    let recon = model.decode_means(&zs)?;
    let sigma = model.likelihood_sigma();
    let log_likelihood = recon
        .iter()
        .map(|mu| gaussian_log_density(x, mu, sigma))
        .collect();
    Ok(Draws {
        kl: kl_standard_normal(&mean, &log_var),
        log_likelihood,
        log_prior: zs.iter().map(|z| log_standard_normal(z)).collect(),
        log_posterior: zs
            .iter()
            .map(|z| log_normal_diag(z, &mean, &log_var))
            .collect(),
    })
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Scoring {
            image: String::new(),
            msg: format!("{what} is not finite ({v})"),
        })
    }
}

pub fn score_vae<M: LatentModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    finite(draw(model, x, samples, rng)?.vae(), "s_vae")
}

/// Closed-form posterior-to-prior KL; no sampling.
pub fn score_vae_kl<M: LatentModel + ?Sized>(model: &M, x: &[f64]) -> Result<f64> {
    let (mean, log_var) = model.posterior(x)?;
    finite(kl_standard_normal(&mean, &log_var), "s_vae_kl")
}

pub fn score_vae_reconst<M: LatentModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    finite(draw(model, x, samples, rng)?.vae_reconst(), "s_vae_reconst")
}

pub fn score_iwae<M: LatentModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    finite(draw(model, x, samples, rng)?.iwae(), "s_iwae")
}

pub fn score_iwae_kl<M: LatentModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    finite(draw(model, x, samples, rng)?.iwae_kl(), "s_iwae_kl")
}

pub fn score_iwae_reconst<M: LatentModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    finite(draw(model, x, samples, rng)?.iwae_reconst(), "s_iwae_reconst")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    /// Posterior samples per image (`L`).
    #[serde(rename = "L")]
    pub samples: usize,
    pub seed: u64,
    pub scores: Vec<ScoreKind>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            samples: 15,
            seed: 0,
            scores: ScoreKind::ALL.to_vec(),
        }
    }
}

/// RNG stream for one image: keyed by `seed` and a hash of the image id, so
/// results do not depend on position in the batch.
pub fn image_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(image_id.as_bytes());
    let mut stream = [0u8; 8];
    stream.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(stream));
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    /// One value per requested score, in the report's `scores` order.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFailure {
    pub image_id: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub checkpoint_id: String,
    pub samples: usize,
    pub seed: u64,
    pub model_config: Option<ModelConfig>,
    pub scores: Vec<ScoreKind>,
    pub rows: Vec<ScoreRow>,
    pub failures: Vec<ScoreFailure>,
}

/// JSON sidecar written next to the score CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMetadata {
    pub checkpoint_id: String,
    #[serde(rename = "L")]
    pub samples: usize,
    pub seed: u64,
    pub model_config: Option<ModelConfig>,
    pub scores: Vec<ScoreKind>,
    pub images: usize,
    pub failures: Vec<ScoreFailure>,
}

fn score_one<M: LatentModel + ?Sized>(
    model: &M,
    id: &str,
    x: &[f64],
    config: &ScoreConfig,
    kinds: &[ScoreKind],
) -> Result<Vec<f64>> {
    let mut rng = image_rng(config.seed, id);
    let draws = draw(model, x, config.samples, &mut rng)?;
    kinds
        .iter()
        .map(|k| {
            let v = draws.score(*k);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::arg(format!("{} is not finite ({v})", k.column())))
            }
        })
        .collect()
}

/// Score every `(image_id, pixels)` pair. Per-image failures are recorded in
/// the report and do not stop the batch.
pub fn score_batch<M: LatentModel + ?Sized>(
    model: &M,
    images: &[(String, Vec<f64>)],
    config: &ScoreConfig,
    checkpoint_id: &str,
) -> Result<ScoreReport> {
    if config.samples == 0 {
        return Err(Error::arg("number of samples L must be at least 1"));
    }
    let mut kinds = config.scores.clone();
    kinds.sort();
    kinds.dedup();
    if kinds.is_empty() {
        return Err(Error::arg("no scores requested"));
    }
    let mut rows = Vec::with_capacity(images.len());
    let mut failures = Vec::new();
    for (id, x) in images {
        match score_one(model, id, x, config, &kinds) {
            Ok(values) => rows.push(ScoreRow {
                image_id: id.clone(),
                values,
            }),
            Err(e) => {
                log::warn!("scoring {id} failed: {e}");
                failures.push(ScoreFailure {
                    image_id: id.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(ScoreReport {
        checkpoint_id: checkpoint_id.to_string(),
        samples: config.samples,
        seed: config.seed,
        model_config: None,
        scores: kinds,
        rows,
        failures,
    })
}

impl ScoreReport {
    pub fn with_model_config(mut self, config: ModelConfig) -> Self {
        self.model_config = Some(config);
        self
    }

    pub fn column(&self, kind: ScoreKind) -> Option<Vec<f64>> {
        let idx = self.scores.iter().position(|k| *k == kind)?;
        Some(self.rows.iter().map(|r| r.values[idx]).collect())
    }

    pub fn metadata(&self) -> ScoreMetadata {
        ScoreMetadata {
            checkpoint_id: self.checkpoint_id.clone(),
            samples: self.samples,
            seed: self.seed,
            model_config: self.model_config.clone(),
            scores: self.scores.clone(),
            images: self.rows.len(),
            failures: self.failures.clone(),
        }
    }

    /// CSV with header `image_id,s_<score>...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["image_id".to_string()];
        header.extend(self.scores.iter().map(|k| k.column()));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.image_id.clone()];
            rec.extend(row.values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write `<stem>.csv` content to `csv_path` and the JSON sidecar next to
    /// it with extension `.json`.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(csv_path, buf)?;
        let json = serde_json::to_string_pretty(&self.metadata())?;
        std::fs::write(csv_path.with_extension("json"), json + "\n")?;
        Ok(())
    }

    /// Parse a score CSV. Provenance fields are filled from the sidecar when
    /// present.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("image_id") {
            return Err(Error::arg("score CSV must start with an image_id column"));
        }
        let scores = headers
            .iter()
            .skip(1)
            .map(str::parse)
            .collect::<Result<Vec<ScoreKind>>>()?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let values = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::arg(format!("bad score value {v:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != scores.len() {
                return Err(Error::arg("score CSV row has the wrong number of fields"));
            }
            rows.push(ScoreRow {
                image_id: rec.get(0).unwrap_or_default().to_string(),
                values,
            });
        }
        Ok(Self {
            checkpoint_id: String::new(),
            samples: 0,
            seed: 0,
            model_config: None,
            scores,
            rows,
            failures: Vec::new(),
        })
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let file = std::fs::File::open(csv_path)?;
        let mut report = Self::read_csv(file)?;
        let sidecar = csv_path.with_extension("json");
        if let Ok(text) = std::fs::read_to_string(&sidecar) {
            let meta: ScoreMetadata = serde_json::from_str(&text)?;
            report.checkpoint_id = meta.checkpoint_id;
            report.samples = meta.samples;
            report.seed = meta.seed;
            report.model_config = meta.model_config;
            report.failures = meta.failures;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `x` is ignored; fixed posterior and decoder output.
    struct Fixed {
        mean: Vec<f64>,
        log_var: Vec<f64>,
        recon: Vec<f64>,
        sigma: f64,
    }

    impl LatentModel for Fixed {
        fn latent_dim(&self) -> usize {
            self.mean.len()
        }
        fn likelihood_sigma(&self) -> f64 {
            self.sigma
        }
        fn posterior(&self, _x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((self.mean.clone(), self.log_var.clone()))
        }
        fn decode_means(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
            Ok(zs.iter().map(|_| self.recon.clone()).collect())
        }
    }

    fn prior_model(recon: Vec<f64>) -> Fixed {
        Fixed {
            mean: vec![0.0; 3],
            log_var: vec![0.0; 3],
            recon,
            sigma: 1.0,
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!(ScoreKind::parse_list("all").unwrap().len(), 6);
        assert_eq!(
            ScoreKind::parse_list("iwae, s_vae,vae").unwrap(),
            [ScoreKind::Vae, ScoreKind::Iwae]
        );
        let err = ScoreKind::parse_list("vae,bogus").unwrap_err().to_string();
        assert!(err.contains("iwae_reconst"), "{err}");
    }

    #[test]
    fn perfect_reconstruction_score() {
        let m = prior_model(vec![0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = score_vae_reconst(&m, &[0.25], 4, &mut rng).unwrap();
        assert!((s - 0.918939).abs() < 1e-6);
    }

    #[test]
    fn prior_posterior_gives_zero_kl_scores() {
        let m = prior_model(vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(score_vae_kl(&m, &[0.0]).unwrap(), 0.0);
        let s = score_iwae_kl(&m, &[0.0], 7, &mut rng).unwrap();
        assert!(s.abs() < 1e-9);
    }

    #[test]
    fn reconstruction_score_is_monotone_in_error() {
        let mut prev = f64::NEG_INFINITY;
        for off in [0.0, 0.1, 0.5, 1.0, 3.0] {
            let m = prior_model(vec![off, -off]);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let s = score_vae_reconst(&m, &[0.0, 0.0], 3, &mut rng).unwrap();
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn extreme_log_weights_stay_finite() {
        let d = Draws {
            kl: 1.0,
            log_likelihood: vec![-1500.0, -1000.0, -1200.0],
            log_prior: vec![-3.0, -2.0, -4.0],
            log_posterior: vec![1.0, 2.0, 0.5],
        };
        for k in ScoreKind::ALL {
            assert!(d.score(k).is_finite());
        }
        let d = Draws {
            kl: 1.0,
            log_likelihood: vec![1500.0, 1000.0],
            log_prior: vec![-3.0, -2.0],
            log_posterior: vec![1.0, 2.0],
        };
        assert!(d.iwae().is_finite());
    }

    #[test]
    fn zero_samples_rejected() {
        let m = prior_model(vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(score_vae(&m, &[0.0], 0, &mut rng).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = prior_model(vec![0.0, 0.5]);
        let images = vec![
            ("a".to_string(), vec![0.1, 0.2]),
            ("b,c".to_string(), vec![-0.3, 0.9]),
        ];
        let report = score_batch(&m, &images, &ScoreConfig::default(), "ck").unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "image_id,s_vae,s_vae_kl,s_vae_reconst,s_iwae,s_iwae_kl,s_iwae_reconst\n"
        ));
        let back = ScoreReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.rows, report.rows);
    }
}
