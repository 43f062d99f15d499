//! Training loop, optimizer and checkpoints.

mod adam;
mod checkpoint;

pub use adam::{adam_step, Adam, AdamConfig};
pub use checkpoint::{
    checkpoint_dtype, checkpoint_id, file_checkpoint_id, Checkpoint, EpochLosses, RngState, MAGIC, VERSION,
};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{batch_order, load_records, stack_batch, DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::model::{Mode, VaeModel};
use crate::tensor::{Real, Tensor};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

const NOISE_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Where `final.ckpt`, `best.ckpt` and `train_log.jsonl` go; nothing is
    /// written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 40,
            seed: 0,
            checkpoint_dir: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        self.adam.validate()
    }
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    #[serde(flatten)]
    pub losses: EpochLosses,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub final_checkpoint: Checkpoint<T>,
    pub best_checkpoint: Checkpoint<T>,
    pub log: Vec<EpochLog>,
}

impl<T> TrainOutcome<T> {
    pub fn history(&self) -> &[EpochLosses] {
        &self.final_checkpoint.history
    }
}

#[derive(Default)]
struct Sums {
    loss: f64,
    reconst: f64,
    kl: f64,
    items: usize,
}

impl Sums {
    fn add<T: Real>(&mut self, tape: &Tape<T>, vars: &crate::model::LossVars, items: usize) {
        let get = |v| tape.value(v)[0].to_f64().unwrap_or(f64::NAN);
        let b = items as f64;
        self.loss += get(vars.loss) * b;
        self.reconst += get(vars.reconstruction) * b;
        self.kl += get(vars.kl) * b;
        self.items += items;
    }

    fn means(&self) -> (f64, f64, f64) {
        let n = self.items as f64;
        (self.loss / n, self.reconst / n, self.kl / n)
    }
}

fn normal_noise<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::c(rng.sample::<f64, _>(StandardNormal)))
}

fn step_error(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Training {
            epoch,
            step,
            msg: format!("non-finite value in {op}; aborting"),
        },
        other => other,
    }
}

/// Mean validation loss parts with frozen parameters and running
/// statistics. Noise is drawn from a fixed stream so epochs are comparable.
pub fn validation_loss<T: Real>(
    model: &VaeModel<T>,
    records: &[ImageRecord<T>],
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(VAL_STREAM);
    let mut sums = Sums::default();
    let idx: Vec<usize> = (0..records.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = stack_batch(records, chunk)?;
        let eps = normal_noise(&[chunk.len(), model.config.latent_dim], &mut rng);
        let mut tape = Tape::new();
        let (vars, _) = model.loss_on(&mut tape, &x, &eps, Mode::Eval)?;
        sums.add(&tape, &vars, chunk.len());
    }
    Ok(sums.means())
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}

/// Train with Adam on `train`, tracking mean loss on `val` after every
/// epoch. Any non-finite loss aborts with the epoch and step. When
/// `checkpoint_dir` is set, the best-validation and final checkpoints and
/// the JSONL log are written there; `on_epoch` sees every log entry.
pub fn train<T: Real>(
    mut model: VaeModel<T>,
    train: &[ImageRecord<T>],
    val: &[ImageRecord<T>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    model.config.validate()?;
    if train.is_empty() {
        return Err(Error::arg("training split is empty"));
    }
    let dir = config.checkpoint_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join(TRAIN_LOG), "")?;
    }
    let mut adam = Adam::new(config.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(NOISE_STREAM);
    let m = model.config.latent_dim;
    let mut history = Vec::with_capacity(config.epochs);
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint<T>)> = None;
    let start = Instant::now();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        let mut sums = Sums::default();
        for idx in batch_order(train.len(), config.batch_size, config.seed, epoch as u64)? {
            step += 1;
            let x = stack_batch(train, &idx)?;
            let eps = normal_noise(&[idx.len(), m], &mut rng);
            let mut tape = Tape::new();
            let (vars, stats) = model
                .loss_on(&mut tape, &x, &eps, Mode::Train)
                .map_err(|e| step_error(epoch, step, e))?;
            let loss = tape.value(vars.loss)[0];
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    msg: format!("loss is {loss}; aborting"),
                });
            }
            sums.add(&tape, &vars, idx.len());
            tape.backward(vars.loss, &mut model.params)
                .map_err(|e| step_error(epoch, step, e))?;
            adam.update(&mut model.params, config.learning_rate)?;
            model.update_running_stats(&stats);
            if model.params.iter().any(|(_, p)| !p.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    step,
                    msg: "parameters became non-finite; aborting".into(),
                });
            }
        }
        let (train_loss, train_reconst, train_kl) = sums.means();
        let val_parts = if val.is_empty() {
            None
        } else {
            Some(
                validation_loss(&model, val, config.batch_size, config.seed)
                    .map_err(|e| step_error(epoch, step, e))?,
            )
        };
        let losses = EpochLosses {
            epoch,
            train_loss,
            train_reconst,
            train_kl,
            val_loss: val_parts.map(|v| v.0),
            val_reconst: val_parts.map(|v| v.1),
            val_kl: val_parts.map(|v| v.2),
        };
        history.push(losses);
        let entry = EpochLog {
            losses,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.4} (reconst {train_reconst:.4}, kl {train_kl:.4}){}",
            config.epochs,
            val_parts
                .map(|v| format!(", val loss {:.4}", v.0))
                .unwrap_or_default()
        );
        if let Some(d) = dir {
            append_log(&d.join(TRAIN_LOG), &entry)?;
        }
        on_epoch(&entry);
        log.push(entry);

        let rng_state = RngState {
            seed: config.seed,
            stream: NOISE_STREAM,
            word_pos: rng.get_word_pos(),
        };
        let ckpt = Checkpoint::new(model.clone(), epoch, history.clone(), rng_state)
            .with_optimizer(adam.clone());
        let selector = losses.val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _)| selector < *b) {
            if let Some(d) = dir {
                ckpt.save(&d.join(BEST_CHECKPOINT))?;
            }
            best = Some((selector, ckpt));
        }
    }

    let rng_state = RngState {
        seed: config.seed,
        stream: NOISE_STREAM,
        word_pos: rng.get_word_pos(),
    };
    let final_checkpoint =
        Checkpoint::new(model, config.epochs, history, rng_state).with_optimizer(adam);
    if let Some(d) = dir {
        final_checkpoint.save(&d.join(FINAL_CHECKPOINT))?;
    }
    let best_checkpoint = best.map(|b| b.1).expect("at least one epoch");
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        log,
    })
}

/// Load the train and val splits of `manifest` at the model's resolution and
/// train a freshly initialized model seeded with `config.seed`.
pub fn train_from_manifest<T: Real>(
    model_config: crate::model::ModelConfig,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    let size = model_config.image_size;
    let ch = model_config.in_channels;
    let train_set = load_records::<T>(manifest, &[Split::Train], size, ch)?;
    let val_set = load_records::<T>(manifest, &[Split::Val], size, ch)?;
    log::info!(
        "training on {} images, validating on {}",
        train_set.len(),
        val_set.len()
    );
    let model = VaeModel::new(model_config, config.seed)?;
    train(model, &train_set, &val_set, config, on_epoch)
}
