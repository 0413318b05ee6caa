//! Training loop, configuration and evaluation entry points.

mod ablation;
mod checkpoint;
mod data;
mod losses;
mod metrics;

use std::f64::consts::PI;

use candle_core::{DType, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablate, code_dim_sweep, AblationReport, AblationRow, CodeDimReport, CodeDimRow};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{load_split, partial_for, random_direction, resample, Sample};
pub use losses::{chamfer_tensor, orthogonality_loss, orthogonality_loss_tensor, total_loss, OrthForm};
pub use metrics::{evaluate_samples, predict, score, FamilyRow, Metric, MetricTable, EVAL_BATCH};

use crate::config::{ModelConfig, Task, Variant};
use crate::deformation::{Condition, Mode, Model};
use crate::geometry::{ChamferKind, PointCloud};
use crate::synthgen::{DatasetManifest, Split};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the orthogonality penalty.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; cosine-decayed to `min_learning_rate`.
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    /// Seeds parameter initialisation, shuffling and target resampling.
    pub seed: u64,
    pub variant: Variant,
    pub code_dim: usize,
    pub orthogonality: OrthForm,
    /// Fraction of points kept in completion inputs.
    pub keep_fraction: f64,
    /// Learning-rate multiplier for subspace basis vectors.
    pub basis_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            min_learning_rate: 0.0,
            seed: 0,
            variant: Variant::Full,
            code_dim: 18,
            orthogonality: OrthForm::Frobenius,
            keep_fraction: 0.5,
            basis_lr_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.min_learning_rate >= 0.0) || !(self.basis_lr_scale > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction < 1.0) {
            return Err(Error::invalid("keep_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    /// `base` with this run's variant and code dimension.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            code_dim: self.code_dim,
            ..base.clone()
        }
    }

    /// Cosine schedule over `total` steps.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let t = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        self.min_learning_rate + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub train_loss: f64,
    pub train_chamfer: f64,
    /// Orthogonality penalty after the epoch.
    pub orthogonality: f64,
    pub val_l1: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Total loss of the very first batch, before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// A trained model with its checkpoint.
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
}

/// Trains on a manifest's train split, selecting on its val split.
pub fn train(manifest: &DatasetManifest, base: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    manifest.validate()?;
    let model_config = config.model_config(base);
    let train = load_split(manifest, Split::Train, &model_config, config.keep_fraction)?;
    let val = load_split(manifest, Split::Val, &model_config, config.keep_fraction)?;
    train_samples(&train, &val, base, config)
}

struct Groups {
    main: AdamW,
    basis: Option<AdamW>,
}

impl Groups {
    fn new(model: &Model, config: &TrainConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        };
        let separate = config.basis_lr_scale != 1.0;
        let (mut main, mut basis): (Vec<Var>, Vec<Var>) = (Vec::new(), Vec::new());
        for (name, var) in model.params().vars() {
            if separate && name.ends_with(".bank.basis") {
                basis.push(var.clone());
            } else {
                main.push(var.clone());
            }
        }
        Ok(Self {
            main: AdamW::new(main, params.clone())?,
            basis: if separate { Some(AdamW::new(basis, params)?) } else { None },
        })
    }

    fn step(&mut self, loss: &candle_core::Tensor, lr: f64, basis_scale: f64) -> Result<()> {
        let grads = loss.backward()?;
        self.main.set_learning_rate(lr);
        self.main.step(&grads)?;
        if let Some(b) = &mut self.basis {
            b.set_learning_rate(lr * basis_scale);
            b.step(&grads)?;
        }
        Ok(())
    }
}

/// Training loop over preloaded samples. The returned model carries the
/// parameters of the epoch with the lowest validation L1 Chamfer distance.
pub fn train_samples(train: &[Sample], val: &[Sample], base: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and val splits"));
    }
    let model_config = config.model_config(base);
    let mut model = Model::new(model_config, config.seed, DType::F32)?;
    let mut groups = Groups::new(&model, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00);
    let n = model.config().num_points;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, _, Vec<_>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut cd_sum) = (0.0, 0.0);
        let mut lr = config.learning_rate;
        for chunk in order.chunks(config.batch_size) {
            lr = config.learning_rate_at(step, total_steps);
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let targets = batch
                .iter()
                .map(|s| resample(&s.dense, n, &mut rng))
                .collect::<Result<Vec<PointCloud>>>()?;
            let (loss, cd, stats) = batch_loss(&model, &batch, &targets, config)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            if step == 0 {
                history.initial_loss = value;
            }
            groups.step(&loss, lr, config.basis_lr_scale)?;
            model.update_norm_stats(&stats)?;
            loss_sum += value;
            cd_sum += cd;
            step += 1;
        }
        let val_l1 = evaluate_samples(&model, val, Metric::L1)?.sample_mean;
        let orth = orthogonality_loss(&model.banks(), config.orthogonality)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            train_chamfer: cd_sum / steps_per_epoch as f64,
            orthogonality: orth,
            val_l1,
            learning_rate: lr,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.5} cd {:.5} orth {:.5} val_l1 {:.5}",
            config.epochs,
            record.train_loss,
            record.train_chamfer,
            orth,
            val_l1
        );
        history.epochs.push(record);
        if !val_l1.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                loss: val_l1,
            });
        }
        if best.as_ref().is_none_or(|b| val_l1 < b.0) {
            best = Some((val_l1, model.params().snapshot()?, model.norm_stats().to_vec()));
            history.best_epoch = epoch;
        }
    }
    let (_, params, norm) = best.expect("at least one epoch ran");
    model.params().restore(&params)?;
    model.set_norm_stats(norm)?;
    let checkpoint = Checkpoint::from_model(&model, config.clone(), history.best_epoch, history)?;
    Ok(TrainOutcome { model, checkpoint })
}

/// Total loss, its Chamfer part and the train-mode statistics of one batch.
fn batch_loss(
    model: &Model,
    batch: &[&Sample],
    targets: &[PointCloud],
    config: &TrainConfig,
) -> Result<(candle_core::Tensor, f64, Vec<Option<crate::deformation::BatchStats>>)> {
    let (decoded, _) = match model.config().task {
        Task::Reconstruction => {
            let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
            model.forward_batch(&Condition::Images(&images), Mode::Train)?
        }
        Task::Completion => {
            let partials = batch
                .iter()
                .map(|s| s.partial.as_ref().ok_or_else(|| Error::invalid("completion sample without partial input")))
                .collect::<Result<Vec<_>>>()?;
            model.forward_batch(&Condition::Partials(&partials), Mode::Train)?
        }
    };
    let target_refs: Vec<&PointCloud> = targets.iter().collect();
    let cd = chamfer_tensor(&decoded.points, &target_refs, ChamferKind::L1)?;
    let cd_value = cd.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let loss = match orthogonality_loss_tensor(&model.banks(), config.orthogonality)? {
        Some(orth) if config.alpha > 0.0 => (cd + (orth * config.alpha)?)?,
        _ => cd,
    };
    Ok((loss, cd_value, decoded.stats))
}

/// Metric table of a model on one split of a manifest.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, split: Split, metric: Metric, keep_fraction: f64) -> Result<MetricTable> {
    let samples = load_split(manifest, split, model.config(), keep_fraction)?;
    evaluate_samples(model, &samples, metric)
}
