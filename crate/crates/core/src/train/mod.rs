//! Optimization, the epoch loop, evaluation and checkpoints.

mod adam;
mod checkpoint;
mod schedule;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_EXTENSION, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use schedule::LrSchedule;

use crate::autodiff::Tape;
use crate::data::{
    augment_tracked, resize_sample, sample_rng, to_255_clipped, AugmentationConfig, Batch,
    Normalization, Sample,
};
use crate::error::{Error, Result};
use crate::metrics::{
    aggregate, fmse_metric, mse_metric, psnr_from_mse, MetricReport, SampleRecord,
};
use crate::model::{
    build_model, ArchitectureConfig, BackboneInput, BackboneKind, FeatureStore, HarmonizationModel,
};
use crate::objectives::{loss, LossConfig, LossKind};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ihckpt";
/// Written when an epoch diverges: the state at the start of that epoch.
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ihckpt";

/// Samples per forward pass during evaluation.
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub architecture: ArchitectureConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Learning-rate multiplier of the (nominally pre-trained) backbone.
    pub backbone_lr_multiplier: f64,
    /// Trailing fraction of samples, by id order, held out for evaluation.
    pub holdout_fraction: f64,
    /// Evaluate the held-out split every this many epochs and after the last; 0 never.
    pub eval_every: usize,
    /// Periodic checkpoint interval in epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Feature files for a precomputed backbone.
    pub features_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: ArchitectureConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            batch_size: 4,
            seed: 0,
            backbone_lr_multiplier: 0.1,
            holdout_fraction: 0.2,
            eval_every: 1,
            checkpoint_every: 10,
            features_dir: None,
        }
    }
}

/// The five ablation switches, each mapped onto the config field it controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub hflip: bool,
    pub rrc: bool,
    pub fn_mse: bool,
    pub blend_head: bool,
    pub foreground_aware_backbone: bool,
}

impl TrainConfig {
    pub fn toggles(&self) -> Toggles {
        Toggles {
            hflip: self.augmentation.hflip,
            rrc: self.augmentation.rrc,
            fn_mse: self.loss.kind == LossKind::FnMse,
            blend_head: self.architecture.blend_head,
            foreground_aware_backbone: self.architecture.foreground_aware_backbone,
        }
    }

    pub fn set_toggles(&mut self, t: Toggles) {
        self.augmentation.hflip = t.hflip;
        self.augmentation.rrc = t.rrc;
        self.loss.kind = if t.fn_mse {
            LossKind::FnMse
        } else {
            LossKind::Mse
        };
        self.architecture.blend_head = t.blend_head;
        self.architecture.foreground_aware_backbone = t.foreground_aware_backbone;
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Validation(p)) => problems.extend(p),
            Err(e) => problems.push(e.to_string()),
        };
        collect(self.architecture.validate());
        collect(self.loss.validate());
        collect(self.augmentation.validate());
        collect(self.schedule.validate());
        collect(self.adam.validate());
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if !(self.backbone_lr_multiplier > 0.0 && self.backbone_lr_multiplier.is_finite()) {
            problems.push(format!(
                "backbone_lr_multiplier must be positive, got {}",
                self.backbone_lr_multiplier
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            problems.push(format!(
                "holdout_fraction must lie in [0, 1), got {}",
                self.holdout_fraction
            ));
        }
        if self.augmentation.target_size != self.architecture.input_size {
            problems.push(format!(
                "augmentation.target_size {} differs from architecture.input_size {}",
                self.augmentation.target_size, self.architecture.input_size
            ));
        }
        if self.architecture.backbone == BackboneKind::Precomputed {
            if self.features_dir.is_none() {
                problems.push("a precomputed backbone needs features_dir".into());
            }
            if self.augmentation.rrc {
                problems
                    .push("random resized crop cannot be applied to precomputed features".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    fn feature_store(&self) -> Option<FeatureStore> {
        match (self.architecture.backbone, &self.features_dir) {
            (BackboneKind::Precomputed, Some(dir)) => Some(FeatureStore {
                dir: dir.clone(),
                channels: self.architecture.precomputed_channels,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mse: f64,
    pub fmse: f64,
    pub psnr: f64,
    /// The same metrics for the unharmonized composites.
    pub composite_mse: f64,
    pub composite_psnr: f64,
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Sample-weighted mean training loss over the epoch.
    pub train_loss: f64,
    pub eval: Option<EvalSummary>,
}

/// Splits samples, sorted by id, into a training prefix and a held-out suffix.
pub fn split_holdout(
    mut samples: Vec<Sample>,
    fraction: f64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let held = (samples.len() as f64 * fraction).round() as usize;
    if held >= samples.len() {
        return Err(Error::Validation(vec![format!(
            "holdout of {held} leaves no training samples out of {}",
            samples.len()
        )]));
    }
    let eval = samples.split_off(samples.len() - held);
    Ok((samples, eval))
}

fn features_for(
    store: Option<&FeatureStore>,
    samples: &[Sample],
    flips: &[bool],
) -> Result<Option<Tensor>> {
    let Some(store) = store else {
        return Ok(None);
    };
    let maps = samples
        .iter()
        .zip(flips)
        .map(|(s, &flip)| {
            let t = store.load(&s.id)?;
            Ok(if flip { t.flip_horizontal() } else { t })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(Tensor::stack(&maps)?))
}

fn backbone_input(features: &Option<Tensor>) -> BackboneInput<'_> {
    match features {
        Some(f) => BackboneInput::Features(f),
        None => BackboneInput::SameMask,
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: HarmonizationModel,
    adam: AdamState,
    epoch: usize,
    shuffle_rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
    train: Vec<Sample>,
    eval: Vec<Sample>,
    features: Option<FeatureStore>,
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        let mut model = build_model(&config.architecture, config.seed)?;
        model.set_backbone_lr_multiplier(config.backbone_lr_multiplier)?;
        let adam = AdamState::new(model.params(), config.adam);
        let shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4531);
        Self::assemble(config, model, adam, 0, shuffle_rng, Vec::new(), samples)
    }

    /// Continues from `checkpoint`; `samples` must be the dataset the run started with.
    pub fn resume(checkpoint: Checkpoint, samples: Vec<Sample>) -> Result<Self> {
        let config = checkpoint.config;
        config.validate()?;
        let mut model = build_model(&config.architecture, config.seed)?;
        model.load_parameters(&checkpoint.params)?;
        model.set_backbone_lr_multiplier(config.backbone_lr_multiplier)?;
        let adam = checkpoint.adam;
        for ((p, m), v) in model.params().iter().zip(&adam.m).zip(&adam.v) {
            if m.shape() != p.tensor.shape() || v.shape() != p.tensor.shape() {
                return Err(Error::Validation(vec![format!(
                    "optimizer moments for `{}` do not match the parameter shape",
                    p.name
                )]));
            }
        }
        Self::assemble(
            config,
            model,
            adam,
            checkpoint.epoch,
            checkpoint.shuffle_rng,
            checkpoint.history,
            samples,
        )
    }

    fn assemble(
        config: TrainConfig,
        model: HarmonizationModel,
        adam: AdamState,
        epoch: usize,
        shuffle_rng: ChaCha8Rng,
        history: Vec<EpochRecord>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation(vec!["dataset is empty".into()]));
        }
        let (train, eval) = split_holdout(samples, config.holdout_fraction)?;
        let size = config.architecture.input_size;
        let eval = eval.iter().map(|s| resize_sample(s, size)).collect();
        let features = config.feature_store();
        Ok(Trainer {
            config,
            model,
            adam,
            epoch,
            shuffle_rng,
            history,
            train,
            eval,
            features,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &HarmonizationModel {
        &self.model
    }

    pub fn into_model(self) -> HarmonizationModel {
        self.model
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn train_samples(&self) -> &[Sample] {
        &self.train
    }

    /// Held-out samples, already resized to the model input.
    pub fn eval_samples(&self) -> &[Sample] {
        &self.eval
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.schedule.total_epochs
    }

    /// Runs one optimizer step on `samples` and returns the batch loss.
    fn step(&mut self, samples: &[Sample], flips: &[bool], lr: f64) -> Result<f64> {
        let norm = self.config.augmentation.normalization;
        let batch = Batch::from_samples(samples, &norm)?;
        let features = features_for(self.features.as_ref(), samples, flips)?;
        self.model.params_mut().zero_grad();
        let mut tape = Tape::new();
        let out = self.model.forward_with(
            &mut tape,
            &batch.input,
            &batch.mask,
            backbone_input(&features),
        )?;
        let l = loss(
            &mut tape,
            &self.config.loss,
            out.prediction,
            &batch.target,
            &batch.mask,
        )?;
        let value = tape.value(l).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged { epoch: self.epoch });
        }
        tape.backward(l, self.model.params_mut())?;
        self.adam.step(self.model.params_mut(), lr)?;
        Ok(value)
    }

    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let lr = self.config.schedule.lr_at(self.epoch)?;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut flips = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = sample_rng(self.config.seed, self.epoch as u64, i as u64);
                let (s, flipped) =
                    augment_tracked(&self.train[i], &self.config.augmentation, &mut rng)?;
                batch.push(s);
                flips.push(flipped);
            }
            total += self.step(&batch, &flips, lr)? * chunk.len() as f64;
            steps += 1;
        }
        self.epoch += 1;
        let every = self.config.eval_every;
        let eval = if every > 0
            && !self.eval.is_empty()
            && (self.epoch % every == 0 || self.is_finished())
        {
            Some(self.evaluate_holdout()?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: self.epoch - 1,
            lr,
            steps,
            train_loss: total / self.train.len() as f64,
            eval,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn evaluate_holdout(&self) -> Result<EvalSummary> {
        let norm = self.config.augmentation.normalization;
        let report = evaluate(&self.model, &self.eval, &norm, self.features.as_ref())?;
        let baseline = baseline_report(&self.eval, self.config.architecture.input_size)?;
        Ok(EvalSummary {
            count: report.samples.len(),
            mse: report.overall.mean_mse,
            fmse: report.overall.mean_fmse,
            psnr: report.overall.mean_psnr,
            composite_mse: baseline.overall.mean_mse,
            composite_psnr: baseline.overall.mean_psnr,
        })
    }

    /// Mean training loss over `samples` at model resolution without augmentation.
    pub fn dataset_loss(&self, samples: &[Sample]) -> Result<f64> {
        dataset_loss(&self.model, &self.config, samples, self.features.as_ref())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            params: self
                .model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
            adam: self.adam.clone(),
            shuffle_rng: self.shuffle_rng.clone(),
            history: self.history.clone(),
        }
    }
}

/// Sample-weighted mean of the configured loss over `samples`, resized to the model input.
pub fn dataset_loss(
    model: &HarmonizationModel,
    config: &TrainConfig,
    samples: &[Sample],
    features: Option<&FeatureStore>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::argument("dataset_loss", "no samples"));
    }
    let size = model.config().input_size;
    let norm = config.augmentation.normalization;
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let resized: Vec<Sample> = chunk.iter().map(|s| resize_sample(s, size)).collect();
        let batch = Batch::from_samples(&resized, &norm)?;
        let feats = features_for(features, &resized, &vec![false; resized.len()])?;
        let mut tape = Tape::new();
        let out =
            model.forward_with(&mut tape, &batch.input, &batch.mask, backbone_input(&feats))?;
        let l = loss(
            &mut tape,
            &config.loss,
            out.prediction,
            &batch.target,
            &batch.mask,
        )?;
        total += tape.value(l).item()? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn record(
    id: &str,
    pred: &Tensor,
    real: &Tensor,
    mask: &Tensor,
    fg_ratio: f64,
) -> Result<SampleRecord> {
    let mse = mse_metric(pred, real)?;
    Ok(SampleRecord {
        sample_id: id.to_string(),
        mse,
        fmse: fmse_metric(pred, real, mask)?.value,
        psnr: psnr_from_mse(mse, 255.0),
        fg_ratio,
    })
}

/// Harmonizes every sample at model resolution and scores it against the real image
/// on the clipped 0–255 scale. Samples are bucketed by their original foreground ratio.
pub fn evaluate(
    model: &HarmonizationModel,
    samples: &[Sample],
    norm: &Normalization,
    features: Option<&FeatureStore>,
) -> Result<MetricReport> {
    let size = model.config().input_size;
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let resized: Vec<Sample> = chunk.iter().map(|s| resize_sample(s, size)).collect();
        let batch = Batch::from_samples(&resized, norm)?;
        let feats = features_for(features, &resized, &vec![false; resized.len()])?;
        let (pred, _) = model.predict(&batch.input, &batch.mask, backbone_input(&feats))?;
        let pred = to_255_clipped(&norm.denormalize(&pred));
        for (b, (orig, s)) in chunk.iter().zip(&resized).enumerate() {
            let real = to_255_clipped(&s.real.to_tensor());
            records.push(record(
                &s.id,
                &pred.batch_item(b),
                &real,
                &s.mask.to_tensor(),
                orig.fg_ratio(),
            )?);
        }
    }
    aggregate(records)
}

/// Metrics of the unmodified composites at `size × size`, the do-nothing baseline.
pub fn baseline_report(samples: &[Sample], size: usize) -> Result<MetricReport> {
    let records = samples
        .iter()
        .map(|orig| {
            let s = resize_sample(orig, size);
            record(
                &s.id,
                &to_255_clipped(&s.composite.to_tensor()),
                &to_255_clipped(&s.real.to_tensor()),
                &s.mask.to_tensor(),
                orig.fg_ratio(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(records)
}

/// Files written by [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub final_checkpoint: PathBuf,
    pub periodic_checkpoints: Vec<PathBuf>,
}

pub fn periodic_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.{CHECKPOINT_EXTENSION}")
}

fn write_json_line(file: &mut fs::File, path: &Path, record: &EpochRecord) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    file.write_all(line.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Trains to the end of the schedule, writing `config.json`, `history.jsonl`,
/// periodic checkpoints and `final.ihckpt` under `out_dir`.
///
/// On divergence the state from the start of the failing epoch is saved as
/// `last_good.ihckpt` and the error is returned.
pub fn run_training(
    mut trainer: Trainer,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    let mut text = serde_json::to_string_pretty(trainer.config())?;
    text.push('\n');
    fs::write(&config_path, text)
        .map_err(|e| Error::io(format!("writing {}", config_path.display()), e))?;

    let history_path = out_dir.join(HISTORY_FILE);
    let mut history = fs::File::create(&history_path)
        .map_err(|e| Error::io(format!("creating {}", history_path.display()), e))?;
    for r in trainer.history() {
        write_json_line(&mut history, &history_path, r)?;
    }

    let mut periodic = Vec::new();
    while !trainer.is_finished() {
        let before = trainer.checkpoint();
        let record = match trainer.train_epoch() {
            Ok(r) => r,
            Err(e @ Error::Diverged { .. }) => {
                before.save(&out_dir.join(LAST_GOOD_CHECKPOINT))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        write_json_line(&mut history, &history_path, &record)?;
        on_epoch(&record);
        let every = trainer.config().checkpoint_every;
        if every > 0 && trainer.epoch() % every == 0 {
            let path = out_dir.join(periodic_checkpoint_name(trainer.epoch()));
            trainer.checkpoint().save(&path)?;
            periodic.push(path);
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        history: trainer.history().to_vec(),
        final_checkpoint,
        periodic_checkpoints: periodic,
    })
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint(checkpoint: &Checkpoint) -> Result<HarmonizationModel> {
    let mut model = build_model(&checkpoint.config.architecture, checkpoint.config.seed)?;
    model.load_parameters(&checkpoint.params)?;
    Ok(model)
}
