//! Staged training: the three-stage curriculum (whole → patch → whole), the
//! single-stage and two-stage comparison schedules, and the liver-then-tumor
//! cascade.
//!
//! Stage `i` of every schedule runs at `base_lr / 10^i`. Weights carry over
//! between stages; optimizer moments start fresh at each stage. Shuffling in
//! stage `i` depends only on `(seed, i)`, so a schedule that is a prefix of
//! another reproduces its weights bit for bit up to the shared boundary.

mod cascade;
mod trainlog;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cascade::{
    cascade_predict, liver_crop_region, run_cascade, CascadeModel, CascadePrediction, CropRegion,
};
pub use trainlog::{StageRecord, StepRecord, TrainLog};

use crate::error::{Error, Result};
use crate::network::{build_network, Network, NetworkConfig};
use crate::preprocess::{Sample, SampleKind, SampleSet};
use crate::tensor::{soft_dice_loss, Adam, AdamConfig, Real, Tensor};

/// Additive smoothing of the soft-dice loss.
pub const DICE_SMOOTH: Real = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Whole,
    Patch,
}

impl DataSource {
    fn accepts(self, kind: SampleKind) -> bool {
        match self {
            DataSource::Whole => kind == SampleKind::Whole,
            DataSource::Patch => kind != SampleKind::Whole,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub source: DataSource,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of positives in a patch epoch; ignored for whole stages.
    pub positive_fraction: f64,
}

impl StageSpec {
    pub fn whole(learning_rate: f64, epochs: usize) -> Self {
        StageSpec {
            source: DataSource::Whole,
            learning_rate,
            batch_size: 1,
            epochs,
            positive_fraction: 1.0,
        }
    }

    /// Batch 2 with positives and negatives mixed 2:1.
    pub fn patch(learning_rate: f64, epochs: usize) -> Self {
        StageSpec {
            source: DataSource::Patch,
            learning_rate,
            batch_size: 2,
            epochs,
            positive_fraction: 2.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be positive"));
        }
        if self.source == DataSource::Patch
            && !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0)
        {
            return Err(Error::invalid(format!(
                "positive fraction must lie in (0, 1], got {}",
                self.positive_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    ThreeStage,
    Naive,
    WholeToPatch,
    PatchToWhole,
    Cascade,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::Cascade,
        ScheduleKind::Naive,
        ScheduleKind::PatchToWhole,
        ScheduleKind::WholeToPatch,
        ScheduleKind::ThreeStage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::ThreeStage => "three-stage",
            ScheduleKind::Naive => "naive",
            ScheduleKind::WholeToPatch => "whole-to-patch",
            ScheduleKind::PatchToWhole => "patch-to-whole",
            ScheduleKind::Cascade => "cascade",
        }
    }

    fn sources(self) -> &'static [DataSource] {
        use DataSource::*;
        match self {
            ScheduleKind::ThreeStage => &[Whole, Patch, Whole],
            ScheduleKind::Naive | ScheduleKind::Cascade => &[Whole],
            ScheduleKind::WholeToPatch => &[Whole, Patch],
            ScheduleKind::PatchToWhole => &[Patch, Whole],
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        ScheduleKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown schedule '{s}'; expected one of three-stage, naive, whole-to-patch, patch-to-whole, cascade"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub stages: Vec<StageSpec>,
}

/// Stage `i` gets `base_lr / 10^i`. The cascade's networks each train on the
/// single naive stage.
pub fn make_schedule(
    kind: ScheduleKind,
    base_lr: f64,
    epochs_per_stage: usize,
) -> Result<Schedule> {
    if !(base_lr > 0.0) {
        return Err(Error::invalid(format!(
            "base learning rate must be positive, got {base_lr}"
        )));
    }
    let stages = kind
        .sources()
        .iter()
        .enumerate()
        .map(|(i, &src)| {
            let lr = base_lr / 10f64.powi(i as i32);
            match src {
                DataSource::Whole => StageSpec::whole(lr, epochs_per_stage),
                DataSource::Patch => StageSpec::patch(lr, epochs_per_stage),
            }
        })
        .collect::<Vec<_>>();
    for s in &stages {
        s.validate()?;
    }
    Ok(Schedule { kind, stages })
}

/// Shuffling stream of one stage.
fn stage_rng(seed: u64, stage_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage_index as u64 + 1);
    rng
}

fn stack(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let dims = samples[0].image.dims;
    if let Some(s) = samples.iter().find(|s| s.image.dims != dims) {
        return Err(Error::shape(format!(
            "batch mixes sample extents {dims:?} and {:?}",
            s.image.dims
        )));
    }
    let shape = [samples.len(), 1, dims[0], dims[1], dims[2]];
    let x = samples
        .iter()
        .flat_map(|s| s.image.values.iter().map(|&v| v as Real))
        .collect();
    let t = samples
        .iter()
        .flat_map(|s| s.target.labels.iter().map(|&v| v as Real))
        .collect();
    Ok((Tensor::from_vec(&shape, x)?, Tensor::from_vec(&shape, t)?))
}

/// Mean soft Dice (1 − loss) of single-sample forward passes.
pub fn soft_dice_score(network: &Network, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut total = 0.0;
    for s in samples {
        let (x, t) = stack(&[s])?;
        let p = network.forward_frozen(&x)?;
        total += 1.0 - soft_dice_loss(&p, &t, DICE_SMOOTH)?.values()[0] as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Sample indices for one epoch. Patch epochs take every positive plus
/// enough randomly chosen negatives to reach the positive fraction.
fn epoch_order(
    stage: &StageSpec,
    positives: &[usize],
    negatives: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut order = positives.to_vec();
    if stage.source == DataSource::Patch && !negatives.is_empty() {
        let f = stage.positive_fraction;
        let want = ((positives.len() as f64 * (1.0 - f) / f).round() as usize).min(negatives.len());
        let mut neg = negatives.to_vec();
        neg.shuffle(rng);
        order.extend_from_slice(&neg[..want]);
    }
    order.shuffle(rng);
    order
}

/// Number of optimizer steps one epoch of `stage` takes over `samples`.
pub fn steps_per_epoch(stage: &StageSpec, samples: &[Sample]) -> usize {
    let pos = samples
        .iter()
        .filter(|s| s.kind != SampleKind::PatchNegative)
        .count();
    let neg = samples.len() - pos;
    let n = match stage.source {
        DataSource::Whole => samples.len(),
        DataSource::Patch => {
            let f = stage.positive_fraction;
            pos + ((pos as f64 * (1.0 - f) / f).round() as usize).min(neg)
        }
    };
    n.div_ceil(stage.batch_size)
}

/// Trains `network` in place for one stage and appends to `log`.
/// `validation` samples are scored after each epoch for the log only.
pub fn train_stage(
    network: &mut Network,
    samples: &[Sample],
    validation: &[Sample],
    stage: &StageSpec,
    seed: u64,
    stage_index: usize,
    log: &mut TrainLog,
) -> Result<Adam> {
    stage.validate()?;
    if samples.is_empty() {
        return Err(Error::data(format!(
            "stage {stage_index} has no training samples"
        )));
    }
    if let Some(s) = samples.iter().find(|s| !stage.source.accepts(s.kind)) {
        return Err(Error::invalid(format!(
            "stage {stage_index} trains on {:?} samples but received a {:?} sample from case {}",
            stage.source, s.kind, s.case_id
        )));
    }
    let (negatives, positives): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| samples[i].kind == SampleKind::PatchNegative);
    if positives.is_empty() {
        return Err(Error::data(format!(
            "stage {stage_index} has no non-negative samples"
        )));
    }

    let started = Instant::now();
    let mut rng = stage_rng(seed, stage_index);
    let mut optimizer = Adam::new(AdamConfig::with_lr(stage.learning_rate));
    let first_step = log.steps.len();
    let mut record = StageRecord {
        stage: stage_index,
        source: stage.source,
        learning_rate: stage.learning_rate,
        batch_size: stage.batch_size,
        epochs: stage.epochs,
        first_step,
        steps: 0,
        kinds: Vec::new(),
        train_dice: Vec::with_capacity(stage.epochs),
        validation_dice: Vec::new(),
        seconds: 0.0,
    };
    for _ in 0..stage.epochs {
        let order = epoch_order(stage, &positives, &negatives, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(stage.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            for s in &batch {
                if !record.kinds.contains(&s.kind) {
                    record.kinds.push(s.kind);
                }
            }
            let (x, t) = stack(&batch)?;
            network.zero_grad();
            let loss = soft_dice_loss(&network.forward(&x)?, &t, DICE_SMOOTH)?;
            loss.backward()?;
            optimizer.step(network.params_mut())?;
            let value = loss.values()[0] as f64;
            log.steps.push(StepRecord {
                step: log.steps.len(),
                stage: stage_index,
                loss: value,
            });
            epoch_loss += value;
            batches += 1;
        }
        record.train_dice.push(1.0 - epoch_loss / batches as f64);
        if !validation.is_empty() {
            record
                .validation_dice
                .push(soft_dice_score(network, validation)?);
        }
    }
    network.zero_grad();
    record.kinds.sort_by_key(|k| *k as u8);
    record.steps = log.steps.len() - first_step;
    record.seconds = started.elapsed().as_secs_f64();
    log.stages.push(record);
    Ok(optimizer)
}

/// Builds the network from `seed` and runs every stage of `schedule` in
/// order. `validation` (whole inputs) is scored after every epoch of every
/// stage for the log. `on_stage_end` sees the network and optimizer at each
/// boundary.
pub fn run_schedule_with(
    config: &NetworkConfig,
    schedule: &Schedule,
    data: &SampleSet,
    validation: &[Sample],
    seed: u64,
    mut on_stage_end: impl FnMut(usize, &Network, &Adam) -> Result<()>,
) -> Result<(Network, TrainLog)> {
    if schedule.kind == ScheduleKind::Cascade {
        return Err(Error::invalid(
            "the cascade trains two networks; use run_cascade",
        ));
    }
    let mut network = build_network(config, seed)?;
    let mut log = TrainLog::new(seed, schedule.kind.name());
    let patches: Vec<Sample> = data
        .positives
        .iter()
        .chain(&data.negatives)
        .cloned()
        .collect();
    for (i, stage) in schedule.stages.iter().enumerate() {
        let samples = match stage.source {
            DataSource::Whole => &data.whole,
            DataSource::Patch => &patches,
        };
        let optimizer = train_stage(&mut network, samples, validation, stage, seed, i, &mut log)?;
        on_stage_end(i, &network, &optimizer)?;
    }
    Ok((network, log))
}

pub fn run_schedule(
    config: &NetworkConfig,
    schedule: &Schedule,
    data: &SampleSet,
    seed: u64,
) -> Result<(Network, TrainLog)> {
    run_schedule_with(config, schedule, data, &[], seed, |_, _, _| Ok(()))
}
