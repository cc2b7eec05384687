//! Multi-dataset pre-training and unsupervised cross-camera fine-tuning.

use std::fmt::{self, Write as _};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CooccurrenceIndex, Dataset};
use crate::error::{Error, Result};
use crate::losses::{batch_hard_loss_with, modified_batch_hard_loss_with, MarginMode, Reduction};
use crate::mining::{
    annotate_truth, build_finetune_batch, measure_purity, mine_all_camera_pairs, MinedPair,
    MinedPairSet, MiningConfig,
};
use crate::model::{
    Model, ModelConfig, DEFAULT_BN_MOMENTUM, DEFAULT_DROPOUT, DEFAULT_EMBEDDING, DEFAULT_HIDDEN,
};
use crate::optim::{AdamState, LrSchedule, Optimizer, RmspropState};
use crate::sampler::{
    merge_for_bh_merge, merge_offsets, sample_pk_from, steps_per_epoch, switch_schedule,
    BatchLayout, SwitchPolicy,
};

// Stream ids of the per-run generators. Mining uses streams 1.. of the
// fine-tune seed, one per camera pair.
const SAMPLER_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const FT_ORDER_STREAM: u64 = u64::MAX - 1;
const FT_DROPOUT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    BhMerge,
    #[default]
    BhSwitch,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::BhMerge => "bh-merge",
            TrainMode::BhSwitch => "bh-switch",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bh-merge" | "merge" => Ok(TrainMode::BhMerge),
            "bh-switch" | "switch" => Ok(TrainMode::BhSwitch),
            other => Err(Error::InvalidConfig(format!(
                "unknown training mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub p: usize,
    pub k: usize,
    pub margin: MarginMode,
    pub reduction: Reduction,
    pub epochs: u32,
    pub schedule: LrSchedule,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub switch_policy: SwitchPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::BhSwitch,
            p: 18,
            k: 4,
            margin: MarginMode::Softplus,
            reduction: Reduction::Mean,
            epochs: 400,
            schedule: LrSchedule::pretraining(),
            hidden_dim: DEFAULT_HIDDEN,
            embedding_dim: DEFAULT_EMBEDDING,
            dropout_rate: DEFAULT_DROPOUT,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            switch_policy: SwitchPolicy::RoundRobin,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced preset for small synthetic data: 128-128-32 head, 40 epochs,
    /// `1e-3` held for 10 epochs then decayed to `1e-5`.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 40,
            schedule: LrSchedule {
                lr0: 1e-3,
                lr1: 1e-5,
                hold_until: 10,
                end: 40,
            },
            hidden_dim: 128,
            embedding_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "P and K must be >= 2 (P={}, K={})",
                self.p, self.k
            )));
        }
        self.schedule.validate()
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            embedding_dim: self.embedding_dim,
            dropout_rate: self.dropout_rate,
            bn_momentum: self.bn_momentum,
        }
    }
}

/// Where a logged batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoggedSource {
    Dataset(usize),
    Merged,
    Target,
}

impl fmt::Display for LoggedSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoggedSource::Dataset(d) => write!(f, "{d}"),
            LoggedSource::Merged => f.write_str("merged"),
            LoggedSource::Target => f.write_str("target"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: u32,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mode: &'static str,
    pub source: LoggedSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,step,lr,loss,mode,source_dataset`, one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,loss,mode,source_dataset\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{},{}",
                s.epoch, s.step, s.lr, s.loss, s.mode, s.source
            );
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,lr,mean_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:e},{:e}", e.epoch, e.lr, e.mean_loss);
        }
        out
    }

    fn close_epoch(&mut self, epoch: u32, lr: f64, losses: &[f64]) {
        let mean_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        self.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss,
        });
    }
}

fn gather_rows(datasets: &[&Dataset], refs: &[(usize, usize)], dim: usize) -> Array2<f64> {
    let mut x = Array2::zeros((refs.len(), dim));
    for (row, &(d, i)) in x.rows_mut().into_iter().zip(refs) {
        for (dst, src) in row.into_iter().zip(&datasets[d].samples()[i].features) {
            *dst = *src;
        }
    }
    x
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pre-trains a fresh model on labeled `datasets`. The result is in eval mode.
///
/// Every step runs forward (train mode), batch-hard loss, backward and one
/// ADAM update at the epoch's learning rate. Epochs are numbered from 1.
pub fn train(datasets: &[Dataset], config: &TrainConfig) -> Result<(Model, TrainLog)> {
    config.validate()?;
    let Some(first) = datasets.first() else {
        return Err(Error::InvalidDataset("no training datasets".into()));
    };
    let dim = first.feature_dim();
    for (i, ds) in datasets.iter().enumerate() {
        if ds.feature_dim() != dim {
            return Err(Error::Shape(format!(
                "dataset {i} has feature dim {}, expected {dim}",
                ds.feature_dim()
            )));
        }
        if ds.is_empty() || !ds.is_labeled() {
            return Err(Error::Unlabeled(format!(
                "training dataset {i} is empty or unlabeled"
            )));
        }
        if config.mode == TrainMode::BhSwitch && ds.num_persons() < config.p {
            return Err(Error::InvalidDataset(format!(
                "dataset {i} has {} identities, P is {}",
                ds.num_persons(),
                config.p
            )));
        }
    }
    let merged = match config.mode {
        TrainMode::BhMerge => Some(merge_for_bh_merge(datasets)?),
        TrainMode::BhSwitch => None,
    };
    let offsets = merge_offsets(datasets);
    let sources: Vec<&Dataset> = datasets.iter().collect();

    let mut model = Model::new(&config.model_config(dim), config.seed)?;
    model.train();
    let sizes: Vec<usize> = model.parameters_mut().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut sampler_rng = rng_stream(config.seed, SAMPLER_STREAM);
    let mut dropout_rng = rng_stream(config.seed, DROPOUT_STREAM);

    let steps = steps_per_epoch(datasets, config.p, config.k);
    let schedule = switch_schedule(datasets, steps, config.switch_policy);
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let lr = config.schedule.lr_at(epoch);
        let mut losses = Vec::with_capacity(steps);
        for (step, &switch_to) in schedule.iter().enumerate() {
            let (batch, source) = match &merged {
                Some(m) => {
                    let mut b = sample_pk_from(m, 0, config.p, config.k, &mut sampler_rng)?;
                    for r in &mut b.refs {
                        let src = offsets.partition_point(|&o| o <= r.1) - 1;
                        *r = (src, r.1 - offsets[src]);
                    }
                    (b, LoggedSource::Merged)
                }
                None => (
                    sample_pk_from(
                        &datasets[switch_to],
                        switch_to,
                        config.p,
                        config.k,
                        &mut sampler_rng,
                    )?,
                    LoggedSource::Dataset(switch_to),
                ),
            };
            let x = gather_rows(&sources, &batch.refs, dim);
            let mask = model.draw_dropout_mask(x.nrows(), &mut dropout_rng);
            let (e, cache) = model.forward_with_mask(x.view(), mask)?;
            let loss =
                batch_hard_loss_with(e.view(), &batch.labels, config.margin, config.reduction)?;
            let (grads, _) = model.backward(&cache, loss.grad.view())?;
            adam.step(&mut model.parameters_mut(), &grads.as_slices(), lr)?;
            losses.push(loss.loss);
            log.steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss: loss.loss,
                mode: config.mode.as_str(),
                source,
            });
        }
        log.close_epoch(epoch, lr, &losses);
    }
    model.eval();
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub mining: MiningConfig,
    pub p: usize,
    pub k: usize,
    pub epochs: u32,
    /// Defaults to [`LrSchedule::finetuning`] over `epochs`.
    pub schedule: Option<LrSchedule>,
    pub margin: MarginMode,
    pub reduction: Reduction,
    /// Keep updating the batch-norm running statistics on target batches.
    pub update_bn_stats: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mining: MiningConfig::default(),
            p: 18,
            k: 4,
            epochs: 20,
            schedule: None,
            margin: MarginMode::Softplus,
            reduction: Reduction::Mean,
            update_bn_stats: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Companion of [`TrainConfig::desk_scale`]: 20 epochs decaying from
    /// `3e-4` to `3e-5`.
    pub fn desk_scale() -> Self {
        Self {
            schedule: Some(LrSchedule {
                lr0: 3e-4,
                lr1: 3e-5,
                hold_until: 1,
                end: 20,
            }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mining.validate()?;
        if self.p < 2 || self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "P and K must be >= 2 (P={}, K={})",
                self.p, self.k
            )));
        }
        self.effective_schedule().validate()
    }

    pub fn effective_schedule(&self) -> LrSchedule {
        self.schedule
            .unwrap_or_else(|| LrSchedule::finetuning(self.epochs))
    }
}

/// Outcome of the mining phase of one fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningReport {
    pub sets: Vec<MinedPairSet>,
    /// Per camera pair, present only when the target carried labels.
    pub purity: Option<Vec<f64>>,
    pub mean_purity: Option<f64>,
    /// Images across all presumed-positive tracklets.
    pub num_positive_images: usize,
    pub steps_per_epoch: usize,
    /// Labeled samples seen by the training path. Always zero.
    pub label_reads: usize,
}

impl MiningReport {
    pub fn num_pairs(&self) -> usize {
        self.sets.iter().map(|s| s.pairs.len()).sum()
    }

    /// `c1 c2 n1 n2 pairs purity` per camera pair, then `mean_purity`.
    pub fn purity_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sets.iter().enumerate() {
            let _ = write!(
                out,
                "{} {} {} {} {}",
                s.cameras.0,
                s.cameras.1,
                s.n1,
                s.n2,
                s.pairs.len()
            );
            if let Some(p) = &self.purity {
                let _ = write!(out, " {:.6}", p[i]);
            }
            out.push('\n');
        }
        if let Some(m) = self.mean_purity {
            let _ = writeln!(out, "mean_purity {m:.6}");
        }
        let _ = writeln!(out, "label_reads {}", self.label_reads);
        out
    }
}

/// Mines every camera pair of `target` with labels stripped, then scores
/// purity against the original labels when they exist. `k` sets the
/// fine-tuning steps per epoch recorded in the report.
pub fn mine_target(
    model: &Model,
    target: &Dataset,
    coocc: &CooccurrenceIndex,
    mining: &MiningConfig,
    k: usize,
    seed: u64,
) -> Result<MiningReport> {
    let blind = target.without_labels();
    let mut sets = mine_all_camera_pairs(model, &blind, coocc, mining, seed)?;
    let num_positive_images: usize = sets
        .iter()
        .flat_map(|s| &s.pairs)
        .map(|p| {
            blind.tracklet_indices(p.tracklet_a).len() + blind.tracklet_indices(p.tracklet_b).len()
        })
        .sum();
    if num_positive_images == 0 {
        return Err(Error::Mining(
            "no presumed-positive pairs were mined".into(),
        ));
    }
    let (purity, mean_purity) = if target.is_labeled() {
        annotate_truth(&mut sets, target)?;
        let purity = sets
            .iter()
            .map(|s| measure_purity(s, target))
            .collect::<Result<Vec<f64>>>()?;
        let mean = purity.iter().sum::<f64>() / purity.len() as f64;
        (Some(purity), Some(mean))
    } else {
        (None, None)
    };
    Ok(MiningReport {
        sets,
        purity,
        mean_purity,
        num_positive_images,
        steps_per_epoch: (num_positive_images / k.max(1)).max(1),
        label_reads: 0,
    })
}

/// Mines presumed-positive cross-camera pairs with `model` and adapts it to
/// `target` with the modified batch-hard loss and RMSProp.
///
/// Labels in `target` are stripped before mining and only consulted
/// afterwards to fill the purity fields of the report.
pub fn finetune(
    model: &Model,
    target: &Dataset,
    coocc: &CooccurrenceIndex,
    config: &FinetuneConfig,
) -> Result<(Model, MiningReport, TrainLog)> {
    config.validate()?;
    let mut model = model.clone();
    model.eval();
    let report = mine_target(&model, target, coocc, &config.mining, config.k, config.seed)?;
    let blind = target.without_labels();
    let pairs: Vec<&MinedPair> = report.sets.iter().flat_map(|s| &s.pairs).collect();
    let steps = report.steps_per_epoch;

    let schedule = config.effective_schedule();
    let sizes: Vec<usize> = model.parameters_mut().iter().map(|p| p.len()).collect();
    let mut rmsprop = RmspropState::new(&sizes);
    let mut order_rng = rng_stream(config.seed, FT_ORDER_STREAM);
    let mut dropout_rng = rng_stream(config.seed, FT_DROPOUT_STREAM);
    let dim = blind.feature_dim();
    let mut label_reads = 0usize;
    let mut log = TrainLog::default();

    if config.epochs > 0 {
        model.train();
    }
    for epoch in 1..=config.epochs {
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut order_rng);
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let pair = pairs[order[step % order.len()]];
            let batch: BatchLayout =
                build_finetune_batch(pair, &blind, config.p, config.k, &mut order_rng)?;
            label_reads += batch
                .refs
                .iter()
                .filter(|r| blind.samples()[r.1].person_id.is_some())
                .count();
            let x = gather_rows(&[&blind], &batch.refs, dim);
            let mask = model.draw_dropout_mask(x.nrows(), &mut dropout_rng);
            let (e, cache) = model.forward_train(x.view(), mask)?;
            if config.update_bn_stats {
                model.update_running_stats(&cache);
            }
            let loss =
                modified_batch_hard_loss_with(e.view(), config.k, config.margin, config.reduction)?;
            let (grads, _) = model.backward(&cache, loss.grad.view())?;
            rmsprop.step(&mut model.parameters_mut(), &grads.as_slices(), lr)?;
            losses.push(loss.loss);
            log.steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss: loss.loss,
                mode: "finetune",
                source: LoggedSource::Target,
            });
        }
        log.close_epoch(epoch, lr, &losses);
    }
    model.eval();
    let report = MiningReport {
        label_reads,
        ..report
    };
    Ok((model, report, log))
}

/// Fine-tunes on the training split, then fine-tunes the result on the test
/// split. Each split carries its own co-occurrence index.
pub fn finetune_two_stage(
    model: &Model,
    train_split: (&Dataset, &CooccurrenceIndex),
    test_split: (&Dataset, &CooccurrenceIndex),
    stage1: &FinetuneConfig,
    stage2: &FinetuneConfig,
) -> Result<(Model, [MiningReport; 2])> {
    let (m1, r1, _) = finetune(model, train_split.0, train_split.1, stage1)?;
    let (m2, r2, _) = finetune(&m1, test_split.0, test_split.1, stage2)?;
    Ok((m2, [r1, r2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_cooccurrence, CooccurrenceScope, Sample};

    fn blobs(ids: u64, per: usize, cameras: u32, dim: usize, spread: f64) -> Dataset {
        let mut samples = Vec::new();
        let mut t = 0;
        for p in 0..ids {
            for c in 0..cameras {
                for i in 0..per {
                    let mut f = vec![0.0; dim];
                    f[(p as usize) % dim] = 3.0 + p as f64 / ids as f64;
                    f[(p as usize + 1) % dim] += spread * ((i as f64) - 1.0) + 0.1 * c as f64;
                    samples.push(Sample {
                        features: f,
                        dataset_id: 0,
                        camera_id: c,
                        person_id: Some(p),
                        tracklet_id: t,
                        time_start: p as f64,
                        time_end: p as f64 + 0.5,
                    });
                }
                t += 1;
            }
        }
        Dataset::new(dim, samples).unwrap()
    }

    fn small_config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            p: 4,
            k: 2,
            epochs: 3,
            schedule: LrSchedule::new(1e-3, 1e-4, 1, 3).unwrap(),
            hidden_dim: 16,
            embedding_dim: 4,
            dropout_rate: 0.1,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn log_lr_matches_schedule() {
        let ds = blobs(6, 2, 2, 6, 0.1);
        let cfg = small_config(TrainMode::BhSwitch);
        let (_, log) = train(std::slice::from_ref(&ds), &cfg).unwrap();
        assert_eq!(log.epochs.len(), 3);
        assert_eq!(
            log.steps.len(),
            3 * steps_per_epoch(std::slice::from_ref(&ds), 4, 2)
        );
        for s in &log.steps {
            assert_eq!(s.lr, cfg.schedule.lr_at(s.epoch));
        }
        assert!(log
            .to_csv()
            .starts_with("epoch,step,lr,loss,mode,source_dataset\n1,0,"));
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = blobs(6, 2, 2, 6, 0.1);
        let cfg = small_config(TrainMode::BhMerge);
        assert!(matches!(
            train(&[ds.without_labels()], &cfg),
            Err(Error::Unlabeled(_))
        ));
        let other = blobs(6, 2, 2, 5, 0.1);
        assert!(matches!(
            train(&[ds.clone(), other], &cfg),
            Err(Error::Shape(_))
        ));
        let zero = TrainConfig {
            epochs: 0,
            ..cfg.clone()
        };
        assert!(train(std::slice::from_ref(&ds), &zero).is_err());
        let small_k = TrainConfig { k: 1, ..cfg };
        assert!(train(&[ds], &small_k).is_err());
    }

    #[test]
    fn merge_log_tags_merged_source() {
        let a = blobs(6, 2, 2, 6, 0.1);
        let (_, log) = train(&[a.clone(), a], &small_config(TrainMode::BhMerge)).unwrap();
        assert!(log.steps.iter().all(|s| s.source == LoggedSource::Merged));
    }

    #[test]
    fn finetune_reports_purity_only_with_labels() {
        let ds = blobs(8, 3, 2, 8, 0.05);
        let coocc = build_cooccurrence(&ds, CooccurrenceScope::Both);
        let base = Model::new(
            &ModelConfig {
                hidden_dim: 16,
                embedding_dim: 8,
                ..ModelConfig::new(8)
            },
            1,
        )
        .unwrap();
        let cfg = FinetuneConfig {
            p: 3,
            k: 2,
            epochs: 2,
            mining: MiningConfig {
                alpha: 0.5,
                negatives_per_pair: 2,
                ..Default::default()
            },
            seed: 3,
            ..Default::default()
        };
        let (m1, r1, log) = finetune(&base, &ds, &coocc, &cfg).unwrap();
        let (m2, r2, _) = finetune(&base, &ds.without_labels(), &coocc, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert!(r1.mean_purity.is_some() && r2.mean_purity.is_none());
        assert_eq!(r1.label_reads, 0);
        assert_eq!(r1.num_pairs(), 4);
        assert_eq!(log.steps.len(), 2 * r1.steps_per_epoch);
        assert_eq!(r1.steps_per_epoch, r1.num_positive_images / 2);
    }

    #[test]
    fn finetune_needs_two_cameras() {
        let ds = blobs(8, 3, 1, 8, 0.05);
        let coocc = build_cooccurrence(&ds, CooccurrenceScope::Both);
        let base = Model::new(
            &ModelConfig {
                hidden_dim: 8,
                embedding_dim: 4,
                ..ModelConfig::new(8)
            },
            1,
        )
        .unwrap();
        assert!(matches!(
            finetune(&base, &ds, &coocc, &FinetuneConfig::default()),
            Err(Error::Mining(_))
        ));
    }

    #[test]
    fn zero_epoch_finetune_is_identity() {
        let ds = blobs(8, 3, 2, 8, 0.05);
        let coocc = build_cooccurrence(&ds, CooccurrenceScope::Both);
        let base = Model::new(
            &ModelConfig {
                hidden_dim: 8,
                embedding_dim: 4,
                ..ModelConfig::new(8)
            },
            1,
        )
        .unwrap();
        let cfg = FinetuneConfig {
            epochs: 0,
            p: 3,
            k: 2,
            mining: MiningConfig {
                negatives_per_pair: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let (m, _, log) = finetune(&base, &ds, &coocc, &cfg).unwrap();
        assert_eq!(m, base);
        assert!(log.steps.is_empty());
    }
}
