//! Training loops for every regime, the frozen-encoder linear probe, and
//! per-epoch test evaluation with best-epoch tracking.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, AugmentationPolicy};
use crate::config::{ExperimentConfig, Regime};
use crate::dsp::{self, MelGram};
use crate::error::{Error, Result};
use crate::eval::{score, Confusion, ScoreReport};
use crate::exec;
use crate::losses::{
    hybrid_loss, multi_supcon_loss, softmax_cross_entropy, supcon_loss, DenominatorMode, HeadInput,
};
use crate::manifest::{metadata_label, Manifest, Split};
use crate::nn::{Linear, Mode, Model, OutputGrads, Tensor};
use crate::optim::{sgd_step, Optimizer};

/// Stream identifiers mixed into the run seed.
mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const VIEW: u64 = 3;
    pub const PROBE_INIT: u64 = 4;
    pub const PROBE_SHUFFLE: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for a sub-stream of `seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

// ---------------------------------------------------------------------------
// Data

/// Precomputed features and labels for every manifest record.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Vec<MelGram>,
    pub classes: Vec<usize>,
    /// Sex × age group; `None` when either is unknown.
    pub meta: Vec<Option<usize>>,
    pub cycle_ids: Vec<String>,
    pub patients: Vec<String>,
    pub split: Vec<Split>,
    pub n_classes: usize,
    pub normal_class: usize,
}

impl FeatureSet {
    /// Computes log-mel features for every record, reusing `data.cache_dir`
    /// entries whose parameter hash matches.
    pub fn from_manifest(m: &Manifest, cfg: &ExperimentConfig) -> Result<Self> {
        let p = &cfg.mel;
        let mut features: Vec<Option<MelGram>> = vec![None; m.records.len()];
        let hash = p.hash();
        if let Some(dir) = &cfg.data.cache_dir {
            for (f, r) in features.iter_mut().zip(&m.records) {
                *f = dsp::read_cached(dir, &r.cycle_id, &hash)?;
            }
        }
        let todo: Vec<usize> = (0..m.records.len()).filter(|&i| features[i].is_none()).collect();
        if !todo.is_empty() {
            let recs: Vec<_> = todo.iter().map(|&i| m.records[i].clone()).collect();
            let computed = dsp::features_for_records(&recs, p)?;
            for (&i, g) in todo.iter().zip(computed) {
                if let Some(dir) = &cfg.data.cache_dir {
                    dsp::write_cached(dir, &m.records[i].cycle_id, &g, &hash)?;
                }
                features[i] = Some(g);
            }
        }
        Self::from_parts(m, cfg, features.into_iter().map(|f| f.expect("filled")).collect())
    }

    /// Attaches labels from `m` to already computed features (same order).
    pub fn from_parts(m: &Manifest, cfg: &ExperimentConfig, features: Vec<MelGram>) -> Result<Self> {
        if features.len() != m.records.len() {
            return Err(Error::Shape(format!(
                "{} feature grids for {} records",
                features.len(),
                m.records.len()
            )));
        }
        let normal_class = m.dataset.label_index(&cfg.data.normal_class).ok_or_else(|| {
            Error::config(
                "data.normal_class",
                format!("`{}` is not a {} label", cfg.data.normal_class, m.dataset),
            )
        })?;
        let scheme = cfg
            .data
            .age_scheme
            .clone()
            .unwrap_or_else(|| m.dataset.default_age_scheme());
        let classes = m
            .records
            .iter()
            .map(|r| m.class_index(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            classes,
            meta: m
                .records
                .iter()
                .map(|r| metadata_label(r.sex, r.age_years, &scheme).map(|l| l.group_id))
                .collect(),
            cycle_ids: m.records.iter().map(|r| r.cycle_id.clone()).collect(),
            patients: m.records.iter().map(|r| r.patient_id.clone()).collect(),
            split: m.records.iter().map(|r| r.split).collect(),
            n_classes: m.n_classes(),
            normal_class,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn grid_shape(&self) -> Option<(usize, usize)> {
        self.features.first().map(|g| (g.n_mels, g.n_frames))
    }

    /// Stacks grids into `[B, 1, n_mels, n_frames]`.
    pub fn stack(&self, grids: &[&MelGram]) -> Result<Tensor<f32>> {
        let (m, t) = grids
            .first()
            .map(|g| (g.n_mels, g.n_frames))
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let mut data = Vec::with_capacity(grids.len() * m * t);
        for g in grids {
            if (g.n_mels, g.n_frames) != (m, t) {
                return Err(Error::Shape(format!(
                    "grid {}×{} in a batch of {m}×{t}; set mel.min_cycle_s = mel.max_cycle_s",
                    g.n_mels, g.n_frames
                )));
            }
            data.extend_from_slice(&g.grid);
        }
        Tensor::from_vec(&[grids.len(), 1, m, t], data)
    }
}

/// `views_per_sample` augmented views of each sample, ordered sample-major:
/// sample 0 view 0, sample 0 view 1, sample 1 view 0, ...
#[derive(Debug, Clone)]
pub struct MultiviewBatch {
    pub x: Tensor<f32>,
    pub class_labels: Vec<usize>,
    pub meta_labels: Vec<Option<usize>>,
    /// Position of each view's source sample within the batch.
    pub origin: Vec<usize>,
    /// Dataset index of each source sample.
    pub records: Vec<usize>,
}

/// Seed of view `v` of dataset record `record` in `epoch`.
pub fn view_seed(run_seed: u64, epoch: usize, record: usize, v: usize) -> u64 {
    derive_seed(run_seed, &[stream::VIEW, epoch as u64, record as u64, v as u64])
}

pub fn build_batch(
    set: &FeatureSet,
    records: &[usize],
    views_per_sample: usize,
    policy: &AugmentationPolicy,
    seed_of: impl Fn(usize, usize) -> u64 + Sync,
) -> Result<MultiviewBatch> {
    let n_views = records.len() * views_per_sample;
    let grids = exec::map_range(n_views, |j| {
        let (s, v) = (j / views_per_sample, j % views_per_sample);
        let rec = records[s];
        let mut rng = ChaCha8Rng::seed_from_u64(seed_of(rec, v));
        augment::apply(&set.features[rec], policy, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let x = set.stack(&grids.iter().collect::<Vec<_>>())?;
    let origin: Vec<usize> = (0..n_views).map(|j| j / views_per_sample).collect();
    Ok(MultiviewBatch {
        x,
        class_labels: origin.iter().map(|&s| set.classes[records[s]]).collect(),
        meta_labels: origin.iter().map(|&s| set.meta[records[s]]).collect(),
        origin,
        records: records.to_vec(),
    })
}

/// Shuffled batches for one epoch. Under `negatives_only`, an order that
/// yields a single-label batch is reshuffled once.
pub fn epoch_batches(train: &[usize], set: &FeatureSet, batch_size: usize, seed: u64, epoch: usize, check_single: bool) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SHUFFLE, epoch as u64]));
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    let single = |o: &[usize]| {
        o.chunks(batch_size)
            .any(|b| b.len() > 1 && b.iter().all(|&i| set.classes[i] == set.classes[b[0]]))
    };
    if check_single && single(&order) {
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

// ---------------------------------------------------------------------------
// Losses per regime

#[derive(Debug, Clone)]
pub struct StepLoss {
    pub total: f64,
    /// Unweighted contrastive loss per projector head.
    pub per_head: Vec<f64>,
    pub ce: Option<f64>,
    pub skipped_anchors: usize,
    pub grads: OutputGrads<f32>,
}

fn degenerate<R>(r: Result<R>) -> Result<Option<R>> {
    match r {
        Err(Error::DegenerateBatch) => Ok(None),
        other => other.map(Some),
    }
}

/// Regime objective on one forward output. `Ok(None)` marks a batch whose
/// contrastive term is undefined (every anchor skipped).
pub fn regime_loss(
    regime: Regime,
    logits: Option<&Tensor<f32>>,
    projections: &[Tensor<f32>],
    batch: &MultiviewBatch,
    cfg: &ExperimentConfig,
) -> Result<Option<StepLoss>> {
    let lc = &cfg.loss;
    let need_logits = || logits.ok_or_else(|| Error::Other("regime needs a classifier head".into()));
    match regime {
        Regime::Ce => {
            let (ce, g) = softmax_cross_entropy(need_logits()?, &batch.class_labels, lc.ce_reduction)?;
            Ok(Some(StepLoss {
                total: ce,
                per_head: Vec::new(),
                ce: Some(ce),
                skipped_anchors: 0,
                grads: OutputGrads {
                    logits: Some(g),
                    projections: Vec::new(),
                },
            }))
        }
        Regime::Scl | Regime::Simclr => {
            let labels = if regime == Regime::Simclr { &batch.origin } else { &batch.class_labels };
            let Some(r) = degenerate(supcon_loss(&projections[0], labels, lc))? else {
                return Ok(None);
            };
            Ok(Some(StepLoss {
                total: r.loss,
                per_head: vec![r.loss],
                ce: None,
                skipped_anchors: r.skipped,
                grads: OutputGrads {
                    logits: None,
                    projections: vec![Some(r.grad)],
                },
            }))
        }
        Regime::Mscl => {
            let class: Vec<Option<usize>> = batch.class_labels.iter().map(|&c| Some(c)).collect();
            let heads = [
                HeadInput {
                    z: &projections[0],
                    labels: &class,
                },
                HeadInput {
                    z: &projections[1],
                    labels: &batch.meta_labels,
                },
            ];
            let Some(r) = degenerate(multi_supcon_loss(&heads, lc))? else {
                return Ok(None);
            };
            Ok(Some(StepLoss {
                total: r.loss,
                per_head: r.per_head,
                ce: None,
                skipped_anchors: r.skipped,
                grads: OutputGrads {
                    logits: None,
                    projections: r.grads.into_iter().map(Some).collect(),
                },
            }))
        }
        Regime::Hybrid => {
            let a = lc.alpha;
            let (ce, mut gl) = softmax_cross_entropy(need_logits()?, &batch.class_labels, lc.ce_reduction)?;
            gl.scale(a as f32);
            let (scl, gp, skipped) = match degenerate(supcon_loss(&projections[0], &batch.class_labels, lc))? {
                Some(mut r) => {
                    r.grad.scale((1.0 - a) as f32);
                    (r.loss, Some(r.grad), r.skipped)
                }
                None => (0.0, None, batch.origin.len()),
            };
            Ok(Some(StepLoss {
                total: hybrid_loss(ce, scl, a),
                per_head: vec![scl],
                ce: Some(ce),
                skipped_anchors: skipped,
                grads: OutputGrads {
                    logits: Some(gl),
                    projections: vec![gp],
                },
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// Epochs

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over steps with a defined loss.
    pub loss: f64,
    pub per_head: Vec<f64>,
    pub ce: Option<f64>,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub skipped_anchors: usize,
    /// Test-split score, for regimes evaluated during training.
    pub score: Option<ScoreReport>,
    pub wall_s: f64,
}

/// Mutable training state carried across epochs.
pub struct Trainer<'a> {
    pub cfg: &'a ExperimentConfig,
    pub set: &'a FeatureSet,
    pub train_idx: Vec<usize>,
    pub opt: Optimizer,
    pub global_step: usize,
    pub total_steps: usize,
    /// Where to drop a batch dump when the loss goes non-finite.
    pub dump_dir: Option<&'a Path>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ExperimentConfig, set: &'a FeatureSet, train_idx: Vec<usize>) -> Self {
        let total_steps = cfg.optimizer.epochs * steps_per_epoch(train_idx.len(), cfg.optimizer.batch_size);
        Self {
            cfg,
            set,
            train_idx,
            opt: Optimizer::new(cfg.optimizer.clone()),
            global_step: 0,
            total_steps,
            dump_dir: None,
        }
    }

    /// One shuffled pass over the training indices.
    pub fn train_epoch(&mut self, model: &mut Model<f32>, epoch: usize) -> Result<EpochStats> {
        let t0 = Instant::now();
        let cfg = self.cfg;
        let regime = cfg.regime.kind;
        let views = regime.views_per_sample(cfg.regime.ce_views);
        let check_single = regime != Regime::Simclr
            && regime != Regime::Ce
            && cfg.loss.denominator_mode == DenominatorMode::NegativesOnly;
        let batches = epoch_batches(
            &self.train_idx,
            self.set,
            cfg.optimizer.batch_size,
            cfg.seed,
            epoch,
            check_single,
        );
        let n_heads = regime.n_projectors();
        let mut stats = EpochStats {
            epoch,
            loss: 0.0,
            per_head: vec![0.0; n_heads],
            ce: regime.has_classifier().then_some(0.0),
            lr: cfg.optimizer.lr_at(self.global_step, self.total_steps),
            steps: batches.len(),
            skipped_steps: 0,
            skipped_anchors: 0,
            score: None,
            wall_s: 0.0,
        };
        let mut counted = 0usize;
        for (step, records) in batches.iter().enumerate() {
            let lr = cfg.optimizer.lr_at(self.global_step, self.total_steps);
            self.global_step += 1;
            let batch = build_batch(self.set, records, views, &cfg.augment, |rec, v| {
                view_seed(cfg.seed, epoch, rec, v)
            })?;
            let out = model.forward(&batch.x, Mode::Train)?;
            let Some(sl) = regime_loss(regime, out.logits.as_ref(), &out.projections, &batch, cfg)? else {
                stats.skipped_steps += 1;
                stats.skipped_anchors += batch.origin.len();
                continue;
            };
            if !sl.total.is_finite() {
                let origins: Vec<String> = records.iter().map(|&i| self.set.cycle_ids[i].clone()).collect();
                if let Some(dir) = self.dump_dir {
                    let dump = format!(
                        "epoch {epoch} step {step} loss {}\n{}\n",
                        sl.total,
                        origins.join("\n")
                    );
                    let path = dir.join("nonfinite_batch.txt");
                    std::fs::write(&path, dump).map_err(|e| Error::io(&path, e))?;
                }
                return Err(Error::NonFiniteLoss { epoch, step, origins });
            }
            model.backward(&sl.grads)?;
            self.opt.step(model.params_mut(), lr);
            model.zero_grad();
            counted += 1;
            stats.loss += sl.total;
            for (acc, v) in stats.per_head.iter_mut().zip(&sl.per_head) {
                *acc += v;
            }
            if let (Some(acc), Some(v)) = (stats.ce.as_mut(), sl.ce) {
                *acc += v;
            }
            stats.skipped_anchors += sl.skipped_anchors;
        }
        if counted > 0 {
            let n = counted as f64;
            stats.loss /= n;
            stats.per_head.iter_mut().for_each(|v| *v /= n);
            if let Some(c) = stats.ce.as_mut() {
                *c /= n;
            }
        }
        stats.wall_s = t0.elapsed().as_secs_f64();
        Ok(stats)
    }
}

// ---------------------------------------------------------------------------
// Inference

/// Encoder embeddings in eval mode, computed in chunks of `batch_size`.
pub fn embed(model: &mut Model<f32>, set: &FeatureSet, idx: &[usize], batch_size: usize) -> Result<Tensor<f32>> {
    let dim = model.config().encoder.embedding_dim();
    let mut data = Vec::with_capacity(idx.len() * dim);
    for chunk in idx.chunks(batch_size.max(1)) {
        let grids: Vec<&MelGram> = chunk.iter().map(|&i| &set.features[i]).collect();
        let x = set.stack(&grids)?;
        data.extend_from_slice(model.encoder.forward(&x, Mode::Eval)?.data());
    }
    Tensor::from_vec(&[idx.len(), dim], data)
}

fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    (0..logits.dim(0))
        .map(|r| {
            let row = logits.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

/// Class predictions of the model's classifier on unaugmented inputs.
pub fn predict(model: &mut Model<f32>, set: &FeatureSet, idx: &[usize], batch_size: usize) -> Result<Vec<usize>> {
    let emb = embed(model, set, idx, batch_size)?;
    let clf = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Other("model has no classifier head".into()))?;
    Ok(argmax_rows(&clf.apply(&emb)?))
}

pub fn confusion_for(set: &FeatureSet, idx: &[usize], pred: &[usize]) -> Result<Confusion> {
    let truth: Vec<usize> = idx.iter().map(|&i| set.classes[i]).collect();
    Confusion::from_predictions(set.n_classes, &truth, pred)
}

pub fn evaluate(model: &mut Model<f32>, set: &FeatureSet, idx: &[usize], cfg: &ExperimentConfig) -> Result<(ScoreReport, Confusion)> {
    let pred = predict(model, set, idx, cfg.optimizer.batch_size)?;
    let c = confusion_for(set, idx, &pred)?;
    Ok((score(&c, set.normal_class, cfg.eval.sensitivity)?, c))
}

// ---------------------------------------------------------------------------
// Linear probe

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub score: ScoreReport,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub log: Vec<ProbeEpoch>,
    pub best_epoch: usize,
    pub best: ScoreReport,
    pub best_confusion: Confusion,
    /// Probe weights at the best epoch.
    pub probe: Linear<f32>,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

/// Trains a linear classifier on frozen, eval-mode encoder embeddings with
/// constant-rate SGD and no augmentation; scores the test split each epoch.
pub fn fit_probe(model: &mut Model<f32>, set: &FeatureSet, splits: &Splits, cfg: &ExperimentConfig) -> Result<ProbeResult> {
    let (train_idx, test_idx) = (&splits.train[..], &splits.test[..]);
    let was_frozen = model.encoder_frozen();
    model.set_encoder_frozen(true);
    let hash_before = model.encoder_hash();
    let bs = cfg.probe_batch_size();
    let train_emb = embed(model, set, train_idx, bs)?;
    let test_emb = embed(model, set, test_idx, bs)?;
    let select_emb = match splits.has_validation() {
        true => Some(embed(model, set, &splits.select, bs)?),
        false => None,
    };
    let hash_after = model.encoder_hash();
    model.set_encoder_frozen(was_frozen);

    let dim = train_emb.dim(1);
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::PROBE_INIT]));
    let mut probe = Linear::<f32>::new(dim, set.n_classes, &mut init_rng);
    let lr = cfg.regime.probe_lr;
    let train_y: Vec<usize> = train_idx.iter().map(|&i| set.classes[i]).collect();
    let mut log = Vec::with_capacity(cfg.regime.probe_epochs);
    // (epoch, selection Sc, test score, probe, test confusion)
    let mut best: Option<(usize, f64, ScoreReport, Linear<f32>, Confusion)> = None;
    for epoch in 1..=cfg.regime.probe_epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::PROBE_SHUFFLE, epoch as u64]));
        let mut order: Vec<usize> = (0..train_idx.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(bs) {
            let mut x = Vec::with_capacity(chunk.len() * dim);
            for &r in chunk {
                x.extend_from_slice(train_emb.row(r));
            }
            let x = Tensor::from_vec(&[chunk.len(), dim], x)?;
            let y: Vec<usize> = chunk.iter().map(|&r| train_y[r]).collect();
            let logits = probe.forward(&x)?;
            let (loss, g) = softmax_cross_entropy(&logits, &y, cfg.loss.ce_reduction)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: steps,
                    origins: chunk.iter().map(|&r| set.cycle_ids[train_idx[r]].clone()).collect(),
                });
            }
            probe.backward(&g)?;
            sgd_step(
                vec![
                    ("probe.weight".to_string(), &mut probe.weight),
                    ("probe.bias".to_string(), &mut probe.bias),
                ],
                lr,
            );
            probe.weight.grad = None;
            probe.bias.grad = None;
            total += loss;
            steps += 1;
        }
        let pred = argmax_rows(&probe.apply(&test_emb)?);
        let conf = confusion_for(set, test_idx, &pred)?;
        let s = score(&conf, set.normal_class, cfg.eval.sensitivity)?;
        let sel = match &select_emb {
            Some(e) => {
                let pred = argmax_rows(&probe.apply(e)?);
                let v = score(&confusion_for(set, &splits.select, &pred)?, set.normal_class, cfg.eval.sensitivity)?;
                log::debug!("probe epoch {epoch} validation {v}");
                v.sc
            }
            None => s.sc,
        };
        if best.as_ref().is_none_or(|(_, b, _, _, _)| sel > *b) {
            best = Some((epoch, sel, s, probe.clone(), conf));
        }
        log.push(ProbeEpoch {
            epoch,
            loss: total / steps.max(1) as f64,
            lr,
            score: s,
            wall_s: t0.elapsed().as_secs_f64(),
        });
    }
    let (best_epoch, _, best_score, best_probe, best_confusion) =
        best.ok_or_else(|| Error::Other("no probe epochs".into()))?;
    Ok(ProbeResult {
        log,
        best_epoch,
        best: best_score,
        best_confusion,
        probe: best_probe,
        encoder_hash_before: hash_before,
        encoder_hash_after: hash_after,
    })
}

// ---------------------------------------------------------------------------
// Full runs

#[derive(Debug, Clone)]
pub struct RunResult {
    pub regime: Regime,
    pub epochs: Vec<EpochStats>,
    pub probe: Option<ProbeResult>,
    /// Epoch of the reported score (probe epoch for two-stage regimes).
    pub best_epoch: usize,
    pub best: ScoreReport,
    pub best_confusion: Confusion,
    /// Model after the last training epoch.
    pub last_model: Model<f32>,
    /// Encoder and classifier at the reported epoch.
    pub best_model: Model<f32>,
}

impl RunResult {
    pub fn balanced_accuracy(&self) -> f64 {
        self.best_confusion.balanced_accuracy()
    }
}

/// Training split indices; the metadata regime drops records whose
/// metadata is unknown.
pub fn training_indices(set: &FeatureSet, regime: Regime) -> Vec<usize> {
    let idx = set.indices(Split::Train);
    if regime == Regime::Mscl {
        let kept: Vec<usize> = idx.iter().copied().filter(|&i| set.meta[i].is_some()).collect();
        if kept.len() < idx.len() {
            log::warn!(
                "{} training cycles without metadata excluded from mscl",
                idx.len() - kept.len()
            );
        }
        kept
    } else {
        idx
    }
}

/// Index sets of a run. `select` picks the reported epoch; it is the test
/// split itself unless `eval.validation_patients` holds patients out of
/// training.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub select: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn new(set: &FeatureSet, cfg: &ExperimentConfig) -> Result<Self> {
        let mut train = training_indices(set, cfg.regime.kind);
        let test = set.indices(Split::Test);
        let k = cfg.eval.validation_patients;
        if k == 0 {
            return Ok(Self {
                train,
                select: test.clone(),
                test,
            });
        }
        let patients: std::collections::BTreeSet<&str> = train.iter().map(|&i| set.patients[i].as_str()).collect();
        if k >= patients.len() {
            return Err(Error::config(
                "eval.validation_patients",
                format!("{k} of {} training patients leaves nothing to train on", patients.len()),
            ));
        }
        let held: Vec<&str> = patients.into_iter().rev().take(k).collect();
        let (select, rest): (Vec<usize>, Vec<usize>) =
            train.iter().partition(|&&i| held.contains(&set.patients[i].as_str()));
        train = rest;
        Ok(Self { train, select, test })
    }

    pub fn has_validation(&self) -> bool {
        self.select != self.test
    }
}

pub fn init_model(cfg: &ExperimentConfig, n_classes: usize) -> Result<Model<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::INIT]));
    Model::new(&cfg.model_config(n_classes), &mut rng)
}

/// Hooks invoked while a run progresses.
pub trait RunObserver {
    fn epoch(&mut self, _stats: &EpochStats) -> Result<()> {
        Ok(())
    }
    fn probe_epoch(&mut self, _stats: &ProbeEpoch) -> Result<()> {
        Ok(())
    }
}

impl RunObserver for () {}

/// Trains `model` under the configured regime. CE and hybrid runs are
/// scored on the test split after every epoch; two-stage regimes train the
/// projector heads, then fit a probe on the frozen encoder.
pub fn run(
    cfg: &ExperimentConfig,
    set: &FeatureSet,
    mut model: Model<f32>,
    dump_dir: Option<&Path>,
    obs: &mut dyn RunObserver,
) -> Result<RunResult> {
    cfg.validate()?;
    let regime = cfg.regime.kind;
    let splits = Splits::new(set, cfg)?;
    if splits.train.is_empty() || splits.test.is_empty() || splits.select.is_empty() {
        return Err(Error::Other("need non-empty train and test splits".into()));
    }
    let mut trainer = Trainer::new(cfg, set, splits.train.clone());
    trainer.dump_dir = dump_dir;
    let mut epochs = Vec::with_capacity(cfg.optimizer.epochs);
    // (epoch, selection Sc, test score, test confusion, weights)
    let mut best: Option<(usize, f64, ScoreReport, Confusion, Vec<Tensor<f32>>)> = None;
    for epoch in 1..=cfg.optimizer.epochs {
        let mut stats = trainer.train_epoch(&mut model, epoch)?;
        if regime.has_classifier() {
            let (s, c) = evaluate(&mut model, set, &splits.test, cfg)?;
            stats.score = Some(s);
            let sel = match splits.has_validation() {
                true => evaluate(&mut model, set, &splits.select, cfg)?.0.sc,
                false => s.sc,
            };
            if best.as_ref().is_none_or(|(_, b, _, _, _)| sel > *b) {
                best = Some((epoch, sel, s, c, snapshot(&model)));
            }
        }
        obs.epoch(&stats)?;
        log::info!(
            "epoch {epoch} loss {:.4} lr {:.2e}{}",
            stats.loss,
            stats.lr,
            stats.score.map(|s| format!(" {s}")).unwrap_or_default()
        );
        epochs.push(stats);
    }

    if let Some((best_epoch, _, s, c, state)) = best {
        let mut best_model = model.clone();
        restore(&mut best_model, &state);
        return Ok(RunResult {
            regime,
            epochs,
            probe: None,
            best_epoch,
            best: s,
            best_confusion: c,
            last_model: model,
            best_model,
        });
    }

    let probe = fit_probe(&mut model, set, &splits, cfg)?;
    for p in &probe.log {
        obs.probe_epoch(p)?;
    }
    let best_model = attach_probe(cfg, &model, &probe.probe, set.n_classes)?;
    Ok(RunResult {
        regime,
        epochs,
        best_epoch: probe.best_epoch,
        best: probe.best,
        best_confusion: probe.best_confusion.clone(),
        probe: Some(probe),
        last_model: model,
        best_model,
    })
}

/// Standalone encoder + probe classifier graph.
pub fn attach_probe(cfg: &ExperimentConfig, model: &Model<f32>, probe: &Linear<f32>, n_classes: usize) -> Result<Model<f32>> {
    // both parts are overwritten below, so the init stream does not matter
    let mut out = Model::new(&cfg.probe_model_config(n_classes), &mut ChaCha8Rng::seed_from_u64(0))?;
    out.encoder = model.encoder.clone();
    out.classifier = Some(probe.clone());
    Ok(out)
}

fn snapshot(model: &Model<f32>) -> Vec<Tensor<f32>> {
    model.state().into_iter().map(|(_, t)| t.clone()).collect()
}

fn restore(model: &mut Model<f32>, state: &[Tensor<f32>]) {
    for ((_, t), s) in model.state_mut().into_iter().zip(state) {
        t.data_mut().copy_from_slice(s.data());
    }
}
