//! Losses, task weighting and the optimisation loop.
//!
//! The objective for a sentence of `n` characters is
//! `L = 1/n * sum_i (Lc_i + w_i * Lp_i)`, where `Lc_i` is the character
//! cross-entropy, `Lp_i` the pronunciation cross-entropy (averaged over the
//! initial, final and tone heads in fine mode) and `w_i` the per-position
//! weight chosen by the [`WeightingScheme`]. Batches pool positions: `n` is
//! the number of characters across the batch.
//!
//! Fully adaptive weights encode the target sentence with the same encoder
//! and compare pronunciation features: `w_i = exp(-(cos_i - 1)^2)`. That
//! branch is detached, so the weights enter the backward pass as constants.

use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Gradients, Graph, Matrix, Var};
use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Granularity, Model, PackedInput, PronLogits, PronVars, SentenceRef};
use crate::pinyin::{edit_weight, TripletIds};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightingScheme {
    /// `w_i = 1`.
    #[serde(rename = "non")]
    NonAdaptive,
    /// `w_i = 1 - lev(source pinyin, target pinyin) / max length`, fixed per pair.
    #[serde(rename = "part")]
    PartiallyAdaptive,
    /// `w_i = exp(-(cos_i - 1)^2)` from the current encoder.
    #[serde(rename = "full")]
    FullyAdaptive,
}

impl std::str::FromStr for WeightingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non" | "non-adaptive" => Ok(WeightingScheme::NonAdaptive),
            "part" | "partially-adaptive" => Ok(WeightingScheme::PartiallyAdaptive),
            "full" | "fully-adaptive" => Ok(WeightingScheme::FullyAdaptive),
            other => Err(Error::InvalidConfig(format!("unknown weighting scheme `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub w: Vec<f64>,
}

/// Per-position losses and their weighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub char_losses: Vec<f64>,
    pub pron_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean_char(&self) -> f64 {
        mean(&self.char_losses)
    }

    pub fn mean_pron(&self) -> f64 {
        mean(&self.pron_losses)
    }

    pub fn mean_weight(&self) -> f64 {
        mean(&self.weights)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// The weight as a function of pronunciation-feature cosine similarity.
pub fn similarity_weight(cos: f64) -> f64 {
    (-(cos - 1.0).powi(2)).exp()
}

/// Cosine of two rows. Identical rows give exactly 1; a zero row against a
/// different row gives 0.
pub fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    if a == b {
        return 1.0;
    }
    let norm = a.dot(&a).sqrt() * b.dot(&b).sqrt();
    if norm == 0.0 {
        0.0
    } else {
        (a.dot(&b) / norm).clamp(-1.0, 1.0)
    }
}

/// Pronunciation targets, `None` where the target character has no reading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PronTargets {
    Fine(Vec<Option<TripletIds>>),
    Coarse(Vec<Option<usize>>),
}

impl PronTargets {
    pub fn len(&self) -> usize {
        match self {
            PronTargets::Fine(v) => v.len(),
            PronTargets::Coarse(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask(&self) -> Vec<bool> {
        match self {
            PronTargets::Fine(v) => v.iter().map(Option::is_some).collect(),
            PronTargets::Coarse(v) => v.iter().map(Option::is_some).collect(),
        }
    }

    fn extend(&mut self, other: PronTargets) {
        match (self, other) {
            (PronTargets::Fine(a), PronTargets::Fine(b)) => a.extend(b),
            (PronTargets::Coarse(a), PronTargets::Coarse(b)) => a.extend(b),
            _ => unreachable!("targets of one batch share a granularity"),
        }
    }
}

/// `-log softmax(logits_i)[target_i]` per row.
pub fn char_loss(char_logits: &Matrix, target_ids: &[usize]) -> Result<Vec<f64>> {
    if char_logits.nrows() != target_ids.len() {
        return Err(Error::LengthMismatch {
            what: "logit rows vs targets",
            left: char_logits.nrows(),
            right: target_ids.len(),
        });
    }
    Ok(row_cross_entropy(char_logits, target_ids.iter().copied()))
}

fn row_cross_entropy(logits: &Matrix, targets: impl Iterator<Item = usize>) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, t)| log_sum_exp(row) - row[t])
        .collect()
}

/// Fine: mean of the initial, final and tone cross-entropies. Coarse: the
/// whole-syllable cross-entropy. Positions without a target are 0.
pub fn pron_loss(pron_logits: &PronLogits, targets: &PronTargets) -> Result<Vec<f64>> {
    let ce = |m: &Matrix, t: &[Option<usize>]| -> Result<Vec<f64>> {
        if m.nrows() != t.len() {
            return Err(Error::LengthMismatch {
                what: "logit rows vs targets",
                left: m.nrows(),
                right: t.len(),
            });
        }
        let losses = row_cross_entropy(m, t.iter().map(|t| t.unwrap_or(0)));
        Ok(losses
            .into_iter()
            .zip(t)
            .map(|(l, t)| if t.is_some() { l } else { 0.0 })
            .collect())
    };
    match (pron_logits, targets) {
        (
            PronLogits::Fine {
                initial,
                final_,
                tone,
            },
            PronTargets::Fine(ids),
        ) => {
            let pick = |f: fn(&TripletIds) -> usize| ids.iter().map(|t| t.as_ref().map(f)).collect::<Vec<_>>();
            let a = ce(initial, &pick(|t| t.initial))?;
            let b = ce(final_, &pick(|t| t.final_))?;
            let c = ce(tone, &pick(|t| t.tone))?;
            Ok((0..a.len()).map(|i| (a[i] + b[i] + c[i]) / 3.0).collect())
        }
        (PronLogits::Coarse { syllable }, PronTargets::Coarse(ids)) => ce(syllable, ids),
        _ => Err(Error::GranularityMismatch),
    }
}

/// `1/n * sum_i (Lc_i + w_i * Lp_i)`.
pub fn total_loss(char_losses: &[f64], pron_losses: &[f64], weights: &[f64]) -> Result<LossBreakdown> {
    let n = char_losses.len();
    for (what, len) in [("pron losses", pron_losses.len()), ("weights", weights.len())] {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                left: n,
                right: len,
            });
        }
    }
    if n == 0 {
        return Err(Error::Empty("loss positions"));
    }
    let sum: f64 = (0..n).map(|i| char_losses[i] + weights[i] * pron_losses[i]).sum();
    Ok(LossBreakdown {
        char_losses: char_losses.to_vec(),
        pron_losses: pron_losses.to_vec(),
        weights: weights.to_vec(),
        total: sum / n as f64,
    })
}

/// Static weight from pinyin edit distance; a missing reading on either side
/// counts as the empty string.
fn edit_weights(source: SentenceRef<'_>, target: SentenceRef<'_>) -> Vec<f64> {
    source
        .pinyin
        .iter()
        .zip(target.pinyin)
        .map(|(s, t)| {
            let s = s.as_ref().map_or("", |s| s.as_str());
            let t = t.as_ref().map_or("", |t| t.as_str());
            edit_weight(s, t)
        })
        .collect()
}

fn cosine_weights(source_features: &Matrix, target_features: &Matrix) -> Vec<f64> {
    source_features
        .rows()
        .into_iter()
        .zip(target_features.rows())
        .map(|(a, b)| similarity_weight(cosine(a, b)))
        .collect()
}

/// Task weights for one sentence under `scheme`. Both adaptive schemes need
/// the target sentence.
pub fn adaptive_weights(
    model: &Model,
    source: SentenceRef<'_>,
    target: Option<SentenceRef<'_>>,
    scheme: WeightingScheme,
) -> Result<WeightVector> {
    let n = source.len();
    let w = match scheme {
        WeightingScheme::NonAdaptive => vec![1.0; n],
        WeightingScheme::PartiallyAdaptive => {
            let target = target.ok_or(Error::MissingTarget)?;
            check_aligned(source, target)?;
            edit_weights(source, target)
        }
        WeightingScheme::FullyAdaptive => {
            let target = target.ok_or(Error::MissingTarget)?;
            check_aligned(source, target)?;
            let hx = model.encode(source.chars, source.pinyin)?.hidden;
            let hy = model.encode(target.chars, target.pinyin)?.hidden;
            cosine_weights(&model.pron_projection(&hx), &model.pron_projection(&hy))
        }
    };
    Ok(WeightVector { w })
}

fn check_aligned(a: SentenceRef<'_>, b: SentenceRef<'_>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "source vs target",
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Model inputs and targets for a batch of pairs, positions pooled.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub source: PackedInput,
    pub target: PackedInput,
    pub char_targets: Vec<usize>,
    pub pron_targets: PronTargets,
    /// Partially adaptive weights, computed once at load time.
    pub edit_weights: Vec<f64>,
}

impl PreparedBatch {
    pub fn new(model: &Model, pairs: &[SentencePair]) -> Result<Self> {
        let refs: Vec<&SentencePair> = pairs.iter().collect();
        Self::from_refs(model, &refs)
    }

    pub fn from_refs(model: &Model, pairs: &[&SentencePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let lex = model.lexicon();
        let source = model.pack(pairs.iter().map(|p| p.source_ref()))?;
        let target = model.pack(pairs.iter().map(|p| p.target_ref()))?;
        let char_targets = pairs
            .iter()
            .flat_map(|p| p.target.iter().map(|&c| lex.char_id(c)))
            .collect();
        let mut pron_targets = match model.granularity() {
            Granularity::Fine => PronTargets::Fine(Vec::new()),
            Granularity::Coarse => PronTargets::Coarse(Vec::new()),
        };
        let mut weights = Vec::new();
        for p in pairs {
            pron_targets.extend(match model.granularity() {
                Granularity::Fine => PronTargets::Fine(
                    p.target_triplets
                        .iter()
                        .map(|t| t.as_ref().and_then(|t| lex.triplet_ids(t)))
                        .collect(),
                ),
                Granularity::Coarse => PronTargets::Coarse(
                    p.target_pinyin
                        .iter()
                        .map(|s| s.as_ref().and_then(|s| lex.syllable_class(s)))
                        .collect(),
                ),
            });
            weights.extend(edit_weights(p.source_ref(), p.target_ref()));
        }
        Ok(PreparedBatch {
            source,
            target,
            char_targets,
            pron_targets,
            edit_weights: weights,
        })
    }

    pub fn positions(&self) -> usize {
        self.char_targets.len()
    }
}

/// Where the per-position weights come from.
#[derive(Clone, Copy, Debug)]
pub enum Weights<'a> {
    Scheme(WeightingScheme),
    /// Constants supplied by the caller.
    Fixed(&'a [f64]),
}

/// Graph handles and values of one forward pass.
pub struct ForwardLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Encoder output of the source rows.
    pub hidden: Var,
}

/// Builds the full training objective on `g`.
pub fn forward_loss(model: &Model, g: &mut Graph, batch: &PreparedBatch, weights: Weights<'_>) -> Result<ForwardLoss> {
    let n = batch.positions();
    let hidden = model.encode_graph(g, &batch.source);
    let char_features = model.char_projection_graph(g, hidden);
    let char_logits = model.char_logits_graph(g, char_features);
    let char_ce = g.cross_entropy(char_logits, &batch.char_targets);

    let pron_features = model.pron_projection_graph(g, hidden);
    let heads = model.pron_logits_graph(g, pron_features)?;
    let pron_ce = match (heads, &batch.pron_targets) {
        (
            PronVars::Fine {
                initial,
                final_,
                tone,
            },
            PronTargets::Fine(ids),
        ) => {
            let pick = |f: fn(&TripletIds) -> usize| ids.iter().map(|t| t.as_ref().map_or(0, f)).collect::<Vec<_>>();
            let a = g.cross_entropy(initial, &pick(|t| t.initial));
            let b = g.cross_entropy(final_, &pick(|t| t.final_));
            let c = g.cross_entropy(tone, &pick(|t| t.tone));
            let ab = g.add(a, b);
            let abc = g.add(ab, c);
            g.scale(abc, 1.0 / 3.0)
        }
        (PronVars::Coarse { syllable }, PronTargets::Coarse(ids)) => {
            let t: Vec<usize> = ids.iter().map(|t| t.unwrap_or(0)).collect();
            g.cross_entropy(syllable, &t)
        }
        _ => return Err(Error::GranularityMismatch),
    };

    let w: Vec<f64> = match weights {
        Weights::Fixed(w) => {
            if w.len() != n {
                return Err(Error::LengthMismatch {
                    what: "fixed weights vs positions",
                    left: w.len(),
                    right: n,
                });
            }
            w.to_vec()
        }
        Weights::Scheme(WeightingScheme::NonAdaptive) => vec![1.0; n],
        Weights::Scheme(WeightingScheme::PartiallyAdaptive) => batch.edit_weights.clone(),
        Weights::Scheme(WeightingScheme::FullyAdaptive) => {
            let target_hidden = model.encode_graph(g, &batch.target);
            let target_features = model.pron_projection_graph(g, target_hidden);
            let target_features = g.detach(target_features);
            cosine_weights(g.value(pron_features), g.value(target_features))
        }
    };

    let mask = batch.pron_targets.mask();
    let effective: Vec<f64> = w.iter().zip(&mask).map(|(&w, &m)| if m { w } else { 0.0 }).collect();
    let weighted_pron = g.row_scale(pron_ce, &effective);
    let per_position = g.add(char_ce, weighted_pron);
    let sum = g.sum(per_position);
    let loss = g.scale(sum, 1.0 / n as f64);

    let char_losses: Vec<f64> = g.value(char_ce).iter().copied().collect();
    let pron_losses: Vec<f64> = g
        .value(pron_ce)
        .iter()
        .zip(&mask)
        .map(|(&l, &m)| if m { l } else { 0.0 })
        .collect();
    let breakdown = LossBreakdown {
        char_losses,
        pron_losses,
        weights: w,
        total: g.value(loss)[[0, 0]],
    };
    Ok(ForwardLoss {
        loss,
        breakdown,
        hidden,
    })
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_gradients(model: &Model, batch: &PreparedBatch, weights: Weights<'_>) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new(model.params().values());
    let fwd = forward_loss(model, &mut g, batch, weights)?;
    let grads = g.backward(fwd.loss);
    Ok((fwd.breakdown, grads))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        let zeros: Vec<Matrix> = model
            .params()
            .values()
            .iter()
            .map(|p| Matrix::zeros(p.raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Parameters that got no gradient are left untouched.
    pub fn update(&mut self, params: &mut [Matrix], grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// One optimisation step on `batch`.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    batch: &PreparedBatch,
    scheme: WeightingScheme,
) -> Result<LossBreakdown> {
    let (breakdown, grads) = loss_and_gradients(model, batch, Weights::Scheme(scheme))?;
    let step = optimizer.steps() as usize + 1;
    if !breakdown.total.is_finite() {
        return Err(Error::NaNLoss {
            step,
            detail: format!(
                "total={} mean char={} mean pron={} mean weight={}",
                breakdown.total,
                breakdown.mean_char(),
                breakdown.mean_pron(),
                breakdown.mean_weight()
            ),
        });
    }
    optimizer.update(model.param_values_mut(), &grads);
    if !model.params().all_finite() {
        return Err(Error::NaNLoss {
            step,
            detail: "non-finite parameter after update".into(),
        });
    }
    Ok(breakdown)
}

/// Optimisation settings, as read from the JSON training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheme: WeightingScheme,
    pub granularity: Granularity,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many optimiser steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    /// Fine-tuning defaults: lr 5e-5, batch 64, 30 epochs, fully adaptive.
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 64,
            epochs: 30,
            scheme: WeightingScheme::FullyAdaptive,
            granularity: Granularity::Fine,
            seed: 0,
            checkpoint_dir: None,
            max_steps: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// Pre-training defaults: lr 1e-4, batch 512, one epoch, weight 1.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 512,
            epochs: 1,
            scheme: WeightingScheme::NonAdaptive,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Position-weighted means over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub positions: usize,
    pub mean_total: f64,
    pub mean_char: f64,
    pub mean_pron: f64,
    pub mean_weight: f64,
}

/// Checkpoint written after every epoch when `checkpoint_dir` is set.
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Runs `cfg.epochs` epochs of mini-batch training under `scheme`.
pub fn train(
    model: &mut Model,
    pairs: &[SentencePair],
    cfg: &TrainConfig,
    scheme: WeightingScheme,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Adam::new(model, cfg.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut reports = Vec::new();
    let mut steps = 0;

    'epochs: for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut report = EpochReport {
            epoch,
            steps: 0,
            positions: 0,
            mean_total: 0.0,
            mean_char: 0.0,
            mean_pron: 0.0,
            mean_weight: 0.0,
        };
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|max| steps >= max) {
                finish_epoch(&mut report, model, cfg, &mut reports)?;
                break 'epochs;
            }
            let batch_pairs: Vec<&SentencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let batch = PreparedBatch::from_refs(model, &batch_pairs)?;
            let b = train_step(model, &mut optimizer, &batch, scheme)?;
            let n = b.char_losses.len();
            report.steps += 1;
            report.positions += n;
            report.mean_total += b.total * n as f64;
            report.mean_char += b.char_losses.iter().sum::<f64>();
            report.mean_pron += b.pron_losses.iter().sum::<f64>();
            report.mean_weight += b.weights.iter().sum::<f64>();
            steps += 1;
        }
        finish_epoch(&mut report, model, cfg, &mut reports)?;
    }
    Ok(reports)
}

fn finish_epoch(
    report: &mut EpochReport,
    model: &Model,
    cfg: &TrainConfig,
    reports: &mut Vec<EpochReport>,
) -> Result<()> {
    if report.steps == 0 {
        return Ok(());
    }
    let n = report.positions as f64;
    report.mean_total /= n;
    report.mean_char /= n;
    report.mean_pron /= n;
    report.mean_weight /= n;
    info!(
        "epoch {} steps {} loss {:.5} char {:.5} pron {:.5} weight {:.4}",
        report.epoch, report.steps, report.mean_total, report.mean_char, report.mean_pron, report.mean_weight
    );
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(model, &dir.join(LAST_CHECKPOINT))?;
    }
    reports.push(report.clone());
    Ok(())
}

/// Pre-training on synthesized pairs; the pronunciation weight is fixed at 1.
pub fn pretrain(model: &mut Model, pairs: &[SentencePair], cfg: &TrainConfig) -> Result<Vec<EpochReport>> {
    train(model, pairs, cfg, WeightingScheme::NonAdaptive)
}

/// Fine-tuning with the configured weighting scheme.
pub fn finetune(model: &mut Model, pairs: &[SentencePair], cfg: &TrainConfig) -> Result<Vec<EpochReport>> {
    train(model, pairs, cfg, cfg.scheme)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Lexicon, ModelConfig};
    use crate::pinyin::SyllableTable;
    use ndarray::array;

    fn toy(granularity: Granularity) -> (Model, SyllableTable) {
        let table = SyllableTable::builtin();
        let lexicon = Lexicon::new("我真糊涂户秃以前想要高告诉你".chars(), &table);
        let config = ModelConfig {
            embed_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            max_len: 16,
            granularity,
            init_std: 0.2,
            ..Default::default()
        };
        (Model::new(config, lexicon).unwrap(), table)
    }

    fn pair(table: &SyllableTable, src: &str, tgt: &str) -> SentencePair {
        SentencePair::new(src.chars().collect(), tgt.chars().collect(), table).unwrap()
    }

    #[test]
    fn weight_function_values() {
        assert_eq!(similarity_weight(1.0), 1.0);
        assert!((similarity_weight(0.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((similarity_weight(-1.0) - 0.018_315_638_888_734_18).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let losses = char_loss(&Matrix::zeros((3, 4)), &[0, 1, 3]).unwrap();
        for l in losses {
            assert!((l - 4f64.ln()).abs() < 1e-15);
        }
        let fine = PronLogits::Fine {
            initial: Matrix::zeros((2, 10)),
            final_: Matrix::zeros((2, 10)),
            tone: Matrix::zeros((2, 10)),
        };
        let t = TripletIds {
            initial: 1,
            final_: 2,
            tone: 3,
        };
        let losses = pron_loss(&fine, &PronTargets::Fine(vec![Some(t), Some(t)])).unwrap();
        for l in losses {
            assert!((l - 10f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn confident_logits_approach_zero_loss() {
        let mut prev = f64::INFINITY;
        for gap in [1.0, 5.0, 20.0, 50.0] {
            let l = char_loss(&array![[gap, 0.0, 0.0]], &[0]).unwrap()[0];
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn pron_loss_granularity_mismatch() {
        let coarse = PronLogits::Coarse {
            syllable: Matrix::zeros((1, 3)),
        };
        let err = pron_loss(&coarse, &PronTargets::Fine(vec![None])).unwrap_err();
        assert!(matches!(err, Error::GranularityMismatch));
    }

    #[test]
    fn total_loss_cases() {
        let c = [0.5, 1.5, 2.0];
        let p = [1.0, 3.0, 0.25];
        assert!((total_loss(&c, &p, &[0.0; 3]).unwrap().total - 4.0 / 3.0).abs() < 1e-15);
        let ones = total_loss(&c, &p, &[1.0; 3]).unwrap();
        assert!((ones.total - (4.0 + 4.25) / 3.0).abs() < 1e-15);
        assert!(matches!(
            total_loss(&c, &p, &[1.0; 2]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn scheme_weights() {
        let (model, table) = toy(Granularity::Fine);
        let p = pair(&table, "我以前想要高诉你", "我以前想要告诉你");
        let non = adaptive_weights(&model, p.source_ref(), None, WeightingScheme::NonAdaptive).unwrap();
        assert_eq!(non.w, vec![1.0; 8]);
        let part = adaptive_weights(&model, p.source_ref(), Some(p.target_ref()), WeightingScheme::PartiallyAdaptive)
            .unwrap();
        assert_eq!(part.w[5], 0.75);
        assert_eq!(part.w[0], 1.0);
        let full = adaptive_weights(&model, p.source_ref(), Some(p.target_ref()), WeightingScheme::FullyAdaptive)
            .unwrap();
        assert!(full.w.iter().all(|&w| w > (-4.0f64).exp() - 1e-15 && w <= 1.0));
        assert!(full.w[5] < 1.0);
        assert!(matches!(
            adaptive_weights(&model, p.source_ref(), None, WeightingScheme::FullyAdaptive),
            Err(Error::MissingTarget)
        ));
    }

    #[test]
    fn full_weights_are_one_when_source_equals_target() {
        let (model, table) = toy(Granularity::Fine);
        let p = pair(&table, "我真糊涂", "我真糊涂");
        let batch = PreparedBatch::new(&model, &[p]).unwrap();
        let (full, gf) = loss_and_gradients(&model, &batch, Weights::Scheme(WeightingScheme::FullyAdaptive)).unwrap();
        let (non, gn) = loss_and_gradients(&model, &batch, Weights::Scheme(WeightingScheme::NonAdaptive)).unwrap();
        assert_eq!(full.weights, vec![1.0; 4]);
        assert_eq!(full.total, non.total);
        assert_eq!(gf.params, gn.params);
    }

    #[test]
    fn graph_loss_matches_plain_functions() {
        for gran in [Granularity::Fine, Granularity::Coarse] {
            let (model, table) = toy(gran);
            let p = pair(&table, "我真户秃", "我真糊涂");
            let batch = PreparedBatch::new(&model, std::slice::from_ref(&p)).unwrap();
            let (b, _) = loss_and_gradients(&model, &batch, Weights::Scheme(WeightingScheme::FullyAdaptive)).unwrap();

            let h = model.encode(&p.source, &p.source_pinyin).unwrap().hidden;
            let lc = char_loss(&model.char_logits(&h), &batch.char_targets).unwrap();
            let lp = pron_loss(&model.pron_logits(&model.pron_projection(&h)).unwrap(), &batch.pron_targets).unwrap();
            let w = adaptive_weights(&model, p.source_ref(), Some(p.target_ref()), WeightingScheme::FullyAdaptive).unwrap();
            let plain = total_loss(&lc, &lp, &w.w).unwrap();
            for (a, b) in plain.char_losses.iter().zip(&b.char_losses) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in plain.weights.iter().zip(&b.weights) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((plain.total - b.total).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_without_pinyin_get_no_pron_loss() {
        let (model, table) = toy(Granularity::Fine);
        let p = pair(&table, "我真户秃。", "我真糊涂。");
        let batch = PreparedBatch::new(&model, &[p]).unwrap();
        let (b, _) = loss_and_gradients(&model, &batch, Weights::Scheme(WeightingScheme::NonAdaptive)).unwrap();
        assert_eq!(b.pron_losses[4], 0.0);
        assert!(b.char_losses[4] > 0.0);
        let expected: f64 = (0..5).map(|i| b.char_losses[i] + b.pron_losses[i]).sum::<f64>() / 5.0;
        assert!((b.total - expected).abs() < 1e-12);
    }

    #[test]
    fn batch_pools_positions() {
        let (model, table) = toy(Granularity::Fine);
        let a = pair(&table, "我真户秃", "我真糊涂");
        let b = pair(&table, "高诉你", "告诉你");
        let both = PreparedBatch::new(&model, &[a.clone(), b.clone()]).unwrap();
        let (lab, _) = loss_and_gradients(&model, &both, Weights::Scheme(WeightingScheme::NonAdaptive)).unwrap();
        let (la, _) =
            loss_and_gradients(&model, &PreparedBatch::new(&model, &[a]).unwrap(), Weights::Scheme(WeightingScheme::NonAdaptive))
                .unwrap();
        let (lb, _) =
            loss_and_gradients(&model, &PreparedBatch::new(&model, &[b]).unwrap(), Weights::Scheme(WeightingScheme::NonAdaptive))
                .unwrap();
        assert!((lab.total - (4.0 * la.total + 3.0 * lb.total) / 7.0).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params_identical() {
        let (mut model, table) = toy(Granularity::Fine);
        let before = model.params().clone();
        let batch = PreparedBatch::new(&model, &[pair(&table, "我真户秃", "我真糊涂")]).unwrap();
        let mut adam = Adam::new(&model, 0.0);
        train_step(&mut model, &mut adam, &batch, WeightingScheme::FullyAdaptive).unwrap();
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn repeated_steps_decrease_loss() {
        let (mut model, table) = toy(Granularity::Fine);
        let batch = PreparedBatch::new(&model, &[pair(&table, "我以前想要高诉你", "我以前想要告诉你")]).unwrap();
        let mut adam = Adam::new(&model, 1e-3);
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let b = train_step(&mut model, &mut adam, &batch, WeightingScheme::FullyAdaptive).unwrap();
            assert!(b.total < prev, "{} !< {prev}", b.total);
            prev = b.total;
        }
    }

    #[test]
    fn nan_loss_is_reported() {
        let (mut model, table) = toy(Granularity::Fine);
        model.param_mut("char_head.bias").unwrap()[[0, 1]] = f64::NAN;
        let batch = PreparedBatch::new(&model, &[pair(&table, "我真", "我真")]).unwrap();
        let mut adam = Adam::new(&model, 1e-3);
        let err = train_step(&mut model, &mut adam, &batch, WeightingScheme::NonAdaptive).unwrap_err();
        assert!(matches!(err, Error::NaNLoss { step: 1, .. }));
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("full".parse::<WeightingScheme>().unwrap(), WeightingScheme::FullyAdaptive);
        assert_eq!("part".parse::<WeightingScheme>().unwrap(), WeightingScheme::PartiallyAdaptive);
        assert_eq!("non".parse::<WeightingScheme>().unwrap(), WeightingScheme::NonAdaptive);
        assert!("half".parse::<WeightingScheme>().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"scheme":"part","lr":2e-5}"#).unwrap();
        assert_eq!(cfg.scheme, WeightingScheme::PartiallyAdaptive);
        assert_eq!(cfg.batch_size, 64);
    }
}
