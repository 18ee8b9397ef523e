//! Manual-gradient SGD for a linear softmax classifier and for a two-stage
//! proposal -> classification toy pipeline.
//!
//! Plain SGD, no momentum or weight decay. Per-sample losses and gradients
//! are averaged over the minibatch. Weights start uniform in
//! `[-0.01, 0.01]`, biases at zero. Training is single-threaded so a fixed
//! seed always reproduces the same trajectory bit for bit.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{binary_loss_and_grad, softmax_loss_and_grad_into, LossParams};
use crate::rng::{self, standard_normal, sub_seed, uniform, Rng};
use crate::sampling::{class_means, undersample_indices, LabeledExample, UndersamplePolicy};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_UNDERSAMPLE: u64 = 3;
const STREAM_FG: u64 = 4;
const STREAM_BG: u64 = 5;

/// Piecewise-constant learning rate: `(end, rate)` pairs with strictly
/// increasing ends. Iteration `i` uses the rate of the first pair with
/// `end > i`; past the last end the last rate holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u64, f64)>", into = "Vec<(u64, f64)>")]
pub struct LrSchedule {
    steps: Vec<(u64, f64)>,
}

impl LrSchedule {
    pub fn new(steps: Vec<(u64, f64)>) -> Result<Self> {
        Self::try_from(steps)
    }

    pub fn constant(rate: f64) -> Result<Self> {
        Self::new(vec![(u64::MAX, rate)])
    }

    /// 0.005 until 120k, 0.0005 until 140k, 0.00005 to the end of a 180k run.
    pub fn detector_default() -> Self {
        LrSchedule {
            steps: vec![(120_000, 0.005), (140_000, 0.0005), (180_000, 0.000_05)],
        }
    }

    /// The same three-phase shape compressed to `total` iterations with a
    /// base rate of `base`.
    pub fn detector_shape(total: u64, base: f64) -> Result<Self> {
        let first = (total * 2 / 3).max(1);
        let second = (total * 7 / 9).max(first + 1);
        let third = total.max(second + 1);
        Self::new(vec![(first, base), (second, base / 10.0), (third, base / 100.0)])
    }

    pub fn steps(&self) -> &[(u64, f64)] {
        &self.steps
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.steps
            .iter()
            .find(|(end, _)| *end > iteration)
            .or(self.steps.last())
            .map(|&(_, rate)| rate)
            .expect("schedule is never empty")
    }
}

impl TryFrom<Vec<(u64, f64)>> for LrSchedule {
    type Error = Error;

    fn try_from(steps: Vec<(u64, f64)>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::param("lr_schedule", "must not be empty"));
        }
        for w in steps.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::param(
                    "lr_schedule",
                    format!("thresholds must increase strictly ({} then {})", w[0].0, w[1].0),
                ));
            }
        }
        if let Some(&(_, r)) = steps.iter().find(|(_, r)| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::param("lr_schedule", format!("rate {r} is not positive")));
        }
        Ok(LrSchedule { steps })
    }
}

impl From<LrSchedule> for Vec<(u64, f64)> {
    fn from(s: LrSchedule) -> Self {
        s.steps
    }
}

/// Free-function form of [`LrSchedule::lr_at`].
pub fn lr_at(schedule: &LrSchedule, iteration: u64) -> f64 {
    schedule.lr_at(iteration)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossParams,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    /// Seeds weight init, batch order and per-epoch undersampling streams.
    pub weight_init_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undersample: Option<UndersamplePolicy>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        if let Some(p) = &self.undersample {
            p.validate()?;
        }
        Ok(())
    }
}

/// Dense `num_classes x feature_dim` weights (row-major) plus biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        LinearModel {
            num_classes,
            feature_dim,
            weights: vec![0.0; num_classes * feature_dim],
            biases: vec![0.0; num_classes],
        }
    }

    pub fn init(num_classes: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = rng::rng(sub_seed(seed, STREAM_INIT));
        let mut m = Self::zeros(num_classes, feature_dim);
        for w in &mut m.weights {
            *w = 0.02 * uniform(&mut rng) - 0.01;
        }
        m
    }

    pub fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.feature_dim..(c + 1) * self.feature_dim];
            *o = self.biases[c] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        self.logits_into(x, &mut out);
        out
    }

    /// Arg-max class, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (c, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = c;
            }
        }
        best
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }
}

/// Mean loss over `batch` and its gradient laid out like a [`LinearModel`].
pub fn batch_loss_and_grad(
    model: &LinearModel,
    batch: &[&LabeledExample],
    loss: &LossParams,
) -> (f64, LinearModel) {
    let mut grad = LinearModel::zeros(model.num_classes, model.feature_dim);
    let mut logits = vec![0.0; model.num_classes];
    let mut dz = vec![0.0; model.num_classes];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        model.logits_into(&ex.features, &mut logits);
        total += softmax_loss_and_grad_into(&logits, ex.label, loss, &mut dz);
        for (c, &g) in dz.iter().enumerate() {
            let g = g * scale;
            grad.biases[c] += g;
            let row = &mut grad.weights[c * model.feature_dim..(c + 1) * model.feature_dim];
            for (w, &v) in row.iter_mut().zip(&ex.features) {
                *w += g * v;
            }
        }
    }
    (total * scale, grad)
}

fn check_dims(data: &[LabeledExample], num_classes: usize) -> Result<usize> {
    let first = data.first().ok_or(Error::EmptyInput("training data"))?;
    let dim = first.features.len();
    if dim == 0 {
        return Err(Error::param("features", "feature vectors are empty"));
    }
    for ex in data {
        if ex.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: ex.features.len(),
            });
        }
        if ex.label >= num_classes {
            return Err(Error::param(
                "label",
                format!("label {} with only {num_classes} classes", ex.label),
            ));
        }
    }
    Ok(dim)
}

/// Epoch-based minibatch stream: each epoch optionally undersamples (with a
/// sub-seed varying per epoch) and then shuffles.
struct BatchStream<'a> {
    n: usize,
    policy: Option<&'a UndersamplePolicy>,
    data: &'a [LabeledExample],
    rng: Rng,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    fn new(data: &'a [LabeledExample], policy: Option<&'a UndersamplePolicy>, seed: u64) -> Self {
        BatchStream {
            n: data.len(),
            policy,
            data,
            rng: rng::rng(sub_seed(seed, STREAM_SHUFFLE)),
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn refill(&mut self) -> Result<()> {
        self.order = match self.policy {
            Some(p) => {
                let epoch_policy = p.with_seed(sub_seed(sub_seed(p.seed, STREAM_UNDERSAMPLE), self.epoch));
                undersample_indices(self.data, &epoch_policy)
            }
            None => (0..self.n).collect(),
        };
        if self.order.is_empty() {
            return Err(Error::EmptyInput("undersampling removed every example"));
        }
        self.order.shuffle(&mut self.rng);
        self.epoch += 1;
        self.cursor = 0;
        Ok(())
    }

    fn next_batch(&mut self, size: usize, out: &mut Vec<usize>) -> Result<()> {
        if self.cursor >= self.order.len() {
            self.refill()?;
        }
        let end = (self.cursor + size).min(self.order.len());
        out.clear();
        out.extend_from_slice(&self.order[self.cursor..end]);
        self.cursor = end;
        Ok(())
    }
}

/// Trains from a fresh initialisation. Returns the model and the mean batch
/// loss at every iteration.
pub fn train_classifier(
    data: &[LabeledExample],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<(LinearModel, Vec<f64>)> {
    config.validate()?;
    let dim = check_dims(data, num_classes)?;
    let model = LinearModel::init(num_classes, dim, config.weight_init_seed);
    continue_training(model, data, config)
}

/// Runs `config.iterations` further SGD steps starting from `model`, e.g. a
/// fine-tuning phase on a merged dataset.
pub fn continue_training(
    mut model: LinearModel,
    data: &[LabeledExample],
    config: &TrainConfig,
) -> Result<(LinearModel, Vec<f64>)> {
    config.validate()?;
    let dim = check_dims(data, model.num_classes)?;
    if dim != model.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim,
            actual: dim,
        });
    }
    let mut stream = BatchStream::new(data, config.undersample.as_ref(), config.weight_init_seed);
    let mut idx = Vec::with_capacity(config.batch_size);
    let mut curve = Vec::with_capacity(config.iterations as usize);
    for it in 0..config.iterations {
        stream.next_batch(config.batch_size, &mut idx)?;
        let batch: Vec<&LabeledExample> = idx.iter().map(|&i| &data[i]).collect();
        let (loss, grad) = batch_loss_and_grad(&model, &batch, &config.loss);
        let lr = config.lr_schedule.lr_at(it);
        for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (b, g) in model.biases.iter_mut().zip(&grad.biases) {
            *b -= lr * g;
        }
        curve.push(loss);
    }
    if !model.is_finite() {
        return Err(Error::param("lr_schedule", "training diverged to non-finite weights"));
    }
    Ok((model, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierEval {
    /// Examples per class present in the evaluation data.
    pub counts: BTreeMap<usize, usize>,
    pub per_class_recall: BTreeMap<usize, f64>,
    pub mrecall: f64,
    pub accuracy: f64,
}

/// Per-class recall over the classes present in `data`, their unweighted
/// mean, and plain accuracy.
pub fn evaluate_predictions(labels_and_predictions: impl IntoIterator<Item = (usize, usize)>) -> ClassifierEval {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
    for (label, pred) in labels_and_predictions {
        *counts.entry(label).or_insert(0) += 1;
        if label == pred {
            *hits.entry(label).or_insert(0) += 1;
        }
    }
    let per_class_recall: BTreeMap<usize, f64> = counts
        .iter()
        .map(|(&c, &n)| (c, hits.get(&c).copied().unwrap_or(0) as f64 / n as f64))
        .collect();
    let total: usize = counts.values().sum();
    let correct: usize = hits.values().sum();
    let mrecall = if per_class_recall.is_empty() {
        0.0
    } else {
        per_class_recall.values().sum::<f64>() / per_class_recall.len() as f64
    };
    ClassifierEval {
        counts,
        per_class_recall,
        mrecall,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    }
}

pub fn evaluate_classifier(model: &LinearModel, data: &[LabeledExample]) -> ClassifierEval {
    evaluate_predictions(data.iter().map(|ex| (ex.label, model.predict(&ex.features))))
}

// ---------------------------------------------------------------------------
// two-stage pipeline
// ---------------------------------------------------------------------------

/// One candidate region. `object` is the training label, which may be wrong
/// when `mislabeled` is set; `class` is the object class for true objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub features: Vec<f64>,
    pub object: bool,
    pub class: Option<usize>,
    #[serde(default)]
    pub mislabeled: bool,
}

impl Candidate {
    /// True objectness regardless of label noise.
    pub fn is_object(&self) -> bool {
        self.class.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub candidates: Vec<Candidate>,
}

/// Synthetic scenes for the proposal stage. Objects sit around class means
/// (as in the classification generator) and background candidates around the
/// origin with a wider spread. A fraction of background candidates is
/// mislabeled as objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSetSpec {
    pub num_scenes: usize,
    pub objects_per_scene: usize,
    /// Background candidates per object.
    pub background_ratio: usize,
    /// Relative class frequencies of objects (need not sum to 1).
    pub class_weights: Vec<f64>,
    pub feature_dim: usize,
    pub object_separation: f64,
    pub background_spread: f64,
    #[serde(default)]
    pub objectness_noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSetSpec {
    pub fn num_classes(&self) -> usize {
        self.class_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 || self.objects_per_scene == 0 {
            return Err(Error::param("scenes", "need at least one scene with one object"));
        }
        if self.class_weights.is_empty() || self.class_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::param("class_weights", "must be non-empty and positive"));
        }
        if self.feature_dim == 0 {
            return Err(Error::param("feature_dim", "must be positive"));
        }
        if !(self.object_separation > 0.0 && self.background_spread > 0.0) {
            return Err(Error::param("object_separation", "separation and spread must be positive"));
        }
        if !(0.0..1.0).contains(&self.objectness_noise) {
            return Err(Error::param("objectness_noise", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

pub fn generate_scenes(spec: &SceneSetSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let k = spec.num_classes();
    let means = class_means(k, spec.feature_dim, spec.object_separation);
    let total_w: f64 = spec.class_weights.iter().sum();
    let cumulative: Vec<f64> = spec
        .class_weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total_w;
            Some(*acc)
        })
        .collect();
    let mut rng = rng::rng(spec.seed);
    let mut scenes = Vec::with_capacity(spec.num_scenes);
    for _ in 0..spec.num_scenes {
        let mut candidates = Vec::new();
        for _ in 0..spec.objects_per_scene {
            let u = uniform(&mut rng);
            let class = cumulative.iter().position(|&c| u < c).unwrap_or(k - 1);
            let features = means[class].iter().map(|m| m + standard_normal(&mut rng)).collect();
            candidates.push(Candidate {
                features,
                object: true,
                class: Some(class),
                mislabeled: false,
            });
        }
        for _ in 0..spec.objects_per_scene * spec.background_ratio {
            let features = (0..spec.feature_dim)
                .map(|_| spec.background_spread * standard_normal(&mut rng))
                .collect();
            let mislabeled = uniform(&mut rng) < spec.objectness_noise;
            candidates.push(Candidate {
                features,
                object: mislabeled,
                class: None,
                mislabeled,
            });
        }
        scenes.push(Scene { candidates });
    }
    Ok(scenes)
}

/// Linear objectness scorer `w . x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl BinaryModel {
    pub fn init(feature_dim: usize, seed: u64) -> Self {
        let mut rng = rng::rng(sub_seed(seed, STREAM_INIT));
        BinaryModel {
            weights: (0..feature_dim).map(|_| 0.02 * uniform(&mut rng) - 0.01).collect(),
            bias: 0.0,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Mean binary loss over `batch` and its gradient.
pub fn binary_batch_loss_and_grad(
    model: &BinaryModel,
    batch: &[&Candidate],
    loss: &LossParams,
) -> (f64, BinaryModel) {
    let mut grad = BinaryModel {
        weights: vec![0.0; model.weights.len()],
        bias: 0.0,
    };
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for c in batch {
        let (l, g) = binary_loss_and_grad(model.score(&c.features), c.object, loss);
        total += l;
        let g = g * scale;
        grad.bias += g;
        for (w, &v) in grad.weights.iter_mut().zip(&c.features) {
            *w += g * v;
        }
    }
    (total * scale, grad)
}

/// Draws `n` indices out of `0..len`: without replacement when the stratum
/// is large enough, with replacement otherwise.
fn draw_stratum(rng: &mut Rng, len: usize, n: usize, out: &mut Vec<usize>) {
    if len == 0 || n == 0 {
        return;
    }
    if n <= len {
        out.extend(index::sample(rng, len, n));
    } else {
        out.extend((0..n).map(|_| rng.gen_range(0..len)));
    }
}

/// Trains the objectness scorer on labeled candidates with minibatches
/// holding `round(batch_size * fg_fraction)` foreground examples.
pub fn train_objectness(
    candidates: &[&Candidate],
    config: &TrainConfig,
    fg_fraction: f64,
) -> Result<(BinaryModel, Vec<f64>)> {
    config.validate()?;
    if !(fg_fraction > 0.0 && fg_fraction <= 1.0) {
        return Err(Error::param("fg_bg_ratio", format!("{fg_fraction} outside (0, 1]")));
    }
    let first = candidates.first().ok_or(Error::EmptyInput("candidates"))?;
    let dim = first.features.len();
    if let Some(bad) = candidates.iter().find(|c| c.features.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.features.len(),
        });
    }
    let fg: Vec<&Candidate> = candidates.iter().copied().filter(|c| c.object).collect();
    let bg: Vec<&Candidate> = candidates.iter().copied().filter(|c| !c.object).collect();
    let mut n_fg = (config.batch_size as f64 * fg_fraction).round() as usize;
    if bg.is_empty() {
        n_fg = config.batch_size;
    } else if fg.is_empty() {
        n_fg = 0;
    }
    let n_bg = config.batch_size - n_fg.min(config.batch_size);

    let mut model = BinaryModel::init(dim, config.weight_init_seed);
    let mut fg_rng = rng::rng(sub_seed(config.weight_init_seed, STREAM_FG));
    let mut bg_rng = rng::rng(sub_seed(config.weight_init_seed, STREAM_BG));
    let mut curve = Vec::with_capacity(config.iterations as usize);
    let (mut fi, mut bi) = (Vec::new(), Vec::new());
    for it in 0..config.iterations {
        fi.clear();
        bi.clear();
        draw_stratum(&mut fg_rng, fg.len(), n_fg, &mut fi);
        draw_stratum(&mut bg_rng, bg.len(), n_bg, &mut bi);
        let batch: Vec<&Candidate> = fi.iter().map(|&i| fg[i]).chain(bi.iter().map(|&i| bg[i])).collect();
        let (loss, grad) = binary_batch_loss_and_grad(&model, &batch, &config.loss);
        let lr = config.lr_schedule.lr_at(it);
        for (w, g) in model.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        model.bias -= lr * grad.bias;
        curve.push(loss);
    }
    if !(model.bias.is_finite() && model.weights.iter().all(|w| w.is_finite())) {
        return Err(Error::param("lr_schedule", "objectness training diverged"));
    }
    Ok((model, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageConfig {
    pub stage1: TrainConfig,
    /// Top-K candidates per scene passed to the second stage.
    pub proposal_budget: usize,
    pub stage2: TrainConfig,
    /// Foreground fraction of each stage-1 minibatch.
    pub fg_bg_ratio: f64,
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.proposal_budget == 0 {
            return Err(Error::param("proposal_budget", "must be at least 1"));
        }
        if !(self.fg_bg_ratio > 0.0 && self.fg_bg_ratio <= 1.0) {
            return Err(Error::param("fg_bg_ratio", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStageReport {
    /// True objects among the top-K proposals over all true objects.
    pub proposal_recall: f64,
    pub per_class_proposal_recall: BTreeMap<usize, f64>,
    pub proposal_mrecall: f64,
    /// Stage-2 recall on the positives that survived stage 1.
    pub stage2_per_class_recall: BTreeMap<usize, f64>,
    /// Objects both proposed and correctly classified, per class.
    pub end_to_end_per_class_recall: BTreeMap<usize, f64>,
    pub end_to_end_mrecall: f64,
}

/// Indices of the `k` highest-scoring candidates (all when `k` exceeds the
/// count); ties keep the earlier candidate.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Evaluates a trained pipeline on `scenes` using true objectness.
pub fn evaluate_two_stage<S>(scorer: S, classifier: &LinearModel, scenes: &[Scene], k: usize) -> TwoStageReport
where
    S: Fn(&Candidate) -> f64,
{
    let mut total: BTreeMap<usize, usize> = BTreeMap::new();
    let mut proposed: BTreeMap<usize, usize> = BTreeMap::new();
    let mut correct: BTreeMap<usize, usize> = BTreeMap::new();
    for scene in scenes {
        for c in &scene.candidates {
            if let Some(class) = c.class {
                *total.entry(class).or_insert(0) += 1;
            }
        }
        let scores: Vec<f64> = scene.candidates.iter().map(&scorer).collect();
        for i in top_k(&scores, k) {
            let cand = &scene.candidates[i];
            if let Some(class) = cand.class {
                *proposed.entry(class).or_insert(0) += 1;
                if classifier.predict(&cand.features) == class {
                    *correct.entry(class).or_insert(0) += 1;
                }
            }
        }
    }
    let get = |m: &BTreeMap<usize, usize>, c: usize| m.get(&c).copied().unwrap_or(0) as f64;
    let per_class_proposal_recall: BTreeMap<usize, f64> =
        total.iter().map(|(&c, &n)| (c, get(&proposed, c) / n as f64)).collect();
    let stage2_per_class_recall: BTreeMap<usize, f64> = proposed
        .iter()
        .map(|(&c, &n)| (c, get(&correct, c) / n as f64))
        .collect();
    let end_to_end_per_class_recall: BTreeMap<usize, f64> =
        total.iter().map(|(&c, &n)| (c, get(&correct, c) / n as f64)).collect();
    let n_total: usize = total.values().sum();
    let n_proposed: usize = proposed.values().sum();
    TwoStageReport {
        proposal_recall: if n_total == 0 { 0.0 } else { n_proposed as f64 / n_total as f64 },
        proposal_mrecall: mean(per_class_proposal_recall.values().copied()),
        end_to_end_mrecall: mean(end_to_end_per_class_recall.values().copied()),
        per_class_proposal_recall,
        stage2_per_class_recall,
        end_to_end_per_class_recall,
    }
}

/// Trained pipeline plus evaluation on held-out scenes.
#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub stage1: BinaryModel,
    pub stage2: LinearModel,
    pub stage1_curve: Vec<f64>,
    pub stage2_curve: Vec<f64>,
    pub report: TwoStageReport,
}

/// Stage 1 learns objectness from (possibly noisy) labels on every training
/// candidate; stage 2 learns the class of the true objects. Both are then
/// evaluated on `eval_scenes`.
pub fn train_two_stage(
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
    num_classes: usize,
    config: &TwoStageConfig,
) -> Result<TwoStageOutcome> {
    config.validate()?;
    let all: Vec<&Candidate> = train_scenes.iter().flat_map(|s| s.candidates.iter()).collect();
    let (stage1, stage1_curve) = train_objectness(&all, &config.stage1, config.fg_bg_ratio)?;
    let positives: Vec<LabeledExample> = all
        .iter()
        .filter_map(|c| {
            c.class.map(|class| LabeledExample {
                features: c.features.clone(),
                label: class,
                noisy: false,
            })
        })
        .collect();
    let (stage2, stage2_curve) = train_classifier(&positives, num_classes, &config.stage2)?;
    let report = evaluate_two_stage(|c| stage1.score(&c.features), &stage2, eval_scenes, config.proposal_budget);
    Ok(TwoStageOutcome {
        stage1,
        stage2,
        stage1_curve,
        stage2_curve,
        report,
    })
}
