//! Seeded multi-arm experiments: generate a long-tailed dataset, optionally
//! undersample, train one linear classifier per arm and evaluate it on a
//! clean balanced test split. An optional two-stage section compares
//! stage-1 losses on proposal recall.
//!
//! Every arm of one seed sees the same training data, test data and weight
//! initialisation. Reports are serialised with every float rounded to 9
//! significant digits so that identical configs give byte-identical JSON.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::loss::LossParams;
use crate::rng::sub_seed;
use crate::sampling::{class_means, sample_around_means, LabeledExample, UndersamplePolicy};
use crate::trainer::{
    continue_training, evaluate_classifier, generate_scenes, train_classifier, train_two_stage,
    LrSchedule, SceneSetSpec, TrainConfig, TwoStageConfig,
};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

const SEED_TRAIN_DATA: u64 = 10;
const SEED_TEST_DATA: u64 = 11;
const SEED_WEIGHTS: u64 = 12;
const SEED_UNDERSAMPLE: u64 = 13;
const SEED_FINETUNE_DATA: u64 = 14;
const SEED_SCENES_TRAIN: u64 = 20;
const SEED_SCENES_EVAL: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub class_counts: Vec<usize>,
    pub feature_dim: usize,
    pub cluster_separation: f64,
    #[serde(default)]
    pub label_noise_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: u64,
    pub lr_schedule: LrSchedule,
    /// Extra clean-labelled examples per class merged into the training set
    /// for this phase.
    pub extra_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub loss: LossParams,
    /// Class id -> probability of dropping each of its training instances.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub undersample: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageArm {
    pub name: String,
    /// Stage-1 (objectness) loss.
    pub loss: LossParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub objects_per_scene: usize,
    pub background_ratio: usize,
    pub class_weights: Vec<f64>,
    pub feature_dim: usize,
    pub object_separation: f64,
    pub background_spread: f64,
    #[serde(default)]
    pub objectness_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoStageExperiment {
    pub scenes: SceneConfig,
    pub proposal_budget: usize,
    pub fg_bg_ratio: f64,
    pub stage1: TrainSettings,
    pub stage2: TrainSettings,
    pub stage2_loss: LossParams,
    pub arms: Vec<TwoStageArm>,
}

fn default_test_per_class() -> usize {
    200
}

fn default_curve_stride() -> usize {
    10
}

fn default_rare_classes() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Empty means "use the caller's fallback seed".
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub train: TrainSettings,
    pub arms: Vec<ArmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_stage: Option<TwoStageExperiment>,
    /// Keep every n-th point of the loss curves in the report.
    #[serde(default = "default_curve_stride")]
    pub curve_stride: usize,
    /// How many of the least frequent classes form the "rare" summary.
    #[serde(default = "default_rare_classes")]
    pub rare_classes: usize,
}

fn check_loss(path: &str, loss: &LossParams) -> Result<()> {
    loss.validate().map_err(|e| Error::config(path, e.to_string()))
}

fn check_settings(path: &str, t: &TrainSettings) -> Result<()> {
    if t.batch_size == 0 {
        return Err(Error::config(format!("{path}.batch_size"), "must be positive"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.class_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, s) in self.seeds.iter().enumerate() {
            if !seen.insert(s) {
                return Err(Error::config(format!("seeds[{i}]"), format!("duplicate seed {s}")));
            }
        }
        let d = &self.dataset;
        if d.class_counts.len() < 2 {
            return Err(Error::config("dataset.class_counts", "need at least two classes"));
        }
        if let Some(i) = d.class_counts.iter().position(|&c| c == 0) {
            return Err(Error::config(format!("dataset.class_counts[{i}]"), "must be positive"));
        }
        if d.feature_dim == 0 {
            return Err(Error::config("dataset.feature_dim", "must be positive"));
        }
        if !(d.cluster_separation.is_finite() && d.cluster_separation > 0.0) {
            return Err(Error::config("dataset.cluster_separation", "must be positive"));
        }
        if !(0.0..1.0).contains(&d.label_noise_rate) {
            return Err(Error::config("dataset.label_noise_rate", "must lie in [0, 1)"));
        }
        if self.test_per_class == 0 {
            return Err(Error::config("test_per_class", "must be positive"));
        }
        if self.curve_stride == 0 {
            return Err(Error::config("curve_stride", "must be positive"));
        }
        check_settings("train", &self.train)?;
        if self.arms.is_empty() {
            return Err(Error::config("arms", "need at least one arm"));
        }
        let mut names = BTreeSet::new();
        for (i, arm) in self.arms.iter().enumerate() {
            if !names.insert(arm.name.as_str()) {
                return Err(Error::config(format!("arms[{i}].name"), format!("duplicate arm `{}`", arm.name)));
            }
            check_loss(&format!("arms[{i}].loss"), &arm.loss)?;
            for (&class, &p) in &arm.undersample {
                if class >= self.num_classes() {
                    return Err(Error::config(
                        format!("arms[{i}].undersample.{class}"),
                        "class id out of range",
                    ));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(format!("arms[{i}].undersample.{class}"), "must lie in [0, 1]"));
                }
            }
        }
        if let Some(ts) = &self.two_stage {
            let s = &ts.scenes;
            if s.train_scenes == 0 || s.eval_scenes == 0 || s.objects_per_scene == 0 {
                return Err(Error::config("two_stage.scenes", "scene and object counts must be positive"));
            }
            if s.class_weights.is_empty() || s.class_weights.iter().any(|w| !(*w > 0.0)) {
                return Err(Error::config("two_stage.scenes.class_weights", "must be non-empty and positive"));
            }
            if ts.proposal_budget == 0 {
                return Err(Error::config("two_stage.proposal_budget", "must be at least 1"));
            }
            if !(ts.fg_bg_ratio > 0.0 && ts.fg_bg_ratio <= 1.0) {
                return Err(Error::config("two_stage.fg_bg_ratio", "must lie in (0, 1]"));
            }
            check_settings("two_stage.stage1", &ts.stage1)?;
            check_settings("two_stage.stage2", &ts.stage2)?;
            check_loss("two_stage.stage2_loss", &ts.stage2_loss)?;
            let mut names = BTreeSet::new();
            for (i, arm) in ts.arms.iter().enumerate() {
                if !names.insert(arm.name.as_str()) {
                    return Err(Error::config(
                        format!("two_stage.arms[{i}].name"),
                        format!("duplicate arm `{}`", arm.name),
                    ));
                }
                check_loss(&format!("two_stage.arms[{i}].loss"), &arm.loss)?;
            }
        }
        Ok(())
    }

    /// The long-tailed ten-class setup with CE, FL, RFL and RFL plus
    /// undersampling arms, and a CE-vs-FL two-stage comparison.
    pub fn long_tailed_default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("built-in config parses")
    }
}

/// Built-in default config; identical to `configs/default.json`.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.json");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub mrecall: f64,
    pub per_class_recall: Vec<f64>,
    pub rare_recall: f64,
    pub train_examples: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub accuracy: f64,
    pub mrecall: f64,
    pub per_class_recall: Vec<f64>,
    /// Mean recall over the `rare_classes` least frequent classes.
    pub rare_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    pub name: String,
    pub loss: LossParams,
    pub mean: ArmSummary,
    pub per_seed: Vec<SeedResult>,
    /// Seed-averaged loss curve, every `curve_stride`-th iteration.
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStageSeedResult {
    pub seed: u64,
    pub proposal_recall: f64,
    pub proposal_mrecall: f64,
    pub per_class_proposal_recall: Vec<f64>,
    pub end_to_end_mrecall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoStageArmReport {
    pub name: String,
    pub loss: LossParams,
    pub mean_proposal_recall: f64,
    pub mean_proposal_mrecall: f64,
    pub mean_end_to_end_mrecall: f64,
    pub per_seed: Vec<TwoStageSeedResult>,
    pub stage1_loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub artifact_version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Training-set class ids ordered from rarest, as used for `rare_recall`.
    pub rare_class_ids: Vec<usize>,
    pub arms: Vec<ArmReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub two_stage_arms: Vec<TwoStageArmReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

impl ExperimentReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn two_stage_arm(&self, name: &str) -> Option<&TwoStageArmReport> {
        self.two_stage_arms.iter().find(|a| a.name == name)
    }

    /// Canonical JSON: pretty-printed, floats rounded to 9 significant
    /// digits, trailing newline.
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        round_floats(&mut value);
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        Ok(text)
    }
}

/// Rounds `x` to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_sig9).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_floats),
        Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn mean_of(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_vectors(rows: &[Vec<f64>]) -> Vec<f64> {
    let len = rows.iter().map(Vec::len).min().unwrap_or(0);
    (0..len).map(|i| mean_of(rows.iter().map(|r| r[i]))).collect()
}

fn settings_to_train(t: &TrainSettings, loss: LossParams, seed: u64) -> TrainConfig {
    TrainConfig {
        loss,
        iterations: t.iterations,
        batch_size: t.batch_size,
        lr_schedule: t.lr_schedule.clone(),
        weight_init_seed: seed,
        undersample: None,
    }
}

/// Class ids ordered from least to most frequent (ties: higher id first).
fn rarest_first(counts: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..counts.len()).collect();
    ids.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)));
    ids
}

struct SeedData {
    train: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
    extra: Vec<LabeledExample>,
}

fn seed_data(cfg: &ExperimentConfig, seed: u64) -> SeedData {
    let d = &cfg.dataset;
    let k = cfg.num_classes();
    let means = class_means(k, d.feature_dim, d.cluster_separation);
    let train = sample_around_means(
        &means,
        &d.class_counts,
        d.label_noise_rate,
        sub_seed(seed, SEED_TRAIN_DATA),
    );
    let test = sample_around_means(&means, &vec![cfg.test_per_class; k], 0.0, sub_seed(seed, SEED_TEST_DATA));
    let extra = match &cfg.train.finetune {
        Some(f) if f.extra_per_class > 0 => {
            sample_around_means(&means, &vec![f.extra_per_class; k], 0.0, sub_seed(seed, SEED_FINETUNE_DATA))
        }
        _ => Vec::new(),
    };
    SeedData { train, test, extra }
}

type ArmSeedOutput = (SeedResult, Vec<f64>);

/// The training and clean test sets every arm of `seed` sees.
pub fn seed_datasets(cfg: &ExperimentConfig, seed: u64) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let d = seed_data(cfg, seed);
    (d.train, d.test)
}

fn run_arm_seed(
    cfg: &ExperimentConfig,
    arm: &ArmConfig,
    seed: u64,
    data: &SeedData,
    rare: &[usize],
) -> Result<ArmSeedOutput> {
    let k = cfg.num_classes();
    let mut train_cfg = settings_to_train(&cfg.train, arm.loss, sub_seed(seed, SEED_WEIGHTS));
    if !arm.undersample.is_empty() {
        train_cfg.undersample = Some(UndersamplePolicy::new(
            arm.undersample.clone(),
            sub_seed(seed, SEED_UNDERSAMPLE),
        )?);
    }
    let (mut model, mut curve) = train_classifier(&data.train, k, &train_cfg)?;
    if let Some(ft) = &cfg.train.finetune {
        let mut merged = data.train.clone();
        merged.extend(data.extra.iter().cloned());
        let ft_cfg = TrainConfig {
            iterations: ft.iterations,
            lr_schedule: ft.lr_schedule.clone(),
            ..train_cfg.clone()
        };
        let (m, c) = continue_training(model, &merged, &ft_cfg)?;
        model = m;
        curve.extend(c);
    }
    let eval = evaluate_classifier(&model, &data.test);
    let per_class: Vec<f64> = (0..k)
        .map(|c| eval.per_class_recall.get(&c).copied().unwrap_or(0.0))
        .collect();
    let tail = (curve.len() / 100).max(1).min(curve.len());
    let result = SeedResult {
        seed,
        accuracy: eval.accuracy,
        mrecall: eval.mrecall,
        rare_recall: mean_of(rare.iter().map(|&c| per_class[c])),
        per_class_recall: per_class,
        train_examples: data.train.len(),
        final_loss: mean_of(curve[curve.len() - tail..].iter().copied()),
    };
    Ok((result, curve))
}

fn run_two_stage(ts: &TwoStageExperiment, seeds: &[u64], stride: usize) -> Result<Vec<TwoStageArmReport>> {
    let s = &ts.scenes;
    let spec = |n: usize, seed: u64| SceneSetSpec {
        num_scenes: n,
        objects_per_scene: s.objects_per_scene,
        background_ratio: s.background_ratio,
        class_weights: s.class_weights.clone(),
        feature_dim: s.feature_dim,
        object_separation: s.object_separation,
        background_spread: s.background_spread,
        objectness_noise: s.objectness_noise,
        seed,
    };
    let k = s.class_weights.len();
    let mut scenes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let train = generate_scenes(&spec(s.train_scenes, sub_seed(seed, SEED_SCENES_TRAIN)))?;
        let mut eval_spec = spec(s.eval_scenes, sub_seed(seed, SEED_SCENES_EVAL));
        eval_spec.objectness_noise = 0.0;
        let eval = generate_scenes(&eval_spec)?;
        scenes.push((train, eval));
    }
    let mut out = Vec::with_capacity(ts.arms.len());
    for arm in &ts.arms {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut curves = Vec::with_capacity(seeds.len());
        for (&seed, (train, eval)) in seeds.iter().zip(&scenes) {
            let w = sub_seed(seed, SEED_WEIGHTS);
            let config = TwoStageConfig {
                stage1: settings_to_train(&ts.stage1, arm.loss, w),
                proposal_budget: ts.proposal_budget,
                stage2: settings_to_train(&ts.stage2, ts.stage2_loss, w),
                fg_bg_ratio: ts.fg_bg_ratio,
            };
            let outcome = train_two_stage(train, eval, k, &config)?;
            let r = &outcome.report;
            per_seed.push(TwoStageSeedResult {
                seed,
                proposal_recall: r.proposal_recall,
                proposal_mrecall: r.proposal_mrecall,
                per_class_proposal_recall: (0..k)
                    .map(|c| r.per_class_proposal_recall.get(&c).copied().unwrap_or(0.0))
                    .collect(),
                end_to_end_mrecall: r.end_to_end_mrecall,
            });
            curves.push(outcome.stage1_curve);
        }
        out.push(TwoStageArmReport {
            name: arm.name.clone(),
            loss: arm.loss,
            mean_proposal_recall: mean_of(per_seed.iter().map(|r| r.proposal_recall)),
            mean_proposal_mrecall: mean_of(per_seed.iter().map(|r| r.proposal_mrecall)),
            mean_end_to_end_mrecall: mean_of(per_seed.iter().map(|r| r.end_to_end_mrecall)),
            per_seed,
            stage1_loss_curve: mean_vectors(&curves).into_iter().step_by(stride).collect(),
        });
    }
    Ok(out)
}

/// Runs every arm for every seed. `fallback_seed` is used when the config
/// lists no seeds. Set `timing` to record wall-clock time, which makes the
/// report non-reproducible.
pub fn run_experiment(cfg: &ExperimentConfig, fallback_seed: Option<u64>, timing: bool) -> Result<ExperimentReport> {
    let started = Instant::now();
    cfg.validate()?;
    let seeds = if cfg.seeds.is_empty() {
        vec![fallback_seed.ok_or_else(|| Error::config("seeds", "no seeds given and no fallback seed"))?]
    } else {
        cfg.seeds.clone()
    };
    let k = cfg.num_classes();
    let rare_order = rarest_first(&cfg.dataset.class_counts);
    let rare: Vec<usize> = rare_order.iter().copied().take(cfg.rare_classes.min(k)).collect();
    let data: Vec<SeedData> = seeds.iter().map(|&s| seed_data(cfg, s)).collect();

    // one job per (arm, seed), results gathered in canonical order
    let jobs: Vec<(usize, usize)> = (0..cfg.arms.len())
        .flat_map(|a| (0..seeds.len()).map(move |s| (a, s)))
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let mut results: Vec<Option<Result<ArmSeedOutput>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = jobs.len().div_ceil(workers);
        for (job_chunk, slot_chunk) in jobs.chunks(chunk).zip(results.chunks_mut(chunk)) {
            let data = &data;
            let seeds = &seeds;
            let rare = &rare;
            scope.spawn(move || {
                for (&(a, s), slot) in job_chunk.iter().zip(slot_chunk.iter_mut()) {
                    *slot = Some(run_arm_seed(cfg, &cfg.arms[a], seeds[s], &data[s], rare));
                }
            });
        }
    });

    let mut results = results.into_iter().map(|r| r.expect("every job ran"));
    let mut arms = Vec::with_capacity(cfg.arms.len());
    for arm in &cfg.arms {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut curves = Vec::with_capacity(seeds.len());
        for _ in &seeds {
            let (r, c) = results.next().expect("one result per job")?;
            per_seed.push(r);
            curves.push(c);
        }
        let per_class = mean_vectors(&per_seed.iter().map(|r| r.per_class_recall.clone()).collect::<Vec<_>>());
        arms.push(ArmReport {
            name: arm.name.clone(),
            loss: arm.loss,
            mean: ArmSummary {
                accuracy: mean_of(per_seed.iter().map(|r| r.accuracy)),
                mrecall: mean_of(per_seed.iter().map(|r| r.mrecall)),
                rare_recall: mean_of(per_seed.iter().map(|r| r.rare_recall)),
                per_class_recall: per_class,
            },
            per_seed,
            loss_curve: mean_vectors(&curves).into_iter().step_by(cfg.curve_stride).collect(),
        });
    }
    let two_stage_arms = match &cfg.two_stage {
        Some(ts) => run_two_stage(ts, &seeds, cfg.curve_stride)?,
        None => Vec::new(),
    };
    Ok(ExperimentReport {
        artifact_version: ARTIFACT_VERSION.to_string(),
        config: cfg.clone(),
        seeds,
        rare_class_ids: rare,
        arms,
        two_stage_arms,
        wall_clock_secs: timing.then(|| started.elapsed().as_secs_f64()),
    })
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars: one group per category, one bar per series, values in
/// [0, 1].
pub fn bar_chart_svg(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (w, h, left, bottom, top) = (760.0, 360.0, 50.0, 40.0, 40.0);
    let plot_w = w - left - 20.0;
    let plot_h = h - bottom - top;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg += &format!("<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", w / 2.0, esc(title));
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        svg += &format!(
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
            left + plot_w,
            left - 4.0,
            y + 4.0
        );
    }
    for (g, cat) in categories.iter().enumerate() {
        let gx = left + g as f64 * group_w + group_w * 0.1;
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let bh = plot_h * v;
            svg += &format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
                gx + s as f64 * bar_w,
                top + plot_h - bh,
                bar_w,
                bh,
                PALETTE[s % PALETTE.len()]
            );
        }
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            gx + group_w * 0.4,
            top + plot_h + 14.0,
            esc(cat)
        );
    }
    for (s, (name, _)) in series.iter().enumerate() {
        let x = left + 10.0 + s as f64 * 120.0;
        svg += &format!(
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            h - 16.0,
            PALETTE[s % PALETTE.len()],
            x + 14.0,
            h - 7.0,
            esc(name)
        );
    }
    svg += "</svg>\n";
    svg
}

/// Polylines of several curves on a shared linear y-axis.
pub fn line_chart_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h, left, bottom, top) = (760.0, 360.0, 60.0, 40.0, 40.0);
    let plot_w = w - left - 20.0;
    let plot_h = h - bottom - top;
    let max_len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg += &format!("<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n", w / 2.0, esc(title));
    for tick in 0..=4 {
        let v = y_max * tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - tick as f64 / 4.0);
        svg += &format!(
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>\n",
            left + plot_w,
            left - 4.0,
            y + 4.0
        );
    }
    for (s, (name, values)) in series.iter().enumerate() {
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = left + plot_w * i as f64 / (max_len - 1) as f64;
                let y = top + plot_h * (1.0 - (v / y_max).clamp(0.0, 1.0));
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg += &format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            PALETTE[s % PALETTE.len()],
            points.join(" ")
        );
        let x = left + 10.0 + s as f64 * 120.0;
        svg += &format!(
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            h - 16.0,
            PALETTE[s % PALETTE.len()],
            x + 14.0,
            h - 7.0,
            esc(name)
        );
    }
    svg += "</svg>\n";
    svg
}

/// `(file name, svg text)` pairs for a report.
pub fn report_svgs(report: &ExperimentReport) -> Vec<(String, String)> {
    let k = report.config.num_classes();
    let cats: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
    let recall: Vec<(String, Vec<f64>)> = report
        .arms
        .iter()
        .map(|a| (a.name.clone(), a.mean.per_class_recall.clone()))
        .collect();
    let curves: Vec<(String, Vec<f64>)> = report.arms.iter().map(|a| (a.name.clone(), a.loss_curve.clone())).collect();
    let mut out = vec![
        ("recall.svg".to_string(), bar_chart_svg("Per-class test recall", &cats, &recall)),
        ("loss.svg".to_string(), line_chart_svg("Mean training loss", &curves)),
    ];
    if !report.two_stage_arms.is_empty() {
        let kk = report.two_stage_arms[0].per_seed.first().map_or(0, |r| r.per_class_proposal_recall.len());
        let cats: Vec<String> = (0..kk).map(|c| format!("c{c}")).collect();
        let series: Vec<(String, Vec<f64>)> = report
            .two_stage_arms
            .iter()
            .map(|a| {
                let rows: Vec<Vec<f64>> = a.per_seed.iter().map(|r| r.per_class_proposal_recall.clone()).collect();
                (a.name.clone(), mean_vectors(&rows))
            })
            .collect();
        out.push(("proposal_recall.svg".to_string(), bar_chart_svg("Per-class proposal recall", &cats, &series)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "seeds": [1, 2],
                "dataset": {"class_counts": [120, 40, 10], "feature_dim": 4,
                            "cluster_separation": 3.0, "label_noise_rate": 0.05},
                "test_per_class": 30,
                "train": {"iterations": 60, "batch_size": 16, "lr_schedule": [[40, 0.2], [60, 0.02]]},
                "arms": [
                    {"name": "CE", "loss": {"kind": "CE"}},
                    {"name": "RFL1", "loss": {"kind": "RFL", "gamma": 2, "threshold": 1.0}},
                    {"name": "RFL+US", "loss": {"kind": "RFL", "gamma": 2, "threshold": 0.25},
                     "undersample": {"0": 0.9}}
                ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn rfl_at_threshold_one_matches_ce() {
        let report = run_experiment(&tiny(), None, false).unwrap();
        let ce = report.arm("CE").unwrap();
        let rfl = report.arm("RFL1").unwrap();
        assert_eq!(ce.mean, rfl.mean);
        assert_eq!(ce.loss_curve, rfl.loss_curve);
        assert_eq!(report.arms.len(), 3);
        assert_eq!(report.rare_class_ids, vec![2, 1, 0]);
    }

    #[test]
    fn canonical_json_is_reproducible() {
        let a = run_experiment(&tiny(), None, false).unwrap().to_canonical_json().unwrap();
        let b = run_experiment(&tiny(), None, false).unwrap().to_canonical_json().unwrap();
        assert_eq!(a, b);
        assert!(!a.contains("wall_clock"));
    }

    #[test]
    fn config_errors_carry_paths() {
        let mut cfg = tiny();
        cfg.seeds = vec![1, 1];
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "seeds[1]"),
            other => panic!("{other:?}"),
        }
        let mut cfg = tiny();
        cfg.arms[2].loss.threshold = 0.0;
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "arms[2].loss"),
            other => panic!("{other:?}"),
        }
        let mut cfg = tiny();
        cfg.arms[1].name = "CE".into();
        assert!(cfg.validate().is_err());

        let bad = r#"{"dataset": {"class_counts": [1, 2], "feature_dim": "x", "cluster_separation": 1},
                      "train": {"iterations": 1, "batch_size": 1, "lr_schedule": [[1, 0.1]]}, "arms": []}"#;
        match ExperimentConfig::from_json(bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "dataset.feature_dim"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn finetune_extends_training() {
        let base = run_experiment(&tiny(), None, false).unwrap();
        let mut cfg = tiny();
        cfg.curve_stride = 1;
        cfg.train.finetune = Some(FinetuneConfig {
            iterations: 30,
            lr_schedule: LrSchedule::constant(0.01).unwrap(),
            extra_per_class: 20,
        });
        let tuned = run_experiment(&cfg, None, false).unwrap();
        assert_eq!(tuned.arms[0].loss_curve.len(), 90);
        assert_ne!(tuned.arms[0].per_seed, base.arms[0].per_seed);
    }

    #[test]
    fn fallback_seed() {
        let mut cfg = tiny();
        cfg.seeds.clear();
        assert!(run_experiment(&cfg, None, false).is_err());
        let r = run_experiment(&cfg, Some(9), false).unwrap();
        assert_eq!(r.seeds, vec![9]);
    }

    #[test]
    fn rounding() {
        assert_eq!(round_sig9(0.123_456_789_123), 0.123_456_789);
        assert_eq!(round_sig9(123_456_789_876.0), 123_456_790_000.0);
        assert_eq!(round_sig9(0.0), 0.0);
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ExperimentConfig::long_tailed_default();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.class_counts, vec![4000, 2000, 1000, 500, 250, 120, 60, 30, 15, 10]);
        assert_eq!(cfg.seeds.len(), 5);
        let rfl = cfg.arms.iter().find(|a| a.name == "RFL").unwrap();
        assert_eq!((rfl.loss.kind, rfl.loss.gamma, rfl.loss.threshold), (LossKind::ReducedFocal, 2.0, 0.25));
    }

    #[test]
    fn svgs_render() {
        let report = run_experiment(&tiny(), None, false).unwrap();
        let svgs = report_svgs(&report);
        assert_eq!(svgs.len(), 2);
        for (_, s) in svgs {
            assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        }
    }
}
