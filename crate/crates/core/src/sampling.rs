//! Per-instance random undersampling and synthetic long-tailed datasets.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, standard_normal, uniform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
    /// Set when noise injection replaced the true label.
    pub noisy: bool,
}

/// Per-class instance counts, keyed in ascending class order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFrequencyTable {
    pub counts: BTreeMap<usize, usize>,
}

impl ClassFrequencyTable {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, class: usize) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    /// The `n` most frequent classes, ties broken by lower class id.
    pub fn most_frequent(&self, n: usize) -> Vec<usize> {
        let mut by_count: Vec<(usize, usize)> = self.counts.iter().map(|(&c, &k)| (c, k)).collect();
        by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        by_count.into_iter().take(n).map(|(c, _)| c).collect()
    }
}

pub fn class_frequencies(examples: &[LabeledExample]) -> ClassFrequencyTable {
    let mut counts = BTreeMap::new();
    for ex in examples {
        *counts.entry(ex.label).or_insert(0) += 1;
    }
    ClassFrequencyTable { counts }
}

/// Probability of dropping each instance of a class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UndersamplePolicy {
    pub skip_prob: BTreeMap<usize, f64>,
    #[serde(default)]
    pub seed: u64,
}

impl UndersamplePolicy {
    pub fn new(skip_prob: BTreeMap<usize, f64>, seed: u64) -> Result<Self> {
        let policy = UndersamplePolicy { skip_prob, seed };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        for (&class, &p) in &self.skip_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(
                    "skip_prob",
                    format!("class {class}: {p} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        UndersamplePolicy {
            skip_prob: self.skip_prob.clone(),
            seed,
        }
    }
}

/// Keeps each example of class `c` with probability `1 - skip_prob[c]`.
///
/// One uniform is drawn per example whose class appears in the policy, in
/// input order; the example survives when the draw is `>= skip_prob`.
pub fn undersample(examples: &[LabeledExample], policy: &UndersamplePolicy) -> Vec<LabeledExample> {
    undersample_indices(examples, policy)
        .into_iter()
        .map(|i| examples[i].clone())
        .collect()
}

/// Indices (ascending) of the examples [`undersample`] would retain.
pub fn undersample_indices(examples: &[LabeledExample], policy: &UndersamplePolicy) -> Vec<usize> {
    let mut rng = rng::rng(policy.seed);
    examples
        .iter()
        .enumerate()
        .filter(|(_, ex)| match policy.skip_prob.get(&ex.label) {
            None => true,
            Some(&p) => uniform(&mut rng) >= p,
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub feature_dim: usize,
    pub cluster_separation: f64,
    #[serde(default)]
    pub label_noise_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::param("num_classes", "must be positive"));
        }
        if self.class_counts.len() != self.num_classes {
            return Err(Error::param(
                "class_counts",
                format!(
                    "has {} entries for {} classes",
                    self.class_counts.len(),
                    self.num_classes
                ),
            ));
        }
        if let Some(c) = self.class_counts.iter().position(|&k| k == 0) {
            return Err(Error::param("class_counts", format!("class {c} has zero examples")));
        }
        if self.feature_dim < 1 {
            return Err(Error::param("feature_dim", "must be at least 1"));
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation > 0.0) {
            return Err(Error::param("cluster_separation", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::param("label_noise_rate", "must lie in [0, 1)"));
        }
        if self.label_noise_rate > 0.0 && self.num_classes < 2 {
            return Err(Error::param("label_noise_rate", "label noise needs at least two classes"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.class_counts.iter().sum()
    }

    /// Number of labels the generator flips: `floor(total * rate)`, with a
    /// 1e-9 guard so products like `0.29 * 100` do not round down to 28.
    pub fn noisy_count(&self) -> usize {
        (self.total() as f64 * self.label_noise_rate + 1e-9).floor() as usize
    }
}

/// Class centres with pairwise distance at least `cluster_separation`.
///
/// With `feature_dim >= num_classes` class `c` sits at `(s / sqrt 2) e_c`, a
/// regular simplex with every pair exactly `s` apart. Otherwise classes are
/// laid on the integer lattice `{0, .., m-1}^d` scaled by `s`, where `m` is
/// the smallest side admitting `num_classes` points. Neither layout consumes
/// randomness.
pub fn class_means(num_classes: usize, feature_dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if feature_dim >= num_classes {
        let radius = separation / std::f64::consts::SQRT_2;
        return (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; feature_dim];
                m[c] = radius;
                m
            })
            .collect();
    }
    let mut side = 1usize;
    while side.checked_pow(feature_dim as u32).is_some_and(|n| n < num_classes) {
        side += 1;
    }
    (0..num_classes)
        .map(|c| {
            let mut rest = c;
            (0..feature_dim)
                .map(|_| {
                    let digit = rest % side;
                    rest /= side;
                    digit as f64 * separation
                })
                .collect()
        })
        .collect()
}

/// Draws `counts[c]` unit-variance Gaussian points around `means[c]` for each
/// class in order, then flips `floor(total * noise_rate)` labels chosen
/// uniformly without replacement to a uniformly chosen different class.
pub fn sample_around_means(
    means: &[Vec<f64>],
    counts: &[usize],
    noise_rate: f64,
    seed: u64,
) -> Vec<LabeledExample> {
    let mut rng = rng::rng(seed);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (label, (mean, &count)) in means.iter().zip(counts).enumerate() {
        for _ in 0..count {
            let features = mean.iter().map(|m| m + standard_normal(&mut rng)).collect();
            out.push(LabeledExample {
                features,
                label,
                noisy: false,
            });
        }
    }
    let total = out.len();
    let n_noisy = (total as f64 * noise_rate + 1e-9).floor() as usize;
    if n_noisy > 0 && means.len() > 1 {
        let k = means.len();
        for i in index::sample(&mut rng, total, n_noisy).into_iter() {
            let old = out[i].label;
            let mut new = rng.gen_range(0..k - 1);
            if new >= old {
                new += 1;
            }
            out[i].label = new;
            out[i].noisy = true;
        }
    }
    out
}

pub fn generate_synthetic(spec: &SynthDatasetSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let means = class_means(spec.num_classes, spec.feature_dim, spec.cluster_separation);
    Ok(sample_around_means(
        &means,
        &spec.class_counts,
        spec.label_noise_rate,
        spec.seed,
    ))
}

/// Writes `feature_0..feature_{d-1},label,noisy` with a header row. Floats use
/// the shortest representation that parses back to the same value; `noisy`
/// is `0` or `1`.
pub fn write_csv<W: Write>(mut w: W, examples: &[LabeledExample]) -> Result<()> {
    let dim = examples.first().map_or(0, |e| e.features.len());
    let mut header: Vec<String> = (0..dim).map(|i| format!("feature_{i}")).collect();
    header.push("label".into());
    header.push("noisy".into());
    writeln!(w, "{}", header.join(","))?;
    for ex in examples {
        if ex.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: ex.features.len(),
            });
        }
        let mut row: Vec<String> = ex.features.iter().map(|v| v.to_string()).collect();
        row.push(ex.label.to_string());
        row.push(u8::from(ex.noisy).to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<LabeledExample>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or(Error::EmptyInput("dataset csv"))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let n = cols.len();
    if n < 2 || cols[n - 2] != "label" || cols[n - 1] != "noisy" {
        return Err(Error::Parse(format!("unexpected csv header `{header}`")));
    }
    let dim = n - 2;
    for (i, c) in cols[..dim].iter().enumerate() {
        if *c != format!("feature_{i}") {
            return Err(Error::Parse(format!("column {i} is `{c}`, expected feature_{i}")));
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != n {
            return Err(Error::Parse(format!(
                "row {}: {} fields, expected {n}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Parse(format!("row {}: bad {what}", lineno + 2));
        let features = fields[..dim]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        let label = fields[dim].parse::<usize>().map_err(|_| bad("label"))?;
        let noisy = match fields[dim + 1] {
            "0" | "false" => false,
            "1" | "true" => true,
            _ => return Err(bad("noisy flag")),
        };
        out.push(LabeledExample {
            features,
            label,
            noisy,
        });
    }
    Ok(out)
}
