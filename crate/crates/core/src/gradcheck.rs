//! Central finite-difference verification of the analytic loss gradients.
//!
//! The numeric side only ever calls the loss *value*; it never touches the
//! analytic derivative code it is checking.

use serde::Serialize;

use crate::loss::{
    binary_loss_and_grad, loss_grad_pt, loss_value, softmax_loss_and_grad, LogitVector, LossKind,
    LossParams, ProbPoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Route {
    /// d loss / d pt on the bare probability.
    Scalar,
    /// d loss / d logit through a sigmoid, label 1 and label 0.
    Binary,
    /// d loss / d logits through a 5-way softmax.
    Softmax,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub scalar_tol: f64,
    pub composite_tol: f64,
    /// RFL points with `|pt - th|` below this are skipped.
    pub kink_band: f64,
    pub pts: Vec<f64>,
    pub gammas: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Negative control: negate every analytic gradient before comparing.
    pub flip_sign: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        let mut pts: Vec<f64> = (0..=24).map(|k| 0.01 + 0.04 * k as f64).collect();
        pts.push(0.99);
        GradCheckConfig {
            step: 1e-6,
            scalar_tol: 1e-6,
            composite_tol: 1e-5,
            kink_band: 1e-4,
            pts,
            gammas: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            thresholds: vec![0.25, 0.5, 0.9],
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSample {
    pub route: Route,
    pub kind: LossKind,
    pub pt: f64,
    pub gamma: f64,
    pub threshold: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub tol: f64,
}

impl GradSample {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_kink: usize,
    pub failures: Vec<GradSample>,
    /// Largest `rel_err / tol` seen, pass or fail.
    pub worst: Option<GradSample>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, sample: GradSample) {
        self.checked += 1;
        let ratio = sample.rel_err / sample.tol;
        let worse = self
            .worst
            .as_ref()
            .is_none_or(|w| w.rel_err / w.tol < ratio || ratio.is_nan());
        if !sample.passed() {
            self.failures.push(sample.clone());
        }
        if worse {
            self.worst = Some(sample);
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn central<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Fixed off-target logits for the softmax route.
const SOFTMAX_OTHERS: [f64; 4] = [0.3, -1.2, 0.7, 2.0];

/// Logits over 5 classes with ground truth 0 whose softmax puts exactly
/// (up to rounding) `pt` on the ground truth.
pub fn softmax_logits_for(pt: f64) -> Vec<f64> {
    let rest: f64 = SOFTMAX_OTHERS.iter().map(|z| z.exp()).sum();
    let mut logits = vec![(pt / (1.0 - pt)).ln() + rest.ln()];
    logits.extend_from_slice(&SOFTMAX_OTHERS);
    logits
}

/// Runs every route over the configured grid.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let sign = if cfg.flip_sign { -1.0 } else { 1.0 };
    let h = cfg.step;
    for kind in [LossKind::CrossEntropy, LossKind::Focal, LossKind::ReducedFocal] {
        for &gamma in &cfg.gammas {
            for &threshold in &cfg.thresholds {
                let params = LossParams {
                    kind,
                    gamma,
                    threshold,
                };
                for &pt in &cfg.pts {
                    if kind == LossKind::ReducedFocal && (pt - threshold).abs() < cfg.kink_band {
                        report.skipped_kink += 1;
                        continue;
                    }
                    let sample = |route, analytic: f64, numeric: f64, tol| GradSample {
                        route,
                        kind,
                        pt,
                        gamma,
                        threshold,
                        analytic,
                        numeric,
                        rel_err: rel_err(analytic, numeric),
                        tol,
                    };

                    // scalar
                    let p = ProbPoint::new(pt).expect("grid point inside (0, 1)");
                    let analytic = sign * loss_grad_pt(p, &params);
                    let numeric = central(
                        |x| loss_value(ProbPoint::new(x).expect("step stays inside (0, 1)"), &params),
                        pt,
                        h,
                    );
                    report.record(sample(Route::Scalar, analytic, numeric, cfg.scalar_tol));

                    // sigmoid, both labels
                    let z = (pt / (1.0 - pt)).ln();
                    for (logit, positive) in [(z, true), (-z, false)] {
                        let analytic = sign * binary_loss_and_grad(logit, positive, &params).1;
                        let numeric =
                            central(|x| binary_loss_and_grad(x, positive, &params).0, logit, h);
                        report.record(sample(Route::Binary, analytic, numeric, cfg.composite_tol));
                    }

                    // softmax, whole gradient vector
                    let logits = softmax_logits_for(pt);
                    let x = LogitVector::new(logits.clone(), 0).expect("valid logits");
                    let (_, grad) = softmax_loss_and_grad(&x, &params);
                    let mut max_diff = 0.0f64;
                    let mut max_mag = 0.0f64;
                    let mut worst_pair = (0.0, 0.0);
                    for (j, &g) in grad.iter().enumerate() {
                        let analytic = sign * g;
                        let numeric = central(
                            |v| {
                                let mut shifted = logits.clone();
                                shifted[j] = v;
                                let x = LogitVector::new(shifted, 0).expect("valid logits");
                                softmax_loss_and_grad(&x, &params).0
                            },
                            logits[j],
                            h,
                        );
                        let diff = (analytic - numeric).abs();
                        if diff >= max_diff {
                            max_diff = diff;
                            worst_pair = (analytic, numeric);
                        }
                        max_mag = max_mag.max(analytic.abs()).max(numeric.abs());
                    }
                    let mut s = sample(Route::Softmax, worst_pair.0, worst_pair.1, cfg.composite_tol);
                    s.rel_err = if max_mag == 0.0 { 0.0 } else { max_diff / max_mag };
                    report.record(s);
                }
            }
        }
    }
    report
}
