//! Cross Entropy, Focal Loss and Reduced Focal Loss with analytic derivatives.
//!
//! Every loss here has the form `w(pt) * (-ln pt)` where `pt` is the
//! probability assigned to the ground-truth class:
//!
//! * CE:  `w = 1`
//! * FL:  `w = (1 - pt)^gamma`
//! * RFL: `w = 1` for `pt < th`, `(1 - pt)^gamma / th^gamma` for `pt >= th`
//!
//! The RFL weight is taken verbatim from the piecewise definition. For
//! `th != 0.5` it is discontinuous at `pt = th` (the scaled branch evaluates
//! to `((1 - th) / th)^gamma` there); no smoothing is applied.
//!
//! Standalone scalar functions take a [`ProbPoint`], which rejects the
//! endpoints 0 and 1. The composite softmax and sigmoid front-ends instead
//! clamp `pt` into `[PT_CLAMP, 1 - PT_CLAMP]` so saturated logits never
//! produce infinities during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to `pt` inside the composite (logit-space) losses.
pub const PT_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    /// Cross entropy.
    #[serde(rename = "CE")]
    CrossEntropy,
    /// Focal loss without alpha balancing.
    #[serde(rename = "FL")]
    Focal,
    /// Reduced focal loss.
    #[serde(rename = "RFL")]
    ReducedFocal,
}

impl LossKind {
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "CE",
            LossKind::Focal => "FL",
            LossKind::ReducedFocal => "RFL",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CE" => Ok(LossKind::CrossEntropy),
            "FL" => Ok(LossKind::Focal),
            "RFL" => Ok(LossKind::ReducedFocal),
            other => Err(Error::param("kind", format!("unknown loss kind `{other}`"))),
        }
    }
}

fn default_gamma() -> f64 {
    2.0
}

fn default_threshold() -> f64 {
    0.5
}

/// Focusing exponent, cut-off threshold and loss selector.
///
/// `gamma` is ignored by CE and `threshold` is only read by RFL, but both are
/// always validated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    pub kind: LossKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl LossParams {
    pub fn new(kind: LossKind, gamma: f64, threshold: f64) -> Result<Self> {
        let params = LossParams {
            kind,
            gamma,
            threshold,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn cross_entropy() -> Self {
        LossParams {
            kind: LossKind::CrossEntropy,
            gamma: 0.0,
            threshold: 1.0,
        }
    }

    pub fn focal(gamma: f64) -> Result<Self> {
        Self::new(LossKind::Focal, gamma, 1.0)
    }

    pub fn reduced_focal(gamma: f64, threshold: f64) -> Result<Self> {
        Self::new(LossKind::ReducedFocal, gamma, threshold)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::param("gamma", format!("must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::param(
                "threshold",
                format!("must lie in (0, 1], got {}", self.threshold),
            ));
        }
        Ok(())
    }

    /// Loss at a raw probability; rejects `pt` outside (0, 1).
    pub fn loss(&self, pt: f64) -> Result<f64> {
        Ok(loss_value(ProbPoint::new(pt)?, self))
    }

    /// Short label such as `RFL(g=2,th=0.25)`.
    pub fn label(&self) -> String {
        match self.kind {
            LossKind::CrossEntropy => "CE".to_string(),
            LossKind::Focal => format!("FL(g={})", self.gamma),
            LossKind::ReducedFocal => format!("RFL(g={},th={})", self.gamma, self.threshold),
        }
    }
}

/// Probability of the ground-truth class, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ProbPoint(f64);

impl ProbPoint {
    pub fn new(pt: f64) -> Result<Self> {
        if pt > 0.0 && pt < 1.0 {
            Ok(ProbPoint(pt))
        } else {
            Err(Error::ProbabilityDomain(pt))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Logits for one sample plus the index of its ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    logits: Vec<f64>,
    gt: usize,
}

impl LogitVector {
    pub fn new(logits: Vec<f64>, gt: usize) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::param("logits", "need at least two classes"));
        }
        if gt >= logits.len() {
            return Err(Error::param(
                "gt",
                format!("class index {gt} out of range for {} logits", logits.len()),
            ));
        }
        if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
            return Err(Error::param("logits", format!("non-finite logit {bad}")));
        }
        Ok(LogitVector { logits, gt })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn gt(&self) -> usize {
        self.gt
    }
}

/// `-ln(pt)`.
pub fn ce_loss(p: ProbPoint) -> f64 {
    -p.0.ln()
}

/// `(1 - pt)^gamma * (-ln pt)`.
pub fn focal_loss(p: ProbPoint, params: &LossParams) -> f64 {
    (1.0 - p.0).powf(params.gamma) * -p.0.ln()
}

/// Cut-off factor of the reduced focal loss: 1 below the threshold, the
/// focal weight rescaled by `th^gamma` at and above it.
pub fn cutoff_factor(p: ProbPoint, params: &LossParams) -> f64 {
    cutoff(p.0, 1.0 - p.0, params)
}

fn cutoff(pt: f64, one_minus: f64, params: &LossParams) -> f64 {
    if pt < params.threshold {
        1.0
    } else {
        one_minus.powf(params.gamma) / params.threshold.powf(params.gamma)
    }
}

/// `cutoff_factor(pt) * (-ln pt)`.
pub fn reduced_focal_loss(p: ProbPoint, params: &LossParams) -> f64 {
    cutoff_factor(p, params) * -p.0.ln()
}

/// Loss of the kind selected by `params`.
pub fn loss_value(p: ProbPoint, params: &LossParams) -> f64 {
    match params.kind {
        LossKind::CrossEntropy => ce_loss(p),
        LossKind::Focal => focal_loss(p, params),
        LossKind::ReducedFocal => reduced_focal_loss(p, params),
    }
}

/// `d loss / d pt` for the selected kind.
///
/// RFL is not differentiable at `pt = th`; there the derivative of the
/// scaled (`pt >= th`) branch is returned.
pub fn loss_grad_pt(p: ProbPoint, params: &LossParams) -> f64 {
    let pt = p.0;
    match params.kind {
        LossKind::CrossEntropy => -1.0 / pt,
        LossKind::Focal => focal_grad_pt(pt, params.gamma),
        LossKind::ReducedFocal => {
            if pt < params.threshold {
                -1.0 / pt
            } else {
                focal_grad_pt(pt, params.gamma) / params.threshold.powf(params.gamma)
            }
        }
    }
}

fn focal_grad_pt(pt: f64, gamma: f64) -> f64 {
    let q = 1.0 - pt;
    let hard = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * pt.ln()
    };
    hard - q.powf(gamma) / pt
}

/// `pt`, `1 - pt` and `ln pt` computed by the caller in the most accurate
/// way available for its parametrisation.
#[derive(Debug, Clone, Copy)]
struct ProbTerms {
    pt: f64,
    one_minus: f64,
    ln_pt: f64,
}

impl ProbTerms {
    fn clamped(self) -> Self {
        if self.pt < PT_CLAMP {
            let pt = PT_CLAMP;
            ProbTerms {
                pt,
                one_minus: 1.0 - pt,
                ln_pt: pt.ln(),
            }
        } else if self.one_minus < PT_CLAMP {
            let one_minus = PT_CLAMP;
            ProbTerms {
                pt: 1.0 - one_minus,
                one_minus,
                ln_pt: (-one_minus).ln_1p(),
            }
        } else {
            self
        }
    }
}

/// Returns `(loss, d loss / d ln pt)`.
fn eval_log_space(t: ProbTerms, params: &LossParams) -> (f64, f64) {
    let ce = -t.ln_pt;
    match params.kind {
        LossKind::CrossEntropy => (ce, -1.0),
        LossKind::Focal => focal_log_space(t, params.gamma),
        LossKind::ReducedFocal => {
            if t.pt < params.threshold {
                (ce, -1.0)
            } else {
                let scale = params.threshold.powf(params.gamma);
                let (loss, grad) = focal_log_space(t, params.gamma);
                (loss / scale, grad / scale)
            }
        }
    }
}

fn focal_log_space(t: ProbTerms, gamma: f64) -> (f64, f64) {
    let weight = t.one_minus.powf(gamma);
    let loss = weight * -t.ln_pt;
    let hard = if gamma == 0.0 {
        0.0
    } else {
        gamma * t.pt * t.one_minus.powf(gamma - 1.0) * t.ln_pt
    };
    (loss, hard - weight)
}

/// Softmax front-end: loss at `pt = softmax(logits)[gt]` and its gradient
/// with respect to every logit.
pub fn softmax_loss_and_grad(x: &LogitVector, params: &LossParams) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; x.logits.len()];
    let loss = softmax_loss_and_grad_into(&x.logits, x.gt, params, &mut grad);
    (loss, grad)
}

/// Allocation-free variant used by the trainer. `grad` is overwritten.
pub(crate) fn softmax_loss_and_grad_into(
    logits: &[f64],
    gt: usize,
    params: &LossParams,
    grad: &mut [f64],
) -> f64 {
    debug_assert_eq!(logits.len(), grad.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut rest = 0.0;
    for (j, (&z, g)) in logits.iter().zip(grad.iter_mut()).enumerate() {
        let e = (z - max).exp();
        *g = e;
        sum += e;
        if j != gt {
            rest += e;
        }
    }
    let terms = ProbTerms {
        pt: grad[gt] / sum,
        one_minus: rest / sum,
        ln_pt: logits[gt] - max - sum.ln(),
    }
    .clamped();
    let (loss, dl_dlnpt) = eval_log_space(terms, params);
    for (j, g) in grad.iter_mut().enumerate() {
        let softmax = *g / sum;
        let indicator = if j == gt { 1.0 } else { 0.0 };
        *g = dl_dlnpt * (indicator - softmax);
    }
    loss
}

/// Sigmoid front-end for a single objectness logit. Returns
/// `(loss, d loss / d logit)`.
pub fn binary_loss_and_grad(logit: f64, positive: bool, params: &LossParams) -> (f64, f64) {
    // pt = sigmoid(sign * logit)
    let sign = if positive { 1.0 } else { -1.0 };
    let z = sign * logit;
    let terms = ProbTerms {
        pt: sigmoid(z),
        one_minus: sigmoid(-z),
        ln_pt: -softplus(-z),
    }
    .clamped();
    let (loss, dl_dlnpt) = eval_log_space(terms, params);
    // d ln pt / d logit = sign * (1 - pt)
    (loss, dl_dlnpt * sign * terms.one_minus)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}
