//! Imbalance-aware multi-label losses with analytic gradients.
//!
//! All three losses operate on raw logits, apply a sigmoid with probability
//! clamp `[eps, 1-eps]`, and reduce by the mean over all cells, so values
//! are comparable across batch sizes. Per-label positive weights multiply
//! the positive log term only.
//!
//! Per positive cell with probability `p` and weight `w`:
//!
//! * weighted BCE: `-w * ln p`
//! * focal:        `-alpha * w * (1-p)^gamma * ln p`
//! * asymmetric:   `-w * (1-p)^gamma_pos * ln p`
//!
//! Per negative cell:
//!
//! * weighted BCE: `-ln(1-p)`
//! * focal:        `-(1-alpha) * p^gamma * ln(1-p)`
//! * asymmetric:   `-(p_m)^gamma_neg * ln(1-p_m)` with `p_m = max(p - m, 0)`,
//!   so negatives already below the margin contribute exactly zero (the max
//!   is treated as a subgradient: zero below the margin).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default probability clamp for log stability.
pub const DEFAULT_EPS: f64 = 1e-7;

/// Default cap bounding the weight of labels with zero positives.
pub const DEFAULT_PW_CAP: f64 = 1e3;

/// Per-label positive weights: the negative-to-positive count ratio, capped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosWeights {
    pub w: Vec<f64>,
    pub cap: f64,
    /// Labels that had no positives in the counting matrix and received the
    /// cap value.
    pub zero_positive: Vec<usize>,
}

impl PosWeights {
    /// Uniform weights of 1, used when weighting is disabled.
    pub fn disabled(label_count: usize) -> Self {
        PosWeights {
            w: vec![1.0; label_count],
            cap: DEFAULT_PW_CAP,
            zero_positive: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Computes per-label positive weights `min(neg_j / pos_j, cap)` from a
/// training gold matrix. Labels with zero positives get the cap and are
/// reported in `zero_positive`.
pub fn compute_pos_weights(gold: ArrayView2<'_, f64>, cap: f64) -> PosWeights {
    assert!(gold.nrows() > 0, "gold matrix must be nonempty");
    let n = gold.nrows() as f64;
    let mut w = Vec::with_capacity(gold.ncols());
    let mut zero_positive = Vec::new();
    for (j, col) in gold.columns().into_iter().enumerate() {
        let pos: f64 = col.sum();
        if pos == 0.0 {
            log::warn!("label {j} has no positives; pos_weight capped at {cap}");
            zero_positive.push(j);
            w.push(cap);
        } else {
            w.push(((n - pos) / pos).min(cap));
        }
    }
    PosWeights {
        w,
        cap,
        zero_positive,
    }
}

/// Which loss to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Focal,
    Asl,
}

/// Loss selection and parameters, serialized inside experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub use_pw: bool,
    /// Focal positive/negative balance, in [0, 1].
    pub alpha: f64,
    /// Focal focusing exponent, >= 0.
    pub gamma: f64,
    /// Asymmetric positive focusing exponent, >= 0.
    pub gamma_pos: f64,
    /// Asymmetric negative focusing exponent, >= 0.
    pub gamma_neg: f64,
    /// Asymmetric probability margin, in [0, 1).
    pub margin: f64,
    /// Probability clamp.
    pub eps: f64,
    /// Cap for pos-weight computation.
    pub pw_cap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Bce,
            use_pw: false,
            alpha: 0.25,
            gamma: 2.0,
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
            eps: DEFAULT_EPS,
            pw_cap: DEFAULT_PW_CAP,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if self.gamma < 0.0 || self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::invalid("focusing exponents must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid(format!(
                "margin must be in [0,1), got {}",
                self.margin
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::invalid(format!("eps must be in (0,0.5), got {}", self.eps)));
        }
        if self.pw_cap <= 0.0 {
            return Err(Error::invalid("pw_cap must be positive"));
        }
        Ok(())
    }
}

fn check_inputs(
    logits: &ArrayView2<'_, f64>,
    gold: &ArrayView2<'_, f64>,
    pw: &PosWeights,
) -> Result<()> {
    if logits.dim() != gold.dim() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs gold {:?}",
            logits.dim(),
            gold.dim()
        )));
    }
    if pw.len() != logits.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "pos-weights {} vs labels {}",
            pw.len(),
            logits.ncols()
        )));
    }
    if logits.nrows() == 0 {
        return Err(Error::invalid("empty logits matrix"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    if gold.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::invalid("gold matrix must be 0/1"));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-cell loss value and derivative with respect to the logit.
type CellFn<'a> = dyn Fn(f64, f64, f64) -> (f64, f64) + 'a;

fn reduce(
    logits: ArrayView2<'_, f64>,
    gold: ArrayView2<'_, f64>,
    pw: &PosWeights,
    cell: &CellFn<'_>,
) -> (f64, Array2<f64>) {
    let cells = (logits.nrows() * logits.ncols()) as f64;
    let mut grad = Array2::<f64>::zeros(logits.dim());
    let mut total = 0.0;
    for ((i, j), &x) in logits.indexed_iter() {
        let (value, dx) = cell(x, gold[(i, j)], pw.w[j]);
        total += value;
        grad[(i, j)] = dx / cells;
    }
    (total / cells, grad)
}

/// Weighted binary cross-entropy. Returns the mean loss and its gradient
/// with respect to the logits.
pub fn bce_pw(
    logits: ArrayView2<'_, f64>,
    gold: ArrayView2<'_, f64>,
    pw: &PosWeights,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    check_inputs(&logits, &gold, pw)?;
    let cell = move |x: f64, y: f64, w: f64| {
        let p = sigmoid(x).clamp(eps, 1.0 - eps);
        if y != 0.0 {
            // loss: -w ln p; d loss / d logit: w (p - 1)
            (-w * p.ln(), w * (p - 1.0))
        } else {
            (-(1.0 - p).ln(), p)
        }
    };
    Ok(reduce(logits, gold, pw, &cell))
}

/// Focal loss with positive weighting. Positives contribute
/// `-alpha * w * (1-p)^gamma * ln p`, negatives
/// `-(1-alpha) * p^gamma * ln(1-p)`.
pub fn focal_pw(
    logits: ArrayView2<'_, f64>,
    gold: ArrayView2<'_, f64>,
    pw: &PosWeights,
    alpha: f64,
    gamma: f64,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    check_inputs(&logits, &gold, pw)?;
    let cell = move |x: f64, y: f64, w: f64| {
        let p = sigmoid(x).clamp(eps, 1.0 - eps);
        let dpdx = p * (1.0 - p);
        if y != 0.0 {
            let modulator = (1.0 - p).powf(gamma);
            let loss = -alpha * w * modulator * p.ln();
            // d/dp [ -(1-p)^g ln p ] = g (1-p)^(g-1) ln p - (1-p)^g / p
            let dldp = if gamma == 0.0 {
                -alpha * w / p
            } else {
                alpha * w * (gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - modulator / p)
            };
            (loss, dldp * dpdx)
        } else {
            let modulator = p.powf(gamma);
            let loss = -(1.0 - alpha) * modulator * (1.0 - p).ln();
            let dldp = if gamma == 0.0 {
                (1.0 - alpha) / (1.0 - p)
            } else {
                (1.0 - alpha)
                    * (modulator / (1.0 - p) - gamma * p.powf(gamma - 1.0) * (1.0 - p).ln())
            };
            (loss, dldp * dpdx)
        }
    };
    Ok(reduce(logits, gold, pw, &cell))
}

/// Asymmetric loss with positive weighting: separate focusing exponents for
/// positives and negatives plus a probability margin that zeroes easy
/// negatives.
pub fn asl_pw(
    logits: ArrayView2<'_, f64>,
    gold: ArrayView2<'_, f64>,
    pw: &PosWeights,
    gamma_pos: f64,
    gamma_neg: f64,
    margin: f64,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    check_inputs(&logits, &gold, pw)?;
    let cell = move |x: f64, y: f64, w: f64| {
        let p = sigmoid(x).clamp(eps, 1.0 - eps);
        let dpdx = p * (1.0 - p);
        if y != 0.0 {
            let modulator = (1.0 - p).powf(gamma_pos);
            let loss = -w * modulator * p.ln();
            let dldp = if gamma_pos == 0.0 {
                -w / p
            } else {
                w * (gamma_pos * (1.0 - p).powf(gamma_pos - 1.0) * p.ln() - modulator / p)
            };
            (loss, dldp * dpdx)
        } else {
            let shifted = p - margin;
            if shifted <= 0.0 {
                // Below the margin the shifted probability is exactly 0, so
                // the contribution and subgradient are both 0.
                return (0.0, 0.0);
            }
            let q = (1.0 - shifted).max(eps);
            let modulator = shifted.powf(gamma_neg);
            let loss = -modulator * q.ln();
            let dldp = if gamma_neg == 0.0 {
                1.0 / q
            } else {
                modulator / q - gamma_neg * shifted.powf(gamma_neg - 1.0) * q.ln()
            };
            (loss, dldp * dpdx)
        }
    };
    Ok(reduce(logits, gold, pw, &cell))
}

/// Dispatches on the configured loss kind. `pw` should already reflect
/// `config.use_pw` (pass [`PosWeights::disabled`] when weighting is off).
pub fn loss_and_grad(
    config: &LossConfig,
    logits: ArrayView2<'_, f64>,
    gold: ArrayView2<'_, f64>,
    pw: &PosWeights,
) -> Result<(f64, Array2<f64>)> {
    match config.kind {
        LossKind::Bce => bce_pw(logits, gold, pw, config.eps),
        LossKind::Focal => focal_pw(logits, gold, pw, config.alpha, config.gamma, config.eps),
        LossKind::Asl => asl_pw(
            logits,
            gold,
            pw,
            config.gamma_pos,
            config.gamma_neg,
            config.margin,
            config.eps,
        ),
    }
}
