//! Precipitation class scheme, class weights, focal loss and masked MSE.
//!
//! Class indices are 1-based (`1..=n_classes`). Probability and one-hot
//! tensors carry the class axis at position 1: `[B, C, rest..]`.

use nowcast_tensor::{CustomBackward, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const PROB_FLOOR: f64 = 1e-12;
pub const FREQUENCY_FLOOR: f64 = 1e-6;

/// Logarithmic rate bins with per-class weights. Bins are left-closed: a rate
/// equal to a boundary belongs to the upper class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScheme {
    pub boundaries: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for ClassScheme {
    fn default() -> Self {
        default_scheme()
    }
}

/// Boundaries `0.1·2^k` for `k = 0..=8` with uniform weights.
pub fn default_scheme() -> ClassScheme {
    let boundaries: Vec<f64> = (0..9).map(|k| 0.1 * f64::powi(2.0, k)).collect();
    let n = boundaries.len() + 1;
    ClassScheme {
        boundaries,
        weights: vec![1.0 / n as f64; n],
    }
}

impl ClassScheme {
    pub fn new(boundaries: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let s = ClassScheme { boundaries, weights };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.boundaries.is_empty() {
            return Err(CoreError::invalid("class scheme", "needs at least one boundary"));
        }
        if !self.boundaries.iter().all(|b| b.is_finite() && *b > 0.0) {
            return Err(CoreError::invalid("class scheme", "boundaries must be finite and positive"));
        }
        if self.boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::invalid("class scheme", "boundaries must be strictly increasing"));
        }
        if self.weights.len() != self.n_classes() {
            return Err(CoreError::invalid(
                "class scheme",
                format!("{} weights for {} classes", self.weights.len(), self.n_classes()),
            ));
        }
        if !self.weights.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(CoreError::invalid("class scheme", "weights must be positive"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::invalid("class scheme", format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.weights = weights;
        self.validate()?;
        Ok(self)
    }

    /// 1-based class of a nonnegative rate.
    pub fn class_of(&self, rate: f64) -> usize {
        1 + self.boundaries.partition_point(|&b| b <= rate)
    }

    /// Lower edge of a class (0 for class 1).
    pub fn lower_edge(&self, class: usize) -> f64 {
        if class <= 1 {
            0.0
        } else {
            self.boundaries[class - 2]
        }
    }

    /// Geometric mean of the class bin. The open edge classes use a virtual
    /// bin extended by the adjacent boundary ratio.
    pub fn representative_rate(&self, class: usize) -> f64 {
        let n = self.n_classes();
        assert!((1..=n).contains(&class), "class {class} outside 1..={n}");
        let b = &self.boundaries;
        let ratio_low = if b.len() > 1 { b[1] / b[0] } else { 2.0 };
        let ratio_high = if b.len() > 1 { b[b.len() - 1] / b[b.len() - 2] } else { 2.0 };
        let (lo, hi) = if class == 1 {
            (b[0] / ratio_low, b[0])
        } else if class == n {
            (b[n - 2], b[n - 2] * ratio_high)
        } else {
            (b[class - 2], b[class - 1])
        };
        (lo * hi).sqrt()
    }

    /// Index into `boundaries` of the boundary equal to `rate` (relative
    /// tolerance 1e-9), if any.
    pub fn boundary_index(&self, rate: f64) -> Option<usize> {
        self.boundaries
            .iter()
            .position(|&b| (b - rate).abs() <= 1e-9 * b.abs().max(rate.abs()))
    }
}

/// Maps rates to 1-based classes. Positions where `fill` is true map to
/// `None`. Negative or non-finite unflagged rates are rejected.
pub fn bin_classes(rates: &[f64], fill: Option<&[bool]>, scheme: &ClassScheme) -> Result<Vec<Option<usize>>> {
    if let Some(f) = fill {
        if f.len() != rates.len() {
            return Err(CoreError::invalid(
                "bin_classes",
                format!("fill mask length {} differs from {} rates", f.len(), rates.len()),
            ));
        }
    }
    rates
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if fill.is_some_and(|f| f[i]) {
                Ok(None)
            } else if !(r >= 0.0) || !r.is_finite() {
                Err(CoreError::invalid(
                    "bin_classes",
                    format!("rate {r} at index {i} is not a valid nonnegative rate"),
                ))
            } else {
                Ok(Some(scheme.class_of(r)))
            }
        })
        .collect()
}

/// Relative class frequencies over the unmasked entries.
pub fn class_frequencies(classes: &[Option<usize>], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; n_classes];
    for c in classes.iter().flatten() {
        counts[c - 1] += 1;
    }
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Inverse-frequency weights `α_c = (1/f_c) / Σ_k (1/f_k)`, with each
/// frequency floored at [`FREQUENCY_FLOOR`].
pub fn class_weights(frequencies: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = frequencies.iter().map(|&f| 1.0 / f.max(FREQUENCY_FLOOR)).collect();
    let total: f64 = inv.iter().sum();
    inv.iter().map(|v| v / total).collect()
}

/// One-hot tensor `[B, C, rest..]` for `classes` laid out as `[B, rest..]`,
/// plus the validity mask (false where the class is `None`).
pub fn one_hot(classes: &[Option<usize>], position_shape: &[usize], n_classes: usize) -> Result<(Tensor, Vec<bool>)> {
    let positions: usize = position_shape.iter().product();
    if positions != classes.len() || position_shape.is_empty() {
        return Err(CoreError::invalid(
            "one_hot",
            format!("{} classes for position shape {position_shape:?}", classes.len()),
        ));
    }
    let batch = position_shape[0];
    let inner = positions / batch;
    let mut shape = position_shape.to_vec();
    shape.insert(1, n_classes);
    let mut data = vec![0.0; positions * n_classes];
    let mut valid = vec![false; positions];
    for (i, c) in classes.iter().enumerate() {
        if let Some(c) = *c {
            if !(1..=n_classes).contains(&c) {
                return Err(CoreError::invalid("one_hot", format!("class {c} outside 1..={n_classes}")));
            }
            let (b, k) = (i / inner, i % inner);
            data[(b * n_classes + c - 1) * inner + k] = 1.0;
            valid[i] = true;
        }
    }
    Ok((Tensor::new(shape, data)?, valid))
}

/// Scalar loss with its per-class decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub per_class: Vec<f64>,
    /// Probabilities at a true class that were raised to [`PROB_FLOOR`].
    pub clamped: usize,
}

#[derive(Clone, Debug)]
struct FocalTerms {
    value: LossValue,
    /// dFL/dp, same layout as `p`.
    grad: Vec<f64>,
}

fn split_classes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(CoreError::invalid(
            "focal_loss",
            format!("probabilities {shape:?} need a class axis at 1"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn focal_terms(y: &Tensor, p: &Tensor, alpha: &[f64], gamma: f64, valid: Option<&[bool]>) -> Result<FocalTerms> {
    if y.shape() != p.shape() {
        return Err(CoreError::invalid(
            "focal_loss",
            format!("targets {:?} and probabilities {:?} differ", y.shape(), p.shape()),
        ));
    }
    let (batch, nc, inner) = split_classes(p.shape())?;
    if alpha.len() != nc {
        return Err(CoreError::invalid(
            "focal_loss",
            format!("{} weights for {nc} classes", alpha.len()),
        ));
    }
    if let Some(v) = valid {
        if v.len() != batch * inner {
            return Err(CoreError::invalid(
                "focal_loss",
                format!("mask has {} positions, expected {}", v.len(), batch * inner),
            ));
        }
    }
    let n = valid.map_or(batch * inner, |v| v.iter().filter(|&&b| b).count());
    if n == 0 {
        return Err(CoreError::invalid("focal_loss", "every position is masked"));
    }
    let nf = n as f64;
    let (yd, pd) = (y.data(), p.data());
    let mut per_class = vec![0.0; nc];
    let mut grad = vec![0.0; pd.len()];
    let mut clamped = 0;
    for b in 0..batch {
        for k in 0..inner {
            if valid.is_some_and(|v| !v[b * inner + k]) {
                continue;
            }
            for c in 0..nc {
                let at = (b * nc + c) * inner + k;
                let yc = yd[at];
                if yc == 0.0 {
                    continue;
                }
                let mut pc = pd[at];
                if pc < PROB_FLOOR {
                    pc = PROB_FLOOR;
                    clamped += 1;
                }
                let q = (1.0 - pc).max(0.0);
                let lp = pc.ln();
                per_class[c] -= alpha[c] * yc * q.powf(gamma) * lp / nf;
                let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
                grad[at] = -alpha[c] * yc * (q.powf(gamma) / pc - dq * lp) / nf;
            }
        }
    }
    Ok(FocalTerms {
        value: LossValue {
            value: per_class.iter().sum(),
            per_class,
            clamped,
        },
        grad,
    })
}

/// `FL = −(1/N) Σ_i Σ_c α_c y_ic (1 − p_ic)^γ ln p_ic` over the `N` unmasked
/// positions.
pub fn focal_loss(y: &Tensor, p: &Tensor, alpha: &[f64], gamma: f64, valid: Option<&[bool]>) -> Result<LossValue> {
    Ok(focal_terms(y, p, alpha, gamma, valid)?.value)
}

/// Gradient of [`focal_loss`] with respect to `p`.
pub fn focal_loss_grad(y: &Tensor, p: &Tensor, alpha: &[f64], gamma: f64, valid: Option<&[bool]>) -> Result<Tensor> {
    let t = focal_terms(y, p, alpha, gamma, valid)?;
    Ok(Tensor::new(p.shape().to_vec(), t.grad)?)
}

struct GradOnly(Vec<f64>);

impl CustomBackward for GradOnly {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let s = grad_out.item();
        let g = self.0.iter().map(|v| v * s).collect();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), g).expect("gradient matches input"))]
    }
}

/// Records [`focal_loss`] of probabilities `p` on the tape.
pub fn focal_loss_on(g: &mut Graph, p: Var, y: &Tensor, alpha: &[f64], gamma: f64, valid: Option<&[bool]>) -> Result<(Var, LossValue)> {
    let t = focal_terms(y, g.value(p), alpha, gamma, valid)?;
    let out = g.custom(&[p], Tensor::scalar(t.value.value), Box::new(GradOnly(t.grad)));
    Ok((out, t.value))
}

fn mse_terms(pred: &Tensor, target: &Tensor, valid: Option<&[bool]>) -> Result<(LossValue, Vec<f64>)> {
    if pred.shape() != target.shape() {
        return Err(CoreError::invalid(
            "mse_loss",
            format!("prediction {:?} and target {:?} differ", pred.shape(), target.shape()),
        ));
    }
    if let Some(v) = valid {
        if v.len() != pred.len() {
            return Err(CoreError::invalid(
                "mse_loss",
                format!("mask has {} entries, expected {}", v.len(), pred.len()),
            ));
        }
    }
    let n = valid.map_or(pred.len(), |v| v.iter().filter(|&&b| b).count());
    if n == 0 {
        return Err(CoreError::invalid("mse_loss", "mask selects no pixels"));
    }
    let scheme = default_scheme();
    let mut per_class = vec![0.0; scheme.n_classes()];
    let mut grad = vec![0.0; pred.len()];
    let nf = n as f64;
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        let d = p - t;
        per_class[scheme.class_of(t.max(0.0)) - 1] += d * d / nf;
        grad[i] = 2.0 * d / nf;
    }
    Ok((
        LossValue {
            value: per_class.iter().sum(),
            per_class,
            clamped: 0,
        },
        grad,
    ))
}

/// Mean squared error over unmasked entries. The breakdown groups pixels by
/// the default-scheme class of the target rate.
pub fn mse_loss(pred: &Tensor, target: &Tensor, valid: Option<&[bool]>) -> Result<LossValue> {
    Ok(mse_terms(pred, target, valid)?.0)
}

/// Records [`mse_loss`] of `pred` on the tape.
pub fn mse_loss_on(g: &mut Graph, pred: Var, target: &Tensor, valid: Option<&[bool]>) -> Result<(Var, LossValue)> {
    let (value, grad) = mse_terms(g.value(pred), target, valid)?;
    let out = g.custom(&[pred], Tensor::scalar(value.value), Box::new(GradOnly(grad)));
    Ok((out, value))
}
