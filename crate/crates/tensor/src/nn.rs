//! Tensor-level neural primitives. The autodiff graph wraps these and adds
//! the adjoints; they are also usable directly for inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::{split_at_axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    /// Softmax over the given class axis.
    Softmax {
        axis: usize,
    },
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(input: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Sigmoid => Ok(input.map(sigmoid)),
        Activation::Tanh => Ok(input.map(f64::tanh)),
        Activation::Relu => Ok(input.map(|x| x.max(0.0))),
        Activation::Softmax { axis } => softmax(input, axis),
    }
}

pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.rank() {
        return Err(TensorError::invalid(
            "softmax",
            format!("class axis {axis} out of range for shape {:?}", input.shape()),
        ));
    }
    let (outer, n, inner) = split_at_axis(input.shape(), axis);
    let x = input.data();
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |c: usize| (o * n + c) * inner + i;
            let max = (0..n).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..n {
                let e = (x[at(c)] - max).exp();
                y[at(c)] = e;
                total += e;
            }
            for c in 0..n {
                y[at(c)] /= total;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), y)
}

/// 2×2 max pooling over the last two axes. Returns the pooled tensor and,
/// for every output element, the flat input index it was taken from. Ties go
/// to the first element in row-major window order.
pub fn maxpool2d_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let rank = input.rank();
    if rank < 3 {
        return Err(TensorError::invalid(
            "maxpool2d",
            format!("needs at least [channels, height, width], got {:?}", input.shape()),
        ));
    }
    let (h, w) = (input.shape()[rank - 2], input.shape()[rank - 1]);
    if h % 2 != 0 {
        return Err(TensorError::invalid("maxpool2d", format!("odd height extent {h}")));
    }
    if w % 2 != 0 {
        return Err(TensorError::invalid("maxpool2d", format!("odd width extent {w}")));
    }
    let planes: usize = input.shape()[..rank - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * w + 2 * j + dj;
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Ok((Tensor::new(shape, out)?, argmax))
}

pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    maxpool2d_with_argmax(input).map(|(t, _)| t)
}

/// Per-channel running statistics for batch normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub enum NormMode<'a> {
    /// Normalize with batch statistics and fold them into `running` as
    /// `running ← momentum·running + (1 − momentum)·batch`.
    Train {
        running: &'a mut RunningStats,
        momentum: f64,
    },
    Eval {
        running: &'a RunningStats,
    },
}

impl NormMode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, NormMode::Train { .. })
    }
}

/// Result of a batch-norm forward pass, with the intermediates its adjoint needs.
pub(crate) struct NormOutput {
    pub out: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Batch normalization over channel axis 1 of `[B, C, ..]`, reducing over the
/// batch and every trailing axis.
pub(crate) fn batchnorm_core(input: &Tensor, gamma: &Tensor, beta: &Tensor, mode: NormMode<'_>, eps: f64) -> Result<NormOutput> {
    if input.rank() < 2 {
        return Err(TensorError::invalid(
            "batchnorm",
            format!("needs [batch, channels, ..], got {:?}", input.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(TensorError::invalid("batchnorm", format!("epsilon must be positive, got {eps}")));
    }
    let (batch, ch, inner) = split_at_axis(input.shape(), 1);
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.len() != ch {
            return Err(TensorError::mismatch("batchnorm", format!("{name} channels"), ch, t.len()));
        }
    }
    let count = (batch * inner) as f64;
    let x = input.data();
    let idx = |b: usize, c: usize, i: usize| (b * ch + c) * inner + i;

    let mut inv_std = vec![0.0; ch];
    let mut mean = vec![0.0; ch];
    match mode {
        NormMode::Train { running, momentum } => {
            if running.mean.len() != ch || running.var.len() != ch {
                return Err(TensorError::mismatch("batchnorm", "running stats channels", ch, running.mean.len()));
            }
            for c in 0..ch {
                let mut s = 0.0;
                for b in 0..batch {
                    for i in 0..inner {
                        s += x[idx(b, c, i)];
                    }
                }
                let mu = s / count;
                let mut ss = 0.0;
                for b in 0..batch {
                    for i in 0..inner {
                        let d = x[idx(b, c, i)] - mu;
                        ss += d * d;
                    }
                }
                let var = ss / count;
                mean[c] = mu;
                inv_std[c] = 1.0 / (var + eps).sqrt();
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                running.mean[c] = momentum * running.mean[c] + (1.0 - momentum) * mu;
                running.var[c] = momentum * running.var[c] + (1.0 - momentum) * unbiased;
            }
        }
        NormMode::Eval { running } => {
            if running.mean.len() != ch || running.var.len() != ch {
                return Err(TensorError::mismatch("batchnorm", "running stats channels", ch, running.mean.len()));
            }
            for c in 0..ch {
                mean[c] = running.mean[c];
                inv_std[c] = 1.0 / (running.var[c] + eps).sqrt();
            }
        }
    }
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..batch {
        for c in 0..ch {
            for i in 0..inner {
                let k = idx(b, c, i);
                let h = (x[k] - mean[c]) * inv_std[c];
                xhat[k] = h;
                out[k] = h * g[c] + bt[c];
            }
        }
    }
    Ok(NormOutput {
        out: Tensor::new(input.shape().to_vec(), out)?,
        xhat,
        inv_std,
    })
}

pub fn batchnorm(input: &Tensor, gamma: &Tensor, beta: &Tensor, mode: NormMode<'_>, eps: f64) -> Result<Tensor> {
    batchnorm_core(input, gamma, beta, mode, eps).map(|o| o.out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train { seed: u64 },
    Eval,
}

/// Inverted-dropout multiplier field: 0 with probability `rate`, else
/// `1 / (1 − rate)`. `None` means identity (eval mode or zero rate).
pub(crate) fn dropout_mask(len: usize, rate: f64, mode: DropoutMode) -> Result<Option<Vec<f64>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::invalid("dropout", format!("rate must lie in [0, 1), got {rate}")));
    }
    match mode {
        DropoutMode::Eval => Ok(None),
        DropoutMode::Train { .. } if rate == 0.0 => Ok(None),
        DropoutMode::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 / (1.0 - rate);
            Ok(Some(
                (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect(),
            ))
        }
    }
}

pub fn dropout(input: &Tensor, rate: f64, mode: DropoutMode) -> Result<Tensor> {
    match dropout_mask(input.len(), rate, mode)? {
        None => Ok(input.clone().with_requires_grad(false)),
        Some(mask) => {
            let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            Tensor::new(input.shape().to_vec(), data)
        }
    }
}

/// Concatenates along `axis`; every other extent must agree.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::invalid("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    for t in &inputs[1..] {
        if t.rank() != rank {
            return Err(TensorError::RankMismatch {
                op: "concat",
                expected: rank,
                found: t.rank(),
            });
        }
        for ax in (0..rank).filter(|&a| a != axis) {
            if t.shape()[ax] != first.shape()[ax] {
                return Err(TensorError::mismatch(
                    "concat",
                    format!("axis {ax}"),
                    first.shape()[ax],
                    t.shape()[ax],
                ));
            }
        }
    }
    let (outer, _, inner) = split_at_axis(first.shape(), axis);
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let n = t.shape()[axis];
            data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}

/// Channel concatenation `a ⊕ b` along `axis`.
pub fn concat_channels(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    concat(&[a, b], axis)
}

/// Contiguous range `[start, start + len)` along `axis`.
pub fn slice_axis(input: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= input.rank() {
        return Err(TensorError::invalid("slice", format!("axis {axis} out of range")));
    }
    let (outer, n, inner) = split_at_axis(input.shape(), axis);
    if len == 0 || start + len > n {
        return Err(TensorError::invalid(
            "slice",
            format!("range {start}..{} exceeds extent {n}", start + len),
        ));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&input.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut shape = input.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_hand_case() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant_halves_resolution() {
        let x = Tensor::full(&[2, 3, 4, 6], 1.5);
        let y = maxpool2d(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = Tensor::full(&[1, 2, 2], 7.0);
        let (_, arg) = maxpool2d_with_argmax(&x).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn maxpool_rejects_odd() {
        let err = maxpool2d(&Tensor::zeros(&[1, 3, 4])).unwrap_err();
        assert!(err.to_string().contains("odd height"));
    }

    #[test]
    fn softmax_closed_form() {
        let x = Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = Tensor::full(&[3, 5], 2.0);
        let y = softmax(&x, 1).unwrap();
        assert!(y.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
        let y = activation(&x, Activation::Relu).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let x = Tensor::from_fn(&[4, 3, 5, 5], |i| ((i * 37) % 11) as f64 * 0.3 + (i % 3) as f64);
        let mut rs = RunningStats::new(3);
        let y = batchnorm(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            NormMode::Train {
                running: &mut rs,
                momentum: 0.9,
            },
            1e-12,
        )
        .unwrap();
        let (b, c, inner) = (4, 3, 25);
        for ch in 0..c {
            let vals: Vec<f64> = (0..b)
                .flat_map(|n| (0..inner).map(move |i| (n * c + ch) * inner + i))
                .map(|k| y.data()[k])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn batchnorm_affine() {
        let x = Tensor::from_fn(&[8, 1, 16], |i| ((i * 7919) % 101) as f64);
        let mut rs = RunningStats::new(1);
        let y = batchnorm(
            &x,
            &Tensor::full(&[1], 2.0),
            &Tensor::full(&[1], 3.0),
            NormMode::Train {
                running: &mut rs,
                momentum: 0.9,
            },
            1e-12,
        )
        .unwrap();
        let n = y.len() as f64;
        let mean = y.sum() / n;
        let sd = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 3.0).abs() < 1e-10);
        assert!((sd - 2.0).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_eval_formula() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 5.0, -1.0]).unwrap();
        let rs = RunningStats {
            mean: vec![0.5, 2.0],
            var: vec![4.0, 0.25],
        };
        let gamma = Tensor::new(vec![2], vec![1.5, -1.0]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let eps = 1e-3;
        let y = batchnorm(&x, &gamma, &beta, NormMode::Eval { running: &rs }, eps).unwrap();
        let expect = [
            (1.0 - 0.5) / (4.0f64 + eps).sqrt() * 1.5 + 0.1,
            (2.0 - 0.5) / (4.0f64 + eps).sqrt() * 1.5 + 0.1,
            (5.0 - 2.0) / (0.25f64 + eps).sqrt() * -1.0 + 0.2,
            (-1.0 - 2.0) / (0.25f64 + eps).sqrt() * -1.0 + 0.2,
        ];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(rs.mean, vec![0.5, 2.0]);
    }

    #[test]
    fn batchnorm_zero_variance_channel_is_finite() {
        let x = Tensor::full(&[4, 2, 3], 5.0);
        let mut rs = RunningStats::new(2);
        let y = batchnorm(
            &x,
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            NormMode::Train {
                running: &mut rs,
                momentum: 0.9,
            },
            1e-5,
        )
        .unwrap();
        assert!(y.all_finite());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_only_move_in_train_mode() {
        let x = Tensor::from_fn(&[2, 1, 4], |i| i as f64);
        let mut rs = RunningStats::new(1);
        let g = Tensor::ones(&[1]);
        let b = Tensor::zeros(&[1]);
        batchnorm(&x, &g, &b, NormMode::Eval { running: &rs }, 1e-5).unwrap();
        assert_eq!(rs, RunningStats::new(1));
        batchnorm(
            &x,
            &g,
            &b,
            NormMode::Train {
                running: &mut rs,
                momentum: 0.9,
            },
            1e-5,
        )
        .unwrap();
        assert!((rs.mean[0] - 0.1 * 3.5).abs() < 1e-15);
    }

    #[test]
    fn dropout_identities() {
        let x = Tensor::from_fn(&[100], |i| i as f64 - 50.0);
        assert_eq!(dropout(&x, 0.15, DropoutMode::Eval).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, DropoutMode::Train { seed: 3 }).unwrap(), x);
        assert!(dropout(&x, 1.0, DropoutMode::Eval).is_err());
    }

    #[test]
    fn dropout_deterministic_under_seed() {
        let x = Tensor::ones(&[1000]);
        let a = dropout(&x, 0.15, DropoutMode::Train { seed: 9 }).unwrap();
        let b = dropout(&x, 0.15, DropoutMode::Train { seed: 9 }).unwrap();
        let c = dropout(&x, 0.15, DropoutMode::Train { seed: 10 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dropout_monte_carlo() {
        let n = 1_000_000;
        let x = Tensor::ones(&[n]);
        let y = dropout(&x, 0.15, DropoutMode::Train { seed: 2024 }).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        let mean = y.sum() / n as f64;
        assert!((zeros - 0.15).abs() < 0.01, "zero fraction {zeros}");
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn concat_shapes_and_slices_back() {
        let a = Tensor::from_fn(&[4, 4, 3], |i| i as f64);
        let b = Tensor::from_fn(&[4, 4, 5], |i| -(i as f64));
        let c = concat_channels(&a, &b, 2).unwrap();
        assert_eq!(c.shape(), &[4, 4, 8]);
        assert_eq!(slice_axis(&c, 2, 0, 3).unwrap(), a);
        assert_eq!(slice_axis(&c, 2, 3, 5).unwrap(), b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[4, 4, 3]);
        let b = Tensor::zeros(&[4, 5, 3]);
        let err = concat_channels(&a, &b, 2).unwrap_err();
        assert!(err.to_string().contains("axis 1"));
    }
}
