//! Forecast verification: contingency scores, fractions skill score,
//! class-distribution diagnostics, lag autocorrelation and MRMR feature
//! scoring. Events are `value ≥ r`. Ratios with a zero denominator are
//! `None`, never zero.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::losses::ClassScheme;

fn check_pair(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CoreError::invalid(what, format!("fields have {a} and {b} pixels")));
    }
    Ok(())
}

fn check_mask(what: &'static str, mask: Option<&[bool]>, n: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != n => Err(CoreError::invalid(what, format!("mask has {} entries for {n} pixels", m.len()))),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Contingency counts of `value ≥ r` over pixels with `mask[i]` true.
pub fn confusion(pred: &[f64], obs: &[f64], r: f64, mask: Option<&[bool]>) -> Result<ConfusionCounts> {
    check_pair("confusion", pred.len(), obs.len())?;
    check_mask("confusion", mask, pred.len())?;
    if !(r > 0.0) {
        return Err(CoreError::invalid("confusion", format!("threshold {r} must be positive")));
    }
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        match (pred[i] >= r, obs[i] >= r) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    if c.total() == 0 {
        return Err(CoreError::invalid("confusion", "mask leaves no pixels to score"));
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub csi: Option<f64>,
    pub hss: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

pub fn categorical_scores(c: &ConfusionCounts) -> CategoricalScores {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    CategoricalScores {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        csi: ratio(tp, tp + fn_ + fp),
        hss: ratio(2.0 * (tp * tn - fp * fn_), (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn)),
    }
}

/// Integer sums over windows of event counts `c_f`, `c_o`:
/// `Σ(c_f − c_o)²`, `Σc_f²`, `Σc_o²`. The window area cancels in the score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FssSums {
    pub diff: u64,
    pub pred: u64,
    pub obs: u64,
}

impl FssSums {
    pub fn score(&self) -> Option<f64> {
        let den = self.pred + self.obs;
        (den != 0).then(|| 1.0 - self.diff as f64 / den as f64)
    }
}

impl Add for FssSums {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        FssSums {
            diff: self.diff + o.diff,
            pred: self.pred + o.pred,
            obs: self.obs + o.obs,
        }
    }
}

fn integral(field: &[f64], rows: usize, cols: usize, r: f64, mask: Option<&[bool]>) -> Vec<u64> {
    let w = cols + 1;
    let mut s = vec![0u64; (rows + 1) * w];
    for i in 0..rows {
        let mut run = 0u64;
        for j in 0..cols {
            let k = i * cols + j;
            if field[k] >= r && mask.is_none_or(|m| m[k]) {
                run += 1;
            }
            s[(i + 1) * w + j + 1] = s[i * w + j + 1] + run;
        }
    }
    s
}

/// Window sums over every `scale × scale` window lying inside the domain.
/// Masked pixels count as non-events in both fields.
pub fn fss_sums(pred: &[f64], obs: &[f64], rows: usize, cols: usize, r: f64, scale: usize, mask: Option<&[bool]>) -> Result<FssSums> {
    check_pair("fss", pred.len(), obs.len())?;
    check_pair("fss", pred.len(), rows * cols)?;
    check_mask("fss", mask, pred.len())?;
    if scale == 0 || scale > rows || scale > cols {
        return Err(CoreError::invalid(
            "fss",
            format!("scale {scale} must lie in 1..={}", rows.min(cols)),
        ));
    }
    let (ip, io) = (integral(pred, rows, cols, r, mask), integral(obs, rows, cols, r, mask));
    let w = cols + 1;
    let count =
        |s: &[u64], i: usize, j: usize| s[(i + scale) * w + j + scale] + s[i * w + j] - s[i * w + j + scale] - s[(i + scale) * w + j];
    let mut out = FssSums::default();
    for i in 0..=rows - scale {
        for j in 0..=cols - scale {
            let (f, o) = (count(&ip, i, j), count(&io, i, j));
            out.diff += f.abs_diff(o).pow(2);
            out.pred += f * f;
            out.obs += o * o;
        }
    }
    Ok(out)
}

/// `1 − Σ(S_f − S_o)² / (ΣS_f² + ΣS_o²)`; `None` when neither field has an event.
pub fn fss(pred: &[f64], obs: &[f64], rows: usize, cols: usize, r: f64, scale: usize) -> Result<Option<f64>> {
    Ok(fss_sums(pred, obs, rows, cols, r, scale, None)?.score())
}

/// First Wasserstein distance between two class distributions with unit
/// spacing between adjacent classes.
pub fn wasserstein_1d(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair("wasserstein", p.len(), q.len())?;
    for (name, d) in [("first", p), ("second", q)] {
        if d.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(CoreError::invalid(
                "wasserstein",
                format!("{name} distribution has a negative or non-finite mass"),
            ));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(CoreError::invalid("wasserstein", format!("{name} distribution sums to {s}, not 1")));
        }
    }
    let (mut cp, mut cq, mut w) = (0.0, 0.0, 0.0);
    for i in 0..p.len().saturating_sub(1) {
        cp += p[i];
        cq += q[i];
        w += (cp - cq).abs();
    }
    Ok(w)
}

/// Joint class counts, `counts[(obs − 1)·C + (pred − 1)]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointHistogram {
    pub n_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub conditional_bias: Option<f64>,
    pub delta_sigma: Option<f64>,
    pub wasserstein: Option<f64>,
    /// Pixels with observed class ≥ 2.
    pub precipitating: u64,
}

impl JointHistogram {
    pub fn new(n_classes: usize) -> Self {
        JointHistogram {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn get(&self, obs: usize, pred: usize) -> u64 {
        self.counts[(obs - 1) * self.n_classes + pred - 1]
    }

    pub fn add(&mut self, obs: usize, pred: usize) {
        self.counts[(obs - 1) * self.n_classes + pred - 1] += 1;
    }

    pub fn merge(&mut self, other: &JointHistogram) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(CoreError::invalid("joint histogram", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn obs_marginal(&self) -> Vec<u64> {
        (1..=self.n_classes)
            .map(|o| (1..=self.n_classes).map(|p| self.get(o, p)).sum())
            .collect()
    }

    pub fn pred_marginal(&self) -> Vec<u64> {
        (1..=self.n_classes)
            .map(|p| (1..=self.n_classes).map(|o| self.get(o, p)).sum())
            .collect()
    }

    /// Conditional bias and `σ(pred) − σ(obs)` of representative rates over
    /// pixels observed at class ≥ 2, and W₁ between the marginals.
    pub fn summary(&self, scheme: &ClassScheme) -> Result<JointSummary> {
        if scheme.n_classes() != self.n_classes {
            return Err(CoreError::invalid("joint histogram", "scheme does not match the table"));
        }
        let rep: Vec<f64> = (1..=self.n_classes).map(|c| scheme.representative_rate(c)).collect();
        let (mut n, mut sp, mut so, mut spp, mut soo, mut sd) = (0u64, 0.0, 0.0, 0.0, 0.0, 0.0);
        for o in 2..=self.n_classes {
            for p in 1..=self.n_classes {
                let k = self.get(o, p);
                if k == 0 {
                    continue;
                }
                let kf = k as f64;
                let (rp, ro) = (rep[p - 1], rep[o - 1]);
                n += k;
                sd += kf * (rp - ro);
                sp += kf * rp;
                so += kf * ro;
                spp += kf * rp * rp;
                soo += kf * ro * ro;
            }
        }
        let (conditional_bias, delta_sigma) = if n == 0 {
            (None, None)
        } else {
            let nf = n as f64;
            let sd_of = |s: f64, ss: f64| (ss / nf - (s / nf).powi(2)).max(0.0).sqrt();
            (Some(sd / nf), Some(sd_of(sp, spp) - sd_of(so, soo)))
        };
        let total: u64 = self.counts.iter().sum();
        let wasserstein = if total == 0 {
            None
        } else {
            let norm = |m: Vec<u64>| m.into_iter().map(|c| c as f64 / total as f64).collect::<Vec<_>>();
            Some(wasserstein_1d(&norm(self.pred_marginal()), &norm(self.obs_marginal()))?)
        };
        Ok(JointSummary {
            conditional_bias,
            delta_sigma,
            wasserstein,
            precipitating: n,
        })
    }
}

/// Joint table of 1-based class fields; `None` entries are skipped.
pub fn joint_histogram(pred: &[Option<usize>], obs: &[Option<usize>], scheme: &ClassScheme) -> Result<JointHistogram> {
    check_pair("joint histogram", pred.len(), obs.len())?;
    let c = scheme.n_classes();
    let mut h = JointHistogram::new(c);
    for (p, o) in pred.iter().zip(obs) {
        if let (Some(p), Some(o)) = (*p, *o) {
            if p == 0 || o == 0 || p > c || o > c {
                return Err(CoreError::invalid(
                    "joint histogram",
                    format!("class pair ({o}, {p}) outside 1..={c}"),
                ));
            }
            h.add(o, p);
        }
    }
    Ok(h)
}

pub const DEFAULT_BINS: usize = 16;
pub const MIN_MI_SAMPLES: usize = 10;

fn bin_indices(x: &[f64], bins: usize) -> Result<(Vec<usize>, bool)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in x {
        if !v.is_finite() {
            return Err(CoreError::invalid("mutual information", "samples must be finite"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return Ok((vec![0; x.len()], true));
    }
    let w = (hi - lo) / bins as f64;
    Ok((x.iter().map(|&v| (((v - lo) / w) as usize).min(bins - 1)).collect(), false))
}

fn mi_from_bins(bx: &[usize], by: &[usize], bins: usize) -> f64 {
    let n = bx.len() as f64;
    let mut joint = vec![0u64; bins * bins];
    let (mut mx, mut my) = (vec![0u64; bins], vec![0u64; bins]);
    for (&i, &j) in bx.iter().zip(by) {
        joint[i * bins + j] += 1;
        mx[i] += 1;
        my[j] += 1;
    }
    // Sorted summation makes the estimate exactly symmetric in x and y.
    let mut terms: Vec<f64> = Vec::new();
    for i in 0..bins {
        for j in 0..bins {
            let k = joint[i * bins + j];
            if k > 0 {
                let kf = k as f64;
                terms.push(kf / n * (kf * n / (mx[i] as f64 * my[j] as f64)).ln());
            }
        }
    }
    // Miller–Madow correction: (B_x + B_y − B_xy − 1) / 2n over occupied bins.
    let occupied = |h: &[u64]| h.iter().filter(|&&k| k > 0).count() as f64;
    terms.push((occupied(&mx) + occupied(&my) - terms.len() as f64 - 1.0) / (2.0 * n));
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().max(0.0)
}

/// Bias-corrected histogram mutual information (nats) from an equal-width
/// `bins × bins` histogram over each variable's min–max range, clipped at
/// zero.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    check_pair("mutual information", x.len(), y.len())?;
    if bins < 2 {
        return Err(CoreError::invalid("mutual information", "need at least 2 bins"));
    }
    if x.len() < MIN_MI_SAMPLES {
        return Err(CoreError::invalid(
            "mutual information",
            format!("{} samples, at least {MIN_MI_SAMPLES} required", x.len()),
        ));
    }
    let (bx, _) = bin_indices(x, bins)?;
    let (by, _) = bin_indices(y, bins)?;
    Ok(mi_from_bins(&bx, &by, bins))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MrmrForm {
    /// Relevance divided by mean redundancy plus a resolution floor.
    #[default]
    Quotient,
    /// Relevance minus mean redundancy.
    Difference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MrmrResult {
    pub form: MrmrForm,
    pub names: Vec<String>,
    pub relevance: Vec<f64>,
    /// Pairwise feature mutual information, symmetric.
    pub redundancy: Vec<Vec<f64>>,
    /// Selection criterion of each feature at the step it was selected; the
    /// first pick scores its relevance.
    pub scores: Vec<f64>,
    /// Feature indices in selection order; constant features are excluded.
    pub order: Vec<usize>,
    /// Features with zero variance.
    pub constant: Vec<bool>,
}

impl MrmrResult {
    pub fn rank_of(&self, name: &str) -> Option<usize> {
        let idx = self.names.iter().position(|n| n == name)?;
        self.order.iter().position(|&i| i == idx)
    }

    pub fn score_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.scores[i])
    }
}

/// Greedy forward selection maximizing relevance against mean redundancy
/// with the features already selected. The quotient denominator is offset by
/// the histogram resolution `(bins − 1)² / 2n`; ties fall to the lower index.
pub fn mrmr_scores(features: &[(String, Vec<f64>)], response: &[f64], bins: usize, form: MrmrForm) -> Result<MrmrResult> {
    if features.len() < 2 {
        return Err(CoreError::invalid("mrmr", "need at least 2 features"));
    }
    if bins < 2 {
        return Err(CoreError::invalid("mrmr", "need at least 2 bins"));
    }
    if response.len() < MIN_MI_SAMPLES {
        return Err(CoreError::invalid(
            "mrmr",
            format!("{} samples, at least {MIN_MI_SAMPLES} required", response.len()),
        ));
    }
    for (name, x) in features {
        if x.len() != response.len() {
            return Err(CoreError::invalid(
                "mrmr",
                format!("feature {name} has {} samples, response has {}", x.len(), response.len()),
            ));
        }
    }
    let (by, _) = bin_indices(response, bins)?;
    let mut binned = Vec::with_capacity(features.len());
    let mut constant = Vec::with_capacity(features.len());
    for (_, x) in features {
        let (b, c) = bin_indices(x, bins)?;
        binned.push(b);
        constant.push(c);
    }
    let f = features.len();
    let relevance: Vec<f64> = binned.iter().map(|b| mi_from_bins(b, &by, bins)).collect();
    let mut redundancy = vec![vec![0.0; f]; f];
    for i in 0..f {
        for j in i + 1..f {
            let v = mi_from_bins(&binned[i], &binned[j], bins);
            redundancy[i][j] = v;
            redundancy[j][i] = v;
        }
    }
    // Histogram resolution: redundancies below it are not distinguishable.
    let floor = ((bins - 1) * (bins - 1)) as f64 / (2.0 * response.len() as f64);
    let mut scores = vec![0.0; f];
    let mut order: Vec<usize> = Vec::new();
    let mut remaining: Vec<usize> = (0..f).filter(|&i| !constant[i]).collect();
    while !remaining.is_empty() {
        let criterion = |j: usize| -> f64 {
            if order.is_empty() {
                return relevance[j];
            }
            let red = order.iter().map(|&s| redundancy[j][s]).sum::<f64>() / order.len() as f64;
            match form {
                MrmrForm::Difference => relevance[j] - red,
                MrmrForm::Quotient => relevance[j] / (red + floor),
            }
        };
        let (pos, best) = remaining
            .iter()
            .enumerate()
            .map(|(p, &j)| (p, criterion(j)))
            .fold((0, f64::NEG_INFINITY), |acc, (p, v)| if v > acc.1 { (p, v) } else { acc });
        let j = remaining.remove(pos);
        scores[j] = best;
        order.push(j);
    }
    Ok(MrmrResult {
        form,
        names: features.iter().map(|(n, _)| n.clone()).collect(),
        relevance,
        redundancy,
        scores,
        order,
        constant,
    })
}

/// Autocorrelation analysis settings. Lags are in steps of `step_hours`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutocorrOptions {
    pub step_hours: f64,
    pub max_lag: usize,
    pub samples: usize,
    /// The decay fit uses lags up to the first median correlation at or
    /// below this value.
    pub min_correlation: f64,
    pub seed: u64,
}

impl Default for AutocorrOptions {
    fn default() -> Self {
        AutocorrOptions {
            step_hours: 0.5,
            max_lag: 48,
            samples: 32,
            min_correlation: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagStats {
    pub lag: usize,
    pub hours: f64,
    pub samples: usize,
    pub median: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutocorrResult {
    pub lags: Vec<LagStats>,
    /// Decay rate per hour.
    pub alpha: f64,
    /// Correlation length `1/α` in hours.
    pub tau: f64,
    pub fitted_lags: usize,
}

/// Pearson correlation over pixels valid in both; `None` if either side is
/// constant or fewer than two pixels remain.
pub fn pearson(a: &[f64], b: &[f64], mask: Option<&[bool]>) -> Option<f64> {
    let idx = (0..a.len()).filter(|&i| mask.is_none_or(|m| m[i]));
    let (mut n, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for i in idx.clone() {
        n += 1.0;
        sa += a[i];
        sb += b[i];
    }
    if n < 2.0 {
        return None;
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut cab, mut caa, mut cbb) = (0.0, 0.0, 0.0);
    for i in idx {
        let (da, db) = (a[i] - ma, b[i] - mb);
        cab += da * db;
        caa += da * da;
        cbb += db * db;
    }
    (caa > 0.0 && cbb > 0.0).then(|| cab / (caa * cbb).sqrt())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-lag correlation distribution over randomly drawn frame pairs of a
/// sequence, then a least-squares fit `ln ρ = c − α·τ` on the median.
/// `masks[k]`, if given, marks valid pixels of frame `k`.
pub fn autocorr_fit(frames: &[Vec<f64>], masks: Option<&[Vec<bool>]>, opts: &AutocorrOptions) -> Result<AutocorrResult> {
    if frames.len() < 2 {
        return Err(CoreError::invalid("autocorrelation", "need at least 2 frames"));
    }
    let n = frames[0].len();
    if frames.iter().any(|f| f.len() != n) || masks.is_some_and(|m| m.len() != frames.len() || m.iter().any(|x| x.len() != n)) {
        return Err(CoreError::invalid("autocorrelation", "frames and masks must share one size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut lags = Vec::new();
    let mut both = vec![true; n];
    for lag in 0..=opts.max_lag.min(frames.len() - 1) {
        let mut rs = Vec::with_capacity(opts.samples);
        for _ in 0..opts.samples {
            let t = rng.random_range(0..frames.len() - lag);
            let mask = masks.map(|m| {
                for i in 0..n {
                    both[i] = m[t][i] && m[t + lag][i];
                }
                both.as_slice()
            });
            if let Some(r) = pearson(&frames[t], &frames[t + lag], mask) {
                rs.push(r);
            }
        }
        rs.sort_by(f64::total_cmp);
        let enough = rs.len() >= 2;
        lags.push(LagStats {
            lag,
            hours: lag as f64 * opts.step_hours,
            samples: rs.len(),
            median: enough.then(|| quantile(&rs, 0.5)),
            lower: enough.then(|| quantile(&rs, 0.025)),
            upper: enough.then(|| quantile(&rs, 0.975)),
        });
    }
    let mut pts = Vec::new();
    for l in &lags {
        match l.median {
            Some(m) if m > opts.min_correlation => pts.push((l.hours, m.ln())),
            Some(_) => break,
            None => continue,
        }
    }
    if pts.len() < 2 {
        return Err(CoreError::invalid(
            "autocorrelation",
            "fewer than 2 lags with positive median correlation",
        ));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let alpha = -sxy / sxx;
    Ok(AutocorrResult {
        lags,
        alpha,
        tau: 1.0 / alpha,
        fitted_lags: pts.len(),
    })
}

pub const SCHEMA_VERSION: u32 = 1;

/// Integer sufficient statistics for one lead time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadAccumulator {
    pub fields: u64,
    /// One per threshold.
    pub confusion: Vec<ConfusionCounts>,
    /// `[scale][threshold]`.
    pub fss: Vec<Vec<FssSums>>,
    pub joint: JointHistogram,
}

/// Commutative, associative accumulator of verification statistics; every
/// score in the report derives from its integer counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreAccumulator {
    pub thresholds: Vec<f64>,
    pub scales: Vec<usize>,
    pub scheme: ClassScheme,
    pub leads: Vec<LeadAccumulator>,
}

impl ScoreAccumulator {
    pub fn new(thresholds: &[f64], scales: &[usize], leads: usize, scheme: &ClassScheme) -> Result<Self> {
        if thresholds.iter().any(|&r| !(r > 0.0)) {
            return Err(CoreError::invalid("scores", "thresholds must be positive"));
        }
        if scales.contains(&0) {
            return Err(CoreError::invalid("scores", "scales must be at least 1"));
        }
        let lead = LeadAccumulator {
            fields: 0,
            confusion: vec![ConfusionCounts::default(); thresholds.len()],
            fss: vec![vec![FssSums::default(); thresholds.len()]; scales.len()],
            joint: JointHistogram::new(scheme.n_classes()),
        };
        Ok(ScoreAccumulator {
            thresholds: thresholds.to_vec(),
            scales: scales.to_vec(),
            scheme: scheme.clone(),
            leads: vec![lead; leads],
        })
    }

    /// Adds one forecast/observation pair at `lead` (0-based).
    pub fn add_field(&mut self, lead: usize, pred: &[f64], obs: &[f64], rows: usize, cols: usize, mask: Option<&[bool]>) -> Result<()> {
        if lead >= self.leads.len() {
            return Err(CoreError::invalid("scores", format!("lead {lead} outside 0..{}", self.leads.len())));
        }
        check_pair("scores", pred.len(), obs.len())?;
        check_pair("scores", pred.len(), rows * cols)?;
        check_mask("scores", mask, pred.len())?;
        let acc = &mut self.leads[lead];
        for (t, &r) in self.thresholds.iter().enumerate() {
            acc.confusion[t] += confusion(pred, obs, r, mask)?;
            for (s, &scale) in self.scales.iter().enumerate() {
                if scale <= rows.min(cols) {
                    acc.fss[s][t] = acc.fss[s][t] + fss_sums(pred, obs, rows, cols, r, scale, mask)?;
                }
            }
        }
        for i in 0..pred.len() {
            if mask.is_none_or(|m| m[i]) {
                acc.joint
                    .add(self.scheme.class_of(obs[i].max(0.0)), self.scheme.class_of(pred[i].max(0.0)));
            }
        }
        acc.fields += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ScoreAccumulator) -> Result<()> {
        if other.thresholds != self.thresholds
            || other.scales != self.scales
            || other.scheme != self.scheme
            || other.leads.len() != self.leads.len()
        {
            return Err(CoreError::invalid("scores", "cannot merge accumulators with different layouts"));
        }
        for (a, b) in self.leads.iter_mut().zip(&other.leads) {
            a.fields += b.fields;
            for (x, y) in a.confusion.iter_mut().zip(&b.confusion) {
                *x += *y;
            }
            for (xs, ys) in a.fss.iter_mut().zip(&b.fss) {
                for (x, y) in xs.iter_mut().zip(ys) {
                    *x = *x + *y;
                }
            }
            a.joint.merge(&b.joint)?;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<ScoreReport> {
        let mut leads = Vec::with_capacity(self.leads.len());
        for (k, acc) in self.leads.iter().enumerate() {
            let thresholds = self
                .thresholds
                .iter()
                .zip(&acc.confusion)
                .map(|(&threshold, c)| ThresholdScores {
                    threshold,
                    counts: *c,
                    scores: categorical_scores(c),
                })
                .collect();
            let mut fss = Vec::new();
            for (s, &scale) in self.scales.iter().enumerate() {
                for (t, &threshold) in self.thresholds.iter().enumerate() {
                    fss.push(FssEntry {
                        scale,
                        threshold,
                        fss: acc.fss[s][t].score(),
                    });
                }
            }
            let summary = acc.joint.summary(&self.scheme)?;
            leads.push(LeadScores {
                lead: k + 1,
                fields: acc.fields,
                pixels: acc.joint.counts.iter().sum(),
                thresholds,
                fss,
                wasserstein: summary.wasserstein,
                conditional_bias: summary.conditional_bias,
                delta_sigma: summary.delta_sigma,
            });
        }
        Ok(ScoreReport {
            schema_version: SCHEMA_VERSION,
            leads,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub scores: CategoricalScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FssEntry {
    pub scale: usize,
    pub threshold: f64,
    pub fss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadScores {
    /// 1-based lead step.
    pub lead: usize,
    pub fields: u64,
    pub pixels: u64,
    pub thresholds: Vec<ThresholdScores>,
    pub fss: Vec<FssEntry>,
    pub wasserstein: Option<f64>,
    pub conditional_bias: Option<f64>,
    pub delta_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub leads: Vec<LeadScores>,
}

impl ScoreReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ScoreReport = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(CoreError::invalid(
                "score report",
                format!("schema version {} is not {SCHEMA_VERSION}", r.schema_version),
            ));
        }
        Ok(r)
    }

    /// Flat rows `schema_version,lead,metric,threshold,scale,value`; absent
    /// scores leave `value` empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,lead,metric,threshold,scale,value\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = |lead: usize, metric: &str, threshold: Option<f64>, scale: Option<usize>, value: String| {
            out.push_str(&format!(
                "{SCHEMA_VERSION},{lead},{metric},{},{},{value}\n",
                fmt(threshold),
                scale.map(|s| s.to_string()).unwrap_or_default()
            ));
        };
        for l in &self.leads {
            for t in &l.thresholds {
                let s = &t.scores;
                for (name, v) in [("precision", s.precision), ("recall", s.recall), ("csi", s.csi), ("hss", s.hss)] {
                    row(l.lead, name, Some(t.threshold), None, fmt(v));
                }
            }
            for f in &l.fss {
                row(l.lead, "fss", Some(f.threshold), Some(f.scale), fmt(f.fss));
            }
            row(l.lead, "wasserstein", None, None, fmt(l.wasserstein));
            row(l.lead, "conditional_bias", None, None, fmt(l.conditional_bias));
            row(l.lead, "delta_sigma", None, None, fmt(l.delta_sigma));
        }
        out
    }

    pub fn csi(&self, lead: usize, threshold: f64) -> Option<f64> {
        let l = self.leads.iter().find(|l| l.lead == lead)?;
        l.thresholds.iter().find(|t| t.threshold == threshold)?.scores.csi
    }
}

/// Per-name report collection, e.g. a model and its baselines.
pub type NamedReports = BTreeMap<String, ScoreReport>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion() {
        let pred = [5.0, 5.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let obs = [5.0, 5.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let c = confusion(&pred, &obs, 1.0, None).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 5));
        assert!(confusion(&pred, &obs, 1.0, Some(&[false; 9])).is_err());
    }

    #[test]
    fn hss_hand_value() {
        let s = categorical_scores(&ConfusionCounts {
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 2,
        });
        assert!((s.hss.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.csi, Some(0.5));
        let empty = categorical_scores(&ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 4,
        });
        assert_eq!((empty.precision, empty.csi, empty.hss), (None, None, None));
    }

    #[test]
    fn fss_single_window_hand_value() {
        let pred = [1.0, 1.0, 0.0, 0.0];
        let obs = [1.0, 0.0, 0.0, 0.0];
        let v = fss(&pred, &obs, 2, 2, 0.5, 2).unwrap().unwrap();
        assert!((v - 0.8).abs() < 1e-15);
        assert_eq!(fss(&[0.0; 4], &[0.0; 4], 2, 2, 0.5, 1).unwrap(), None);
    }

    #[test]
    fn wasserstein_unit_masses() {
        let w = wasserstein_1d(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(w, 2.0);
        assert!(wasserstein_1d(&[0.5, 0.4], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn pearson_rejects_constant() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], None), None);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], None).unwrap() - 1.0).abs() < 1e-15);
    }
}
