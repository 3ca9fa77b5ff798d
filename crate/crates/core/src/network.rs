//! ConvLSTM U-Net with recursive forecasters on every skip connection and at
//! the bottleneck.
//!
//! Batches are channels-first: inputs `[B, C, T, M, N]` where time slice `n`
//! holds the frame `n` steps before the anchor (so slice 0 is the most recent
//! observation). The encoder consumes slices oldest first.

use std::collections::BTreeMap;

use nowcast_tensor::{xavier_uniform_with_fans, DropoutMode, Graph, NormMode, Padding, RunningStats, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::convlstm::{self, CellVars, ConvLstmCell};
use crate::error::{CoreError, Result};
use crate::losses::ClassScheme;
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub n_blocks: usize,
    pub base_channels: usize,
    pub input_channels: usize,
    pub input_steps: usize,
    pub forecast_steps: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub head: HeadKind,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Per-channel affine normalization applied to raw inputs.
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_blocks: 3,
            base_channels: 16,
            input_channels: 4,
            input_steps: 12,
            forecast_steps: 8,
            n_classes: 10,
            dropout: 0.15,
            head: HeadKind::Regression,
            bn_momentum: 0.9,
            bn_eps: 1e-3,
            channel_mean: vec![0.0; 4],
            channel_std: vec![1.0; 4],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(CoreError::invalid("network config", r));
        if self.n_blocks == 0 || self.base_channels == 0 || self.input_channels == 0 {
            return bad("n_blocks, base_channels and input_channels must be positive".into());
        }
        if self.input_steps == 0 || self.forecast_steps == 0 {
            return bad("input and forecast steps must be positive".into());
        }
        if self.head == HeadKind::Classification && self.n_classes < 2 {
            return bad("classification needs at least two classes".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be > 0 and bn_momentum in [0, 1)".into());
        }
        if self.channel_mean.len() != self.input_channels || self.channel_std.len() != self.input_channels {
            return bad(format!("channel_mean/channel_std need {} entries", self.input_channels));
        }
        if self.channel_std.iter().any(|s| !(*s > 0.0)) {
            return bad("channel_std entries must be positive".into());
        }
        Ok(())
    }

    /// Channels of encoder level `k` (1-based): `base · 2^(k−1)`.
    pub fn channels(&self, k: usize) -> usize {
        self.base_channels << (k - 1)
    }

    pub fn head_channels(&self) -> usize {
        match self.head {
            HeadKind::Regression => 1,
            HeadKind::Classification => self.n_classes,
        }
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.n_blocks
    }

    /// Shape of the network output for a `[B, C, T, M, N]` input.
    pub fn output_shape(&self, batch: usize, m: usize, n: usize) -> Vec<usize> {
        match self.head {
            HeadKind::Regression => vec![batch, self.forecast_steps, m, n],
            HeadKind::Classification => vec![batch, self.n_classes, self.forecast_steps, m, n],
        }
    }
}

/// All learnable tensors by name, plus batchnorm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub params: BTreeMap<String, Tensor>,
    pub stats: BTreeMap<String, RunningStats>,
}

/// Dropout behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and seeded dropout.
    Train { seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

/// A forward pass recorded on a graph.
pub struct Forward {
    pub output: Var,
    pub vars: BTreeMap<String, Var>,
    /// Running statistics after this pass (unchanged in eval mode).
    pub stats: BTreeMap<String, RunningStats>,
}

fn lstm_names(prefix: &str) -> [String; 3] {
    [format!("{prefix}.lstm.wx"), format!("{prefix}.lstm.wh"), format!("{prefix}.lstm.b")]
}

/// Builds a network with Xavier-initialized kernels, zero biases, unit
/// batchnorm scales and zero shifts. Equal config and seed give equal params.
pub fn build(config: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut params = BTreeMap::new();
    let mut stats = BTreeMap::new();
    let mut tag = 0u64;
    let mut next_seed = || {
        tag += 1;
        derive_seed(seed, tag)
    };
    let add_cell = |params: &mut BTreeMap<String, Tensor>, prefix: &str, cin: usize, hidden: usize, s: u64| {
        let cell = ConvLstmCell::init(cin, hidden, s);
        let [wx, wh, b] = lstm_names(prefix);
        params.insert(wx, cell.w_x);
        params.insert(wh, cell.w_h);
        params.insert(b, cell.bias);
    };
    let add_bn = |params: &mut BTreeMap<String, Tensor>, stats: &mut BTreeMap<String, RunningStats>, prefix: &str, ch: usize| {
        params.insert(format!("{prefix}.bn.gamma"), Tensor::ones(&[ch]));
        params.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[ch]));
        stats.insert(format!("{prefix}.bn"), RunningStats::new(ch));
    };
    let n = config.n_blocks;
    for k in 1..=n {
        let ch = config.channels(k);
        let cin = if k == 1 { config.input_channels } else { config.channels(k - 1) };
        add_cell(&mut params, &format!("enc{k}"), cin, ch, next_seed());
        add_bn(&mut params, &mut stats, &format!("enc{k}"), ch);
        add_cell(&mut params, &format!("skip{k}"), ch, ch, next_seed());
    }
    add_cell(&mut params, "bottleneck", config.channels(n), config.channels(n), next_seed());
    for k in (1..=n).rev() {
        let ch = config.channels(k);
        let ch_in = if k == n { config.channels(n) } else { config.channels(k + 1) };
        let up = xavier_uniform_with_fans(&[ch_in, ch, 1, 2, 2], ch_in * 4, ch * 4, next_seed());
        params.insert(format!("dec{k}.up.w"), up);
        params.insert(format!("dec{k}.up.b"), Tensor::zeros(&[ch]));
        let conv = xavier_uniform_with_fans(&[ch, 2 * ch, 3, 3, 3], 2 * ch * 27, ch * 27, next_seed());
        params.insert(format!("dec{k}.conv.w"), conv);
        add_bn(&mut params, &mut stats, &format!("dec{k}"), ch);
    }
    let kh = config.head_channels();
    let ch1 = config.channels(1);
    params.insert(
        "head.conv.w".into(),
        xavier_uniform_with_fans(&[kh, ch1, 1, 1, 1], ch1, kh, next_seed()),
    );
    add_bn(&mut params, &mut stats, "head", kh);
    Ok(NetworkParams {
        config: config.clone(),
        params,
        stats,
    })
}

/// Number of learnable scalars implied by a config.
pub fn parameter_count(config: &NetworkConfig) -> usize {
    let n = config.n_blocks;
    let lstm = |cin: usize, h: usize| 4 * h * cin * 9 + 4 * h * h * 9 + 4 * h;
    let mut total = 0;
    for k in 1..=n {
        let ch = config.channels(k);
        let cin = if k == 1 { config.input_channels } else { config.channels(k - 1) };
        total += lstm(cin, ch) + 2 * ch + lstm(ch, ch);
        let ch_in = if k == n { ch } else { config.channels(k + 1) };
        total += ch_in * ch * 4 + ch + 2 * ch * ch * 27 + 2 * ch;
    }
    total += lstm(config.channels(n), config.channels(n));
    let kh = config.head_channels();
    total + kh * config.channels(1) + 2 * kh
}

struct Ctx<'a> {
    g: &'a mut Graph,
    cfg: &'a NetworkConfig,
    vars: &'a BTreeMap<String, Var>,
    stats: BTreeMap<String, RunningStats>,
    mode: Mode,
    dropout_layer: u64,
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from a validated network"))
    }

    fn cell(&self, prefix: &str) -> CellVars {
        let [wx, wh, b] = lstm_names(prefix);
        CellVars {
            w_x: self.var(&wx),
            w_h: self.var(&wh),
            bias: self.var(&b),
        }
    }

    fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.bn.gamma"));
        let beta = self.var(&format!("{prefix}.bn.beta"));
        let key = format!("{prefix}.bn");
        let running = self
            .stats
            .get_mut(&key)
            .ok_or_else(|| CoreError::invalid("network", format!("running statistics {key} missing")))?;
        let mode = match self.mode {
            Mode::Train { .. } => NormMode::Train {
                running,
                momentum: self.cfg.bn_momentum,
            },
            Mode::Eval => NormMode::Eval { running },
        };
        Ok(self.g.batchnorm(x, gamma, beta, mode, self.cfg.bn_eps)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        self.dropout_layer += 1;
        let mode = match self.mode {
            Mode::Train { seed } => DropoutMode::Train {
                seed: derive_seed(seed, self.dropout_layer),
            },
            Mode::Eval => DropoutMode::Eval,
        };
        Ok(self.g.dropout(x, self.cfg.dropout, mode)?)
    }
}

impl NetworkParams {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that every expected tensor is present with the expected shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = build(&self.config, 0)?;
        for (name, t) in &reference.params {
            match self.params.get(name) {
                None => return Err(CoreError::invalid("network params", format!("missing tensor {name}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(CoreError::invalid(
                        "network params",
                        format!("tensor {name} has shape {:?}, expected {:?}", p.shape(), t.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(CoreError::invalid("network params", format!("unexpected tensor {extra}")));
        }
        for (name, s) in &reference.stats {
            match self.stats.get(name) {
                Some(r) if r.mean.len() == s.mean.len() && r.var.len() == s.var.len() => {}
                _ => {
                    return Err(CoreError::invalid(
                        "network params",
                        format!("running statistics {name} missing or misshapen"),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Checks a raw `[B, C, T, M, N]` input against the config.
    pub fn check_input(&self, input: &Tensor) -> Result<()> {
        let c = &self.config;
        let s = input.shape();
        if s.len() != 5 || s[1] != c.input_channels || s[2] != c.input_steps {
            return Err(CoreError::invalid(
                "network input",
                format!("expected [B, {}, {}, M, N], got {s:?}", c.input_channels, c.input_steps),
            ));
        }
        let m = c.spatial_multiple();
        for (axis, &ext) in ["M", "N"].iter().zip(&s[3..]) {
            if ext % m != 0 {
                return Err(CoreError::invalid(
                    "network input",
                    format!("spatial axis {axis} extent {ext} is not divisible by 2^{} = {m}", c.n_blocks),
                ));
            }
        }
        Ok(())
    }

    /// Normalized per-step inputs `[B, C, M, N]`, oldest first.
    fn time_slices(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let c = &self.config;
        let s = input.shape();
        let (b, ch, t, plane) = (s[0], s[1], s[2], s[3] * s[4]);
        let mut out = Vec::with_capacity(t);
        for n in (0..t).rev() {
            let mut data = Vec::with_capacity(b * ch * plane);
            for bi in 0..b {
                for ci in 0..ch {
                    let start = ((bi * ch + ci) * t + n) * plane;
                    let (mu, sd) = (c.channel_mean[ci], c.channel_std[ci]);
                    data.extend(input.data()[start..start + plane].iter().map(|v| (v - mu) / sd));
                }
            }
            out.push(Tensor::new(vec![b, ch, s[3], s[4]], data)?);
        }
        Ok(out)
    }

    /// Records a forward pass of the raw input batch `[B, C, T, M, N]`.
    pub fn forward_on(&self, g: &mut Graph, input: &Tensor, mode: Mode) -> Result<Forward> {
        self.check_input(input)?;
        let cfg = &self.config;
        let vars: BTreeMap<String, Var> = self.params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        let slices = self.time_slices(input)?;
        let mut seq: Vec<Var> = slices.into_iter().map(|t| g.input(t)).collect();
        let mut ctx = Ctx {
            g,
            cfg,
            vars: &vars,
            stats: self.stats.clone(),
            mode,
            dropout_layer: 0,
        };
        let n = cfg.n_blocks;
        let tf = cfg.forecast_steps;

        let mut skip_contexts = Vec::with_capacity(n);
        for k in 1..=n {
            let cell = ctx.cell(&format!("enc{k}"));
            let enc = convlstm::encode_sequence(ctx.g, &seq, &cell)?;
            skip_contexts.push(enc.h);
            let stacked = ctx.g.stack(&enc.states, 2)?;
            let pooled = ctx.g.maxpool2d(stacked)?;
            let normed = ctx.batchnorm(pooled, &format!("enc{k}"))?;
            let dropped = ctx.dropout(normed)?;
            seq = ctx.g.unstack(dropped, 2)?;
        }

        let mut skip_forecasts = Vec::with_capacity(n);
        for (k, &z) in (1..=n).zip(&skip_contexts) {
            let cell = ctx.cell(&format!("skip{k}"));
            let rf = convlstm::recursive_forecast(ctx.g, z, &cell, tf)?;
            skip_forecasts.push(ctx.g.stack(&rf.outputs, 2)?);
        }
        let bottleneck = ctx.cell("bottleneck");
        let last = *seq.last().expect("input_steps > 0");
        let rf = convlstm::recursive_forecast(ctx.g, last, &bottleneck, tf)?;
        let mut d = ctx.g.stack(&rf.outputs, 2)?;

        for k in (1..=n).rev() {
            let up_w = ctx.var(&format!("dec{k}.up.w"));
            let up_b = ctx.var(&format!("dec{k}.up.b"));
            let up = ctx.g.conv_transpose(d, up_w, &[1, 2, 2], Padding::Same, 3)?;
            let up = ctx.g.bias_add(up, up_b)?;
            let joined = ctx.g.concat(&[up, skip_forecasts[k - 1]], 1)?;
            let conv_w = ctx.var(&format!("dec{k}.conv.w"));
            let conv = ctx.g.conv(joined, conv_w, &[1, 1, 1], Padding::Same, 3)?;
            let normed = ctx.batchnorm(conv, &format!("dec{k}"))?;
            d = ctx.dropout(normed)?;
        }

        let head_w = ctx.var("head.conv.w");
        let logits = ctx.g.conv(d, head_w, &[1, 1, 1], Padding::Same, 3)?;
        let normed = ctx.batchnorm(logits, "head")?;
        let output = match cfg.head {
            HeadKind::Regression => {
                let r = ctx.g.relu(normed);
                let s = ctx.g.shape(r).to_vec();
                ctx.g.reshape(r, &[s[0], s[2], s[3], s[4]])?
            }
            HeadKind::Classification => ctx.g.softmax(normed, 1)?,
        };
        let stats = ctx.stats;
        Ok(Forward { output, vars, stats })
    }

    /// Eval-mode forecast: `[B, T_f, M, N]` rates or `[B, classes, T_f, M, N]`
    /// probabilities.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward_on(&mut g, input, Mode::Eval)?;
        Ok(g.value(f.output).clone())
    }
}

/// Probability that the rate reaches boundary `r`: the mass of every class
/// whose lower edge is at or above `r`. Class axis is 1.
pub fn exceedance_probability(class_probs: &Tensor, scheme: &ClassScheme, r: f64) -> Result<Tensor> {
    let j = scheme
        .boundary_index(r)
        .ok_or_else(|| CoreError::invalid("exceedance", format!("threshold {r} is not a class boundary")))?;
    let s = class_probs.shape();
    if s.len() < 2 || s[1] != scheme.n_classes() {
        return Err(CoreError::invalid(
            "exceedance",
            format!("probabilities {s:?} need {} classes on axis 1", scheme.n_classes()),
        ));
    }
    let (b, nc, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
    let mut out = vec![0.0; b * inner];
    for bi in 0..b {
        for (k, o) in out[bi * inner..(bi + 1) * inner].iter_mut().enumerate() {
            *o = ((j + 1)..nc)
                .map(|c| class_probs.data()[(bi * nc + c) * inner + k])
                .sum::<f64>()
                .clamp(0.0, 1.0);
        }
    }
    let mut shape = vec![b];
    shape.extend_from_slice(&s[2..]);
    Ok(Tensor::new(shape, out)?)
}

/// Maximum a-posteriori class (1-based) per position. Class axis is 1;
/// ties resolve to the lower class.
pub fn map_classes(class_probs: &Tensor) -> Vec<usize> {
    let s = class_probs.shape();
    let (b, nc, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
    let mut out = Vec::with_capacity(b * inner);
    for bi in 0..b {
        for k in 0..inner {
            let mut best = 0;
            for c in 1..nc {
                if class_probs.data()[(bi * nc + c) * inner + k] > class_probs.data()[(bi * nc + best) * inner + k] {
                    best = c;
                }
            }
            out.push(best + 1);
        }
    }
    out
}

/// Rates `[B, rest..]` from class probabilities via the MAP class's
/// representative rate.
pub fn map_rates(class_probs: &Tensor, scheme: &ClassScheme) -> Result<Tensor> {
    let s = class_probs.shape();
    if s.len() < 2 || s[1] != scheme.n_classes() {
        return Err(CoreError::invalid(
            "map_rates",
            format!("probabilities {s:?} do not match the scheme"),
        ));
    }
    let rates = map_classes(class_probs)
        .into_iter()
        .map(|c| scheme.representative_rate(c))
        .collect();
    let mut shape = vec![s[0]];
    shape.extend_from_slice(&s[2..]);
    Ok(Tensor::new(shape, rates)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::default_scheme;

    fn tiny(head: HeadKind) -> NetworkConfig {
        NetworkConfig {
            n_blocks: 2,
            base_channels: 2,
            input_steps: 3,
            forecast_steps: 2,
            head,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn channel_ladder() {
        let c = NetworkConfig::default();
        assert_eq!((1..=3).map(|k| c.channels(k)).collect::<Vec<_>>(), vec![16, 32, 64]);
    }

    #[test]
    fn build_is_deterministic_and_census_matches() {
        let c = tiny(HeadKind::Regression);
        let a = build(&c, 3).unwrap();
        assert_eq!(a, build(&c, 3).unwrap());
        assert_ne!(a.params, build(&c, 4).unwrap().params);
        assert_eq!(a.parameter_count(), parameter_count(&c));
        a.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_extent() {
        let p = build(&tiny(HeadKind::Regression), 1).unwrap();
        let x = Tensor::zeros(&[1, 4, 3, 6, 8]);
        let err = p.predict(&x).unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn output_shapes_and_ranges() {
        let x = Tensor::from_fn(&[2, 4, 3, 8, 8], |i| ((i * 37) % 11) as f64 * 0.3);
        let r = build(&tiny(HeadKind::Regression), 5).unwrap();
        let y = r.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 8, 8]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
        let c = build(&tiny(HeadKind::Classification), 5).unwrap();
        let p = c.predict(&x).unwrap();
        assert_eq!(p.shape(), &[2, 10, 2, 8, 8]);
        let inner = 2 * 64;
        for b in 0..2 {
            for k in 0..inner {
                let s: f64 = (0..10).map(|cl| p.data()[(b * 10 + cl) * inner + k]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exceedance_examples() {
        let scheme = default_scheme();
        let uniform = Tensor::full(&[1, 10, 3], 0.1);
        let e = exceedance_probability(&uniform, &scheme, 1.6).unwrap();
        assert!(e.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let mut top = Tensor::zeros(&[1, 10, 1]);
        top.set(&[0, 9, 0], 1.0);
        for &r in &scheme.boundaries {
            assert_eq!(exceedance_probability(&top, &scheme, r).unwrap().data(), &[1.0]);
        }
        assert!(exceedance_probability(&uniform, &scheme, 1.0).is_err());
    }

    #[test]
    fn map_rates_pick_the_argmax_class() {
        let scheme = default_scheme();
        let mut p = Tensor::full(&[1, 10, 2], 0.05);
        p.set(&[0, 3, 0], 0.55);
        p.set(&[0, 9, 1], 0.55);
        let r = map_rates(&p, &scheme).unwrap();
        assert_eq!(r.data(), &[scheme.representative_rate(4), scheme.representative_rate(10)]);
    }
}
