//! Peephole-free ConvLSTM cell, sequence encoder and recursive forecaster.
//!
//! Gate kernels are stored stacked along the output-channel axis in the
//! order (input, forget, candidate, output): `w_x [4h, c_in, 3, 3]`,
//! `w_h [4h, h, 3, 3]`, `bias [4h]`.

use nowcast_tensor::{xavier_uniform_with_fans, Graph, Padding, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const KERNEL: usize = 3;

/// Parameter tensors of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLstmCell {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
}

/// Graph handles of a cell's parameters.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

impl ConvLstmCell {
    /// Xavier-initialized kernels (fans per gate) and zero biases.
    pub fn init(in_channels: usize, hidden: usize, seed: u64) -> Self {
        let area = KERNEL * KERNEL;
        ConvLstmCell {
            w_x: xavier_uniform_with_fans(&[4 * hidden, in_channels, KERNEL, KERNEL], in_channels * area, hidden * area, seed),
            w_h: xavier_uniform_with_fans(
                &[4 * hidden, hidden, KERNEL, KERNEL],
                hidden * area,
                hidden * area,
                seed ^ 0x5bd1_e995,
            ),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn zeros(in_channels: usize, hidden: usize) -> Self {
        ConvLstmCell {
            w_x: Tensor::zeros(&[4 * hidden, in_channels, KERNEL, KERNEL]),
            w_h: Tensor::zeros(&[4 * hidden, hidden, KERNEL, KERNEL]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph) -> CellVars {
        CellVars {
            w_x: g.param(self.w_x.clone()),
            w_h: g.param(self.w_h.clone()),
            bias: g.param(self.bias.clone()),
        }
    }

    /// Single step on plain tensors; `state` of `None` means zero states.
    pub fn step(&self, x: &Tensor, state: Option<(&Tensor, &Tensor)>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let xv = g.input(x.clone());
        let st = state.map(|(h, c)| (g.input(h.clone()), g.input(c.clone())));
        let (h, c) = cell_step(&mut g, xv, st, &vars)?;
        Ok((g.value(h).clone(), g.value(c).clone()))
    }
}

/// One ConvLSTM update:
/// `i, f, o = σ(W_x∗x + W_h∗h + b)`, `g = tanh(..)`, `c = f⊙c_prev + i⊙g`,
/// `h = o⊙tanh(c)`. A `None` state is the zero state.
pub fn cell_step(g: &mut Graph, x: Var, state: Option<(Var, Var)>, cell: &CellVars) -> Result<(Var, Var)> {
    let hidden = g.shape(cell.w_h)[1];
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(CoreError::invalid("convlstm", format!("input must be [B, C, H, W], got {xs:?}")));
    }
    let zx = g.conv(x, cell.w_x, &[1, 1], Padding::Same, 2)?;
    let mut z = g.bias_add(zx, cell.bias)?;
    if let Some((h, c)) = state {
        let hs = g.shape(h).to_vec();
        let expect = [xs[0], hidden, xs[2], xs[3]];
        if hs != expect || g.shape(c) != expect {
            return Err(CoreError::invalid(
                "convlstm",
                format!("state shapes {hs:?}/{:?} do not match expected {expect:?}", g.shape(c)),
            ));
        }
        let zh = g.conv(h, cell.w_h, &[1, 1], Padding::Same, 2)?;
        z = g.add(z, zh)?;
    }
    let gi = g.slice(z, 1, 0, hidden)?;
    let gf = g.slice(z, 1, hidden, hidden)?;
    let gc = g.slice(z, 1, 2 * hidden, hidden)?;
    let go = g.slice(z, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(gi);
    let o = g.sigmoid(go);
    let cand = g.tanh(gc);
    let mut c = g.mul(i, cand)?;
    if let Some((_, c_prev)) = state {
        let f = g.sigmoid(gf);
        let keep = g.mul(f, c_prev)?;
        c = g.add(keep, c)?;
    }
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// Hidden states after every step plus the final `(h, c)`.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Vec<Var>,
    pub h: Var,
    pub c: Var,
}

/// Runs the cell over `xs` from zero states.
pub fn encode_sequence(g: &mut Graph, xs: &[Var], cell: &CellVars) -> Result<Encoded> {
    if xs.is_empty() {
        return Err(CoreError::invalid("encode_sequence", "empty input sequence"));
    }
    let mut state = None;
    let mut states = Vec::with_capacity(xs.len());
    for &x in xs {
        let (h, c) = cell_step(g, x, state, cell)?;
        states.push(h);
        state = Some((h, c));
    }
    let (h, c) = state.expect("non-empty sequence");
    Ok(Encoded { states, h, c })
}

/// Outputs of a recursive forecast plus the input fed at every step.
#[derive(Clone, Debug)]
pub struct RecursiveOutput {
    pub outputs: Vec<Var>,
    pub inputs: Vec<Var>,
}

/// Unrolls `horizon` steps from context `z` and zero states. Step 1 reads
/// `z`; step `k + 1` reads the joint context `Y^k + z`.
pub fn recursive_forecast(g: &mut Graph, z: Var, cell: &CellVars, horizon: usize) -> Result<RecursiveOutput> {
    if horizon == 0 {
        return Err(CoreError::invalid("recursive_forecast", "horizon must be at least 1"));
    }
    let hidden = g.shape(cell.w_h)[1];
    let in_ch = g.shape(cell.w_x)[1];
    let zc = g.shape(z).get(1).copied().unwrap_or(0);
    if hidden != in_ch || zc != hidden {
        return Err(CoreError::invalid(
            "recursive_forecast",
            format!("context has {zc} channels; cell maps {in_ch} to {hidden}, all three must agree"),
        ));
    }
    let mut outputs = Vec::with_capacity(horizon);
    let mut inputs = Vec::with_capacity(horizon);
    let mut x = z;
    let mut state = None;
    for step in 0..horizon {
        inputs.push(x);
        let (h, c) = cell_step(g, x, state, cell)?;
        outputs.push(h);
        state = Some((h, c));
        if step + 1 < horizon {
            x = g.add(h, z)?;
        }
    }
    Ok(RecursiveOutput { outputs, inputs })
}
