//! Strided 2-D/3-D convolution kernels (im2col + GEMM) and their adjoints.
//!
//! Layouts are channels-first with a leading batch axis: inputs are
//! `[B, C_in, spatial..]`, kernels `[C_out, C_in, k..]`. Rank-2 problems are
//! lifted to rank 3 with a unit depth axis so a single code path serves both.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split evenly with the
    /// odd element after.
    Same,
    /// No padding; output extent `(in - k) / stride + 1`.
    Valid,
}

/// Resolved geometry of one convolution, always expressed in three spatial
/// axes (depth, height, width).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub rank: usize,
    pub in_ext: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_ext: [usize; 3],
}

impl ConvGeometry {
    pub fn new(rank: usize, in_ext: &[usize], kernel: &[usize], stride: &[usize], padding: Padding) -> Result<Self> {
        if rank != 2 && rank != 3 {
            return Err(TensorError::invalid("conv", format!("rank must be 2 or 3, got {rank}")));
        }
        for (what, v) in [("input", in_ext), ("kernel", kernel), ("stride", stride)] {
            if v.len() != rank {
                return Err(TensorError::invalid(
                    "conv",
                    format!("{what} has {} spatial axes, expected {rank}", v.len()),
                ));
            }
        }
        let lift = |v: &[usize], fill: usize| -> [usize; 3] {
            if rank == 2 {
                [fill, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let in3 = lift(in_ext, 1);
        let k3 = lift(kernel, 1);
        let s3 = lift(stride, 1);
        let mut pad = [0; 3];
        let mut out = [0; 3];
        for ax in 0..3 {
            let axis_name = spatial_axis_name(rank, ax);
            if s3[ax] == 0 {
                return Err(TensorError::invalid("conv", format!("stride on {axis_name} axis is zero")));
            }
            if k3[ax] == 0 {
                return Err(TensorError::invalid("conv", format!("kernel extent on {axis_name} axis is zero")));
            }
            match padding {
                Padding::Same => {
                    out[ax] = in3[ax].div_ceil(s3[ax]);
                    let needed = (out[ax] - 1) * s3[ax] + k3[ax];
                    pad[ax] = needed.saturating_sub(in3[ax]) / 2;
                }
                Padding::Valid => {
                    if in3[ax] < k3[ax] {
                        return Err(TensorError::mismatch(
                            "conv",
                            format!("{axis_name} (input smaller than kernel)"),
                            k3[ax],
                            in3[ax],
                        ));
                    }
                    out[ax] = (in3[ax] - k3[ax]) / s3[ax] + 1;
                }
            }
        }
        Ok(ConvGeometry {
            rank,
            in_ext: in3,
            kernel: k3,
            stride: s3,
            pad,
            out_ext: out,
        })
    }

    pub fn in_volume(&self) -> usize {
        self.in_ext.iter().product()
    }

    pub fn out_volume(&self) -> usize {
        self.out_ext.iter().product()
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Spatial output extents in the caller's rank.
    pub fn out_spatial(&self) -> Vec<usize> {
        self.out_ext[3 - self.rank..].to_vec()
    }

    pub fn in_spatial(&self) -> Vec<usize> {
        self.in_ext[3 - self.rank..].to_vec()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

fn spatial_axis_name(rank: usize, ax3: usize) -> &'static str {
    match (rank, ax3) {
        (3, 0) => "depth",
        (_, 1) => "height",
        (_, 2) => "width",
        _ => "depth",
    }
}

/// Unfolds one sample `[C_in, D, H, W]` into columns `[C_in·Kvol, OutVol]`.
fn im2col(g: &ConvGeometry, cin: usize, x: &[f64], cols: &mut [f64]) {
    let [id, ih, iw] = g.in_ext;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.out_ext;
    let ovol = od * oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * ovol..(row + 1) * ovol];
                    let mut o = 0;
                    for zd in 0..od {
                        let z = (zd * sd + a) as isize - pd as isize;
                        for yh in 0..oh {
                            let y = (yh * sh + b) as isize - ph as isize;
                            let plane_ok = z >= 0 && (z as usize) < id && y >= 0 && (y as usize) < ih;
                            if !plane_ok {
                                dst[o..o + ow].fill(0.0);
                                o += ow;
                                continue;
                            }
                            let base = (z as usize * ih + y as usize) * iw;
                            for xw in 0..ow {
                                let xx = (xw * sw + e) as isize - pw as isize;
                                dst[o] = if xx >= 0 && (xx as usize) < iw {
                                    xc[base + xx as usize]
                                } else {
                                    0.0
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `[C_in, D, H, W]`.
fn col2im(g: &ConvGeometry, cin: usize, cols: &[f64], dx: &mut [f64]) {
    let [id, ih, iw] = g.in_ext;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.out_ext;
    let ovol = od * oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * ovol..(row + 1) * ovol];
                    let mut o = 0;
                    for zd in 0..od {
                        let z = (zd * sd + a) as isize - pd as isize;
                        for yh in 0..oh {
                            let y = (yh * sh + b) as isize - ph as isize;
                            if !(z >= 0 && (z as usize) < id && y >= 0 && (y as usize) < ih) {
                                o += ow;
                                continue;
                            }
                            let base = (z as usize * ih + y as usize) * iw;
                            for xw in 0..ow {
                                let xx = (xw * sw + e) as isize - pw as isize;
                                if xx >= 0 && (xx as usize) < iw {
                                    xc[base + xx as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y[b] = W · im2col(x[b])`, returning `[B, C_out, OutVol]` data.
pub(crate) fn forward_raw(g: &ConvGeometry, batch: usize, cin: usize, cout: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
    let ivol = g.in_volume();
    let ovol = g.out_volume();
    let krows = cin * g.kernel_volume();
    let mut y = vec![0.0; batch * cout * ovol];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; krows * ovol] };
    for b in 0..batch {
        let xb = &x[b * cin * ivol..(b + 1) * cin * ivol];
        let yb = &mut y[b * cout * ovol..(b + 1) * cout * ovol];
        let colref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, cin, xb, &mut cols);
            &cols
        };
        gemm(cout, krows, ovol, w, false, colref, false, yb, 0.0);
    }
    y
}

/// Gradient with respect to the input: `dx[b] = col2im(Wᵀ · dy[b])`.
pub(crate) fn backward_input_raw(g: &ConvGeometry, batch: usize, cin: usize, cout: usize, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let ivol = g.in_volume();
    let ovol = g.out_volume();
    let krows = cin * g.kernel_volume();
    let mut dx = vec![0.0; batch * cin * ivol];
    let mut cols = vec![0.0; krows * ovol];
    for b in 0..batch {
        let dyb = &dy[b * cout * ovol..(b + 1) * cout * ovol];
        let dxb = &mut dx[b * cin * ivol..(b + 1) * cin * ivol];
        if g.is_pointwise() {
            gemm(krows, cout, ovol, w, true, dyb, false, dxb, 0.0);
        } else {
            gemm(krows, cout, ovol, w, true, dyb, false, &mut cols, 0.0);
            col2im(g, cin, &cols, dxb);
        }
    }
    dx
}

/// Gradient with respect to the kernel: `dW = Σ_b dy[b] · im2col(x[b])ᵀ`.
pub(crate) fn backward_kernel_raw(g: &ConvGeometry, batch: usize, cin: usize, cout: usize, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let ivol = g.in_volume();
    let ovol = g.out_volume();
    let krows = cin * g.kernel_volume();
    let mut dw = vec![0.0; cout * krows];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; krows * ovol] };
    for b in 0..batch {
        let xb = &x[b * cin * ivol..(b + 1) * cin * ivol];
        let dyb = &dy[b * cout * ovol..(b + 1) * cout * ovol];
        let colref: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, cin, xb, &mut cols);
            &cols
        };
        gemm(cout, ovol, krows, dyb, false, colref, true, &mut dw, 1.0);
    }
    dw
}

/// Shape bookkeeping shared by the tensor-level convolution entry points.
#[derive(Clone, Debug)]
pub struct ConvProblem {
    pub geom: ConvGeometry,
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvProblem {
    /// Validates `input [B, C_in, spatial..]` against `kernel [C_out, C_in, k..]`.
    pub fn forward(input: &[usize], kernel: &[usize], stride: &[usize], padding: Padding, rank: usize) -> Result<Self> {
        if input.len() != rank + 2 {
            return Err(TensorError::invalid(
                "conv",
                format!("input must be [batch, channels, {rank} spatial axes], got shape {input:?}"),
            ));
        }
        if kernel.len() != rank + 2 {
            return Err(TensorError::invalid(
                "conv",
                format!(
                    "kernel spatial rank {} does not match requested rank {rank}",
                    kernel.len().saturating_sub(2)
                ),
            ));
        }
        if input[1] != kernel[1] {
            return Err(TensorError::mismatch("conv", "input channels", kernel[1], input[1]));
        }
        let geom = ConvGeometry::new(rank, &input[2..], &kernel[2..], stride, padding)?;
        Ok(ConvProblem {
            geom,
            batch: input[0],
            cin: input[1],
            cout: kernel[0],
        })
    }

    /// Geometry of the transposed convolution that maps `input [B, C, spatial..]`
    /// (shaped like the forward output) back to forward-input space, using the
    /// same `kernel [C, C_t_out, k..]` as the forward convolution it adjoins.
    pub fn transpose(input: &[usize], kernel: &[usize], stride: &[usize], padding: Padding, rank: usize) -> Result<Self> {
        Self::transpose_to(input, kernel, stride, padding, rank, None)
    }

    /// As [`ConvProblem::transpose`], but with the forward-input extents given
    /// explicitly. Without them the extents are `input·stride` ("same") or
    /// `(input − 1)·stride + kernel` ("valid") and a kernel narrower than the
    /// stride is rejected.
    pub fn transpose_to(
        input: &[usize],
        kernel: &[usize],
        stride: &[usize],
        padding: Padding,
        rank: usize,
        out_spatial: Option<&[usize]>,
    ) -> Result<Self> {
        if input.len() != rank + 2 || kernel.len() != rank + 2 || stride.len() != rank {
            return Err(TensorError::invalid(
                "conv_transpose",
                format!(
                    "rank {rank} requires rank-{} input and kernel; got {input:?} and {kernel:?}",
                    rank + 2
                ),
            ));
        }
        if input[1] != kernel[0] {
            return Err(TensorError::mismatch("conv_transpose", "input channels", kernel[0], input[1]));
        }
        let mut out_ext = Vec::with_capacity(rank);
        if let Some(ext) = out_spatial {
            if ext.len() != rank {
                return Err(TensorError::invalid(
                    "conv_transpose",
                    format!("output extents {ext:?} need {rank} axes"),
                ));
            }
            out_ext.extend_from_slice(ext);
        }
        for ax in 0..rank {
            if out_spatial.is_some() {
                break;
            }
            let (u, k, s) = (input[2 + ax], kernel[2 + ax], stride[ax]);
            if s == 0 {
                return Err(TensorError::invalid(
                    "conv_transpose",
                    format!("stride on spatial axis {ax} is zero"),
                ));
            }
            if k < s {
                return Err(TensorError::invalid(
                    "conv_transpose",
                    format!("kernel extent {k} smaller than stride {s} on spatial axis {ax} leaves unwritten gaps"),
                ));
            }
            out_ext.push(match padding {
                Padding::Same => u * s,
                Padding::Valid => (u - 1) * s + k,
            });
        }
        let geom = ConvGeometry::new(rank, &out_ext, &kernel[2..], stride, padding)?;
        if geom.out_spatial() != input[2..] {
            return Err(TensorError::invalid(
                "conv_transpose",
                format!("kernel/stride combination cannot reproduce input extents {:?}", &input[2..]),
            ));
        }
        Ok(ConvProblem {
            geom,
            batch: input[0],
            cin: kernel[1],
            cout: kernel[0],
        })
    }

    pub fn forward_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.cout];
        s.extend(self.geom.out_spatial());
        s
    }

    pub fn input_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.cin];
        s.extend(self.geom.in_spatial());
        s
    }
}

/// Strided convolution of `input [B, C_in, spatial..]` with
/// `kernel [C_out, C_in, k..]`, for `rank` 2 or 3 spatial axes.
pub fn conv_forward(input: &Tensor, kernel: &Tensor, stride: &[usize], padding: Padding, rank: usize) -> Result<Tensor> {
    let p = ConvProblem::forward(input.shape(), kernel.shape(), stride, padding, rank)?;
    let y = forward_raw(&p.geom, p.batch, p.cin, p.cout, input.data(), kernel.data());
    Tensor::new(p.forward_shape(), y)
}

/// Transposed convolution: the exact adjoint of [`conv_forward`] with the same
/// kernel, stride and padding. `input` is shaped like a forward output
/// `[B, C_out, ..]`; the result is shaped like a forward input `[B, C_in, ..]`.
pub fn conv_transpose_forward(input: &Tensor, kernel: &Tensor, stride: &[usize], padding: Padding, rank: usize) -> Result<Tensor> {
    let p = ConvProblem::transpose(input.shape(), kernel.shape(), stride, padding, rank)?;
    let x = backward_input_raw(&p.geom, p.batch, p.cin, p.cout, input.data(), kernel.data());
    Tensor::new(p.input_shape(), x)
}

/// [`conv_transpose_forward`] onto explicit forward-input spatial extents, for
/// strides that do not divide the forward input evenly.
pub fn conv_transpose_to(input: &Tensor, kernel: &Tensor, stride: &[usize], padding: Padding, out_spatial: &[usize]) -> Result<Tensor> {
    let rank = out_spatial.len();
    let p = ConvProblem::transpose_to(input.shape(), kernel.shape(), stride, padding, rank, Some(out_spatial))?;
    let x = backward_input_raw(&p.geom, p.batch, p.cin, p.cout, input.data(), kernel.data());
    Tensor::new(p.input_shape(), x)
}
