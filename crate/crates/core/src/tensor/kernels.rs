//! Slice-level numeric kernels shared by the tape's forward and backward rules.

use crate::error::{Error, Result};

/// Resolved geometry of a single-image 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [c_in, h, w] = *input else {
            return Err(Error::dim("conv2d", format!("input must be [C,H,W], got {input:?}")));
        };
        let [c_out, k_in, kh, kw] = *kernel else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be [C_out,C_in,k,k], got {kernel:?}"),
            ));
        };
        if k_in != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("input {input:?} has {c_in} channels but kernel {kernel:?} expects {k_in}"),
            ));
        }
        if kh != kw {
            return Err(Error::dim("conv2d", format!("kernel {kernel:?} is not square")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * padding || kh > w + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!("kernel size {kh} exceeds padded input {input:?} (padding {padding})"),
            ));
        }
        Ok(ConvGeometry {
            in_channels: c_in,
            height: h,
            width: w,
            out_channels: c_out,
            kernel: kh,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kh) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_height, self.out_width]
    }

    /// Output positions `o` for which `o * stride + offset - padding` lands inside `0..extent`.
    fn valid(&self, offset: usize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.padding);
        let lo = if offset >= p { 0 } else { (p - offset).div_ceil(s) };
        let hi = if extent + p > offset {
            ((extent - 1 + p - offset) / s + 1).min(out_extent)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64], out: &mut [f64]) {
    let (h, w, oh_n, ow_n, k) = (g.height, g.width, g.out_height, g.out_width, g.kernel);
    let (s, p) = (g.stride, g.padding);
    for co in 0..g.out_channels {
        let out_c = &mut out[co * oh_n * ow_n..(co + 1) * oh_n * ow_n];
        out_c.fill(bias[co]);
        for ci in 0..g.in_channels {
            let in_c = &input[ci * h * w..(ci + 1) * h * w];
            let k_base = (co * g.in_channels + ci) * k * k;
            for kh in 0..k {
                let rows = g.valid(kh, h, oh_n);
                for kw in 0..k {
                    let cols = g.valid(kw, w, ow_n);
                    if cols.is_empty() {
                        continue;
                    }
                    let wv = kernel[k_base + kh * k + kw];
                    for oh in rows.clone() {
                        let ih = oh * s + kh - p;
                        let in_row = &in_c[ih * w..(ih + 1) * w];
                        let out_row = &mut out_c[oh * ow_n..(oh + 1) * ow_n];
                        if s == 1 {
                            let iw0 = cols.start + kw - p;
                            let src = &in_row[iw0..iw0 + cols.len()];
                            for (o, &x) in out_row[cols.clone()].iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        } else {
                            for ow in cols.clone() {
                                out_row[ow] += wv * in_row[ow * s + kw - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients of a cross-correlation into the provided buffers.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    mut d_kernel: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
) {
    let (h, w, oh_n, ow_n, k) = (g.height, g.width, g.out_height, g.out_width, g.kernel);
    let (s, p) = (g.stride, g.padding);
    for co in 0..g.out_channels {
        let dout_c = &d_out[co * oh_n * ow_n..(co + 1) * oh_n * ow_n];
        if let Some(db) = d_bias.as_deref_mut() {
            db[co] += dout_c.iter().sum::<f64>();
        }
        for ci in 0..g.in_channels {
            let in_off = ci * h * w;
            let k_base = (co * g.in_channels + ci) * k * k;
            for kh in 0..k {
                let rows = g.valid(kh, h, oh_n);
                for kw in 0..k {
                    let cols = g.valid(kw, w, ow_n);
                    if cols.is_empty() {
                        continue;
                    }
                    let wv = kernel[k_base + kh * k + kw];
                    let mut dw = 0.0;
                    for oh in rows.clone() {
                        let ih = oh * s + kh - p;
                        let row = in_off + ih * w;
                        let dout_row = &dout_c[oh * ow_n..(oh + 1) * ow_n];
                        if s == 1 {
                            let iw0 = row + cols.start + kw - p;
                            let n = cols.len();
                            let g_slice = &dout_row[cols.clone()];
                            if d_kernel.is_some() {
                                dw += g_slice
                                    .iter()
                                    .zip(&input[iw0..iw0 + n])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            if let Some(di) = d_input.as_deref_mut() {
                                for (d, &go) in di[iw0..iw0 + n].iter_mut().zip(g_slice) {
                                    *d += wv * go;
                                }
                            }
                        } else {
                            for ow in cols.clone() {
                                let idx = row + ow * s + kw - p;
                                let go = dout_row[ow];
                                dw += go * input[idx];
                                if let Some(di) = d_input.as_deref_mut() {
                                    di[idx] += wv * go;
                                }
                            }
                        }
                    }
                    if let Some(dk) = d_kernel.as_deref_mut() {
                        dk[k_base + kh * k + kw] += dw;
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling. Returns the output shape and, per output
/// element, the flat input index of the first row-major maximum.
pub fn max_pool2d_forward(
    shape: &[usize],
    window: usize,
    input: &[f64],
) -> Result<([usize; 3], Vec<f64>, Vec<usize>)> {
    let [c, h, w] = *shape else {
        return Err(Error::dim("max_pool2d", format!("input must be [C,H,W], got {shape:?}")));
    };
    if window == 0 || window > h || window > w {
        return Err(Error::dim(
            "max_pool2d",
            format!("window {window} does not fit input {shape:?}"),
        ));
    }
    let (oh_n, ow_n) = (h / window, w / window);
    let mut out = Vec::with_capacity(c * oh_n * ow_n);
    let mut argmax = Vec::with_capacity(c * oh_n * ow_n);
    for ch in 0..c {
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut best_idx = ch * h * w + (oh * window) * w + ow * window;
                let mut best = input[best_idx];
                for dh in 0..window {
                    for dw in 0..window {
                        let idx = ch * h * w + (oh * window + dh) * w + ow * window + dw;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(([c, oh_n, ow_n], out, argmax))
}

pub fn linear_forward(input: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = input.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &weight[i * n..(i + 1) * n];
        *o = bias[i] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
