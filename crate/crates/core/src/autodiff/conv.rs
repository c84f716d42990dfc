//! Direct 2-D convolution (cross-correlation) over CxHxW maps.
//!
//! All three kernels sweep the same `(out, in, ky, kx, row)` loop nest so
//! that the inner loop is a contiguous row slice whenever the stride is 1.

use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let (c, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(TensorError::Rank {
                    expected: 3,
                    shape: input.to_vec(),
                })
            }
        };
        let (o, wc, kh, kw) = match *weight {
            [o, wc, kh, kw] => (o, wc, kh, kw),
            _ => {
                return Err(TensorError::Rank {
                    expected: 4,
                    shape: weight.to_vec(),
                })
            }
        };
        if wc != c {
            return Err(TensorError::ConvChannels {
                input: c,
                weight: wc,
            });
        }
        if bias != [o] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                left: vec![o],
                right: bias.to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(TensorError::ConvKernel {
                kernel: (kh, kw),
                stride,
            });
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh || span_w < kw || h == 0 || w == 0 {
            return Err(TensorError::ConvExtent {
                input: input.to_vec(),
                kernel: (kh, kw),
                padding,
            });
        }
        Ok(Self {
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }

    /// Output indices whose tap `k` lands inside an input axis of length `len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if len + p > k {
            ((len - 1 + p - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn forward(geo: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane_in = geo.in_h * geo.in_w;
    let plane_out = geo.out_h * geo.out_w;
    let mut out = vec![0.0; geo.out_channels * plane_out];
    for o in 0..geo.out_channels {
        let out_o = &mut out[o * plane_out..(o + 1) * plane_out];
        out_o.fill(bias[o]);
        for c in 0..geo.in_channels {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..geo.kernel_h {
                let (oy0, oy1) = geo.valid(ky, geo.in_h, geo.out_h);
                for kx in 0..geo.kernel_w {
                    let (ox0, ox1) = geo.valid(kx, geo.in_w, geo.out_w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let wv = weight[((o * geo.in_channels + c) * geo.kernel_h + ky) * geo.kernel_w + kx];
                    let ix0 = ox0 * geo.stride + kx - geo.padding;
                    for oy in oy0..oy1 {
                        let iy = oy * geo.stride + ky - geo.padding;
                        let orow = &mut out_o[oy * geo.out_w + ox0..oy * geo.out_w + ox1];
                        let irow = &in_c[iy * geo.in_w..(iy + 1) * geo.in_w];
                        if geo.stride == 1 {
                            for (a, b) in orow.iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                                *a += wv * b;
                            }
                        } else {
                            for (i, a) in orow.iter_mut().enumerate() {
                                *a += wv * irow[ix0 + i * geo.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients with respect to the input and the weight; either may be skipped.
pub fn backward(
    geo: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
) {
    let plane_in = geo.in_h * geo.in_w;
    let plane_out = geo.out_h * geo.out_w;
    for o in 0..geo.out_channels {
        let g_o = &grad_out[o * plane_out..(o + 1) * plane_out];
        for c in 0..geo.in_channels {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            for ky in 0..geo.kernel_h {
                let (oy0, oy1) = geo.valid(ky, geo.in_h, geo.out_h);
                for kx in 0..geo.kernel_w {
                    let (ox0, ox1) = geo.valid(kx, geo.in_w, geo.out_w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let widx = ((o * geo.in_channels + c) * geo.kernel_h + ky) * geo.kernel_w + kx;
                    let wv = weight[widx];
                    let ix0 = ox0 * geo.stride + kx - geo.padding;
                    let n = ox1 - ox0;
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * geo.stride + ky - geo.padding;
                        let grow = &g_o[oy * geo.out_w + ox0..oy * geo.out_w + ox1];
                        let irow_start = c * plane_in + iy * geo.in_w;
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let girow = &mut gi[irow_start..irow_start + geo.in_w];
                            if geo.stride == 1 {
                                for (a, g) in girow[ix0..ix0 + n].iter_mut().zip(grow) {
                                    *a += wv * g;
                                }
                            } else {
                                for (i, g) in grow.iter().enumerate() {
                                    girow[ix0 + i * geo.stride] += wv * g;
                                }
                            }
                        }
                        if grad_weight.is_some() {
                            let irow = &in_c[iy * geo.in_w..(iy + 1) * geo.in_w];
                            if geo.stride == 1 {
                                for (g, x) in grow.iter().zip(&irow[ix0..ix0 + n]) {
                                    acc += g * x;
                                }
                            } else {
                                for (i, g) in grow.iter().enumerate() {
                                    acc += g * irow[ix0 + i * geo.stride];
                                }
                            }
                        }
                    }
                    if let Some(gw) = grad_weight.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

pub fn bias_grad(geo: &ConvGeometry, grad_out: &[f64]) -> Vec<f64> {
    let plane = geo.out_h * geo.out_w;
    grad_out.chunks(plane).map(|c| c.iter().sum()).collect()
}
