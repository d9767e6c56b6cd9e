//! Dense 2-d convolution (cross-correlation) as a tape operation.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, TapeOp, VarId};
use crate::numerics::tensor::Tensor;

/// Cross-correlation of an input map `[C_in, H, W]` with a kernel
/// `[C_out, C_in, kH, kW]`, plus an optional bias `[C_out]` passed as a
/// third input. Zero padding, floor division for the output extent:
/// `H' = (H + 2*pad - kH) / stride + 1`.
#[derive(Debug)]
pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    fn check(&self, inputs: &[&Tensor]) -> Result<(usize, usize, usize, usize, usize, usize)> {
        if inputs.len() != 2 && inputs.len() != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("expected input, weight[, bias], got {} tensors", inputs.len()),
            ));
        }
        let [cin, h, w] = inputs[0].shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [C, H, W], got {:?}", inputs[0].shape()),
            ));
        };
        let [cout, wcin, kh, kw] = inputs[1].shape() else {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight must be [C_out, C_in, kH, kW], got {:?}",
                    inputs[1].shape()
                ),
            ));
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if let Some(b) = inputs.get(2) {
            if b.shape() != [*cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias must be [{cout}], got {:?}", b.shape()),
                ));
            }
        }
        if h + 2 * self.padding < *kh || w + 2 * self.padding < *kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {h}x{w} + 2*{}", self.padding),
            ));
        }
        Ok((*cin, *h, *w, *cout, *kh, *kw))
    }

    fn out_extent(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }
}

impl TapeOp for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (cin, h, w, cout, kh, kw) = self.check(inputs)?;
        let (oh, ow) = self.out_extent(h, w, kh, kw);
        let x = inputs[0].data();
        let wt = inputs[1].data();
        let bias = inputs.get(2).map(|b| b.data());

        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    // Bias first, taps in (ci, ky, kx) order. The deformable
                    // op accumulates in the same order so that zero offsets
                    // reproduce this output bit for bit.
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((co * cin + ci) * kh + ky) * kw + kx]
                                    * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new(vec![cout, oh, ow], out)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let (cin, h, w) = {
            let s = inputs[0].shape();
            (s[0], s[1], s[2])
        };
        let (cout, kh, kw) = {
            let s = inputs[1].shape();
            (s[0], s[2], s[3])
        };
        let (oh, ow) = (output.shape()[1], output.shape()[2]);
        let x = inputs[0].data();
        let wt = inputs[1].data();

        let mut gx = vec![0.0; inputs[0].len()];
        let mut gw = vec![0.0; inputs[1].len()];
        let mut gb = inputs.get(2).map(|b| vec![0.0; b.len()]);

        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = out_grad[(co * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[co] += g;
                    }
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                let xi = (ci * h + iy as usize) * w + ix as usize;
                                gx[xi] += g * wt[wi];
                                gw[wi] += g * x[xi];
                            }
                        }
                    }
                }
            }
        }

        let mut grads = vec![gx, gw];
        if let Some(gb) = gb {
            grads.push(gb);
        }
        grads
    }
}

impl Tape {
    pub fn conv2d(
        &mut self,
        x: VarId,
        weight: VarId,
        bias: Option<VarId>,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let op = Box::new(Conv2d { stride, padding });
        match bias {
            Some(b) => self.apply(op, &[x, weight, b]),
            None => self.apply(op, &[x, weight]),
        }
    }
}
