//! Bilinear sampling and the offset-driven (deformable) 3x3 convolution.
//!
//! Both ops share one sampling rule: a point reads the four surrounding
//! lattice values with bilinear weights, and lattice positions outside the
//! map contribute zero, so values fade linearly to zero past the border.
//! Sampling exactly on an in-bounds lattice point returns the stored value
//! with no rounding, which is what makes a zero-offset deformable pass
//! reproduce a plain convolution bit for bit.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, TapeOp, VarId};
use crate::numerics::tensor::Tensor;

/// Bilinear read of one `h` by `w` plane at fractional `(y, x)`.
/// Returns the value and its derivatives with respect to y and x.
pub(crate) fn bilinear_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;

    let fetch = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let v00 = fetch(y0, x0);
    let v01 = fetch(y0, x0 + 1.0);
    let v10 = fetch(y0 + 1.0, x0);
    let v11 = fetch(y0 + 1.0, x0 + 1.0);

    let value = (1.0 - ly) * ((1.0 - lx) * v00 + lx * v01) + ly * ((1.0 - lx) * v10 + lx * v11);
    let dvdy = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
    let dvdx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
    (value, dvdy, dvdx)
}

/// Scatter `g` into the four lattice corners around `(y, x)` with bilinear
/// weights, skipping corners outside the plane.
fn scatter_bilinear(grad_plane: &mut [f64], h: usize, w: usize, y: f64, x: f64, g: f64) {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let mut put = |yy: f64, xx: f64, wgt: f64| {
        if yy >= 0.0 && xx >= 0.0 && yy <= (h - 1) as f64 && xx <= (w - 1) as f64 {
            grad_plane[yy as usize * w + xx as usize] += g * wgt;
        }
    };
    put(y0, x0, (1.0 - ly) * (1.0 - lx));
    put(y0, x0 + 1.0, (1.0 - ly) * lx);
    put(y0 + 1.0, x0, ly * (1.0 - lx));
    put(y0 + 1.0, x0 + 1.0, ly * lx);
}

/// Sample a `[C, H, W]` map at `P` fractional points, giving `[C, P]`.
/// Points are rows of `(y, x)`. Differentiable in both the map values and
/// the point coordinates.
#[derive(Debug)]
pub struct BilinearSample;

impl TapeOp for BilinearSample {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let [c, h, w] = inputs[0].shape() else {
            return Err(Error::shape(
                "bilinear_sample",
                format!("map must be [C, H, W], got {:?}", inputs[0].shape()),
            ));
        };
        let (c, h, w) = (*c, *h, *w);
        let pts = inputs[1];
        if pts.shape().len() != 2 || pts.shape()[1] != 2 {
            return Err(Error::shape(
                "bilinear_sample",
                format!("points must be [P, 2], got {:?}", pts.shape()),
            ));
        }
        let p = pts.shape()[0];
        let mut out = vec![0.0; c * p];
        for ci in 0..c {
            let plane = &inputs[0].data()[ci * h * w..(ci + 1) * h * w];
            for pi in 0..p {
                let y = pts.data()[pi * 2];
                let x = pts.data()[pi * 2 + 1];
                out[ci * p + pi] = bilinear_plane(plane, h, w, y, x).0;
            }
        }
        Tensor::new(vec![c, p], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let (c, h, w) = {
            let s = inputs[0].shape();
            (s[0], s[1], s[2])
        };
        let pts = inputs[1];
        let p = pts.shape()[0];
        let mut g_map = vec![0.0; inputs[0].len()];
        let mut g_pts = vec![0.0; pts.len()];
        for ci in 0..c {
            let plane = &inputs[0].data()[ci * h * w..(ci + 1) * h * w];
            for pi in 0..p {
                let g = out_grad[ci * p + pi];
                if g == 0.0 {
                    continue;
                }
                let y = pts.data()[pi * 2];
                let x = pts.data()[pi * 2 + 1];
                let (_, dvdy, dvdx) = bilinear_plane(plane, h, w, y, x);
                scatter_bilinear(&mut g_map[ci * h * w..(ci + 1) * h * w], h, w, y, x, g);
                g_pts[pi * 2] += g * dvdy;
                g_pts[pi * 2 + 1] += g * dvdx;
            }
        }
        vec![g_map, g_pts]
    }
}

/// 3x3 deformable convolution with stride 1 and padding 1: every kernel tap
/// samples the input at its regular location displaced by a learned offset.
///
/// Inputs are `x [C_in, H, W]`, `offsets [18, H, W]`, `weight
/// [C_out, C_in, 3, 3]`, and optionally `bias [C_out]`. For the tap at
/// kernel position `(ky, kx)` let `bin = ky*3 + kx`; offset channel `2*bin`
/// holds the row displacement and `2*bin + 1` the column displacement, both
/// indexed at the output position.
#[derive(Debug)]
pub struct DeformConv2d;

const K: usize = 3;
const PAD: isize = 1;

impl DeformConv2d {
    fn check(&self, inputs: &[&Tensor]) -> Result<(usize, usize, usize, usize)> {
        if inputs.len() != 3 && inputs.len() != 4 {
            return Err(Error::shape(
                "deform_conv2d",
                format!(
                    "expected input, offsets, weight[, bias], got {} tensors",
                    inputs.len()
                ),
            ));
        }
        let [cin, h, w] = inputs[0].shape() else {
            return Err(Error::shape(
                "deform_conv2d",
                format!("input must be [C, H, W], got {:?}", inputs[0].shape()),
            ));
        };
        let (cin, h, w) = (*cin, *h, *w);
        if inputs[1].shape() != [2 * K * K, h, w] {
            return Err(Error::shape(
                "deform_conv2d",
                format!(
                    "offsets must be [{}, {h}, {w}], got {:?}",
                    2 * K * K,
                    inputs[1].shape()
                ),
            ));
        }
        let [cout, wcin, kh, kw] = inputs[2].shape() else {
            return Err(Error::shape(
                "deform_conv2d",
                format!("weight must be 4-d, got {:?}", inputs[2].shape()),
            ));
        };
        if *wcin != cin || *kh != K || *kw != K {
            return Err(Error::shape(
                "deform_conv2d",
                format!(
                    "weight must be [C_out, {cin}, {K}, {K}], got {:?}",
                    inputs[2].shape()
                ),
            ));
        }
        if let Some(b) = inputs.get(3) {
            if b.shape() != [*cout] {
                return Err(Error::shape(
                    "deform_conv2d",
                    format!("bias must be [{cout}], got {:?}", b.shape()),
                ));
            }
        }
        Ok((cin, h, w, *cout))
    }
}

impl TapeOp for DeformConv2d {
    fn name(&self) -> &'static str {
        "deform_conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (cin, h, w, cout) = self.check(inputs)?;
        let x = inputs[0].data();
        let off = inputs[1].data();
        let wt = inputs[2].data();
        let bias = inputs.get(3).map(|b| b.data());

        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..w {
                    // Same accumulation order as the dense convolution: bias
                    // first, then (ci, ky, kx). With zero offsets each sample
                    // is an exact lattice read, so the sums agree bitwise.
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        let plane = &x[ci * h * w..(ci + 1) * h * w];
                        for bin in 0..K * K {
                            let (ky, kx) = (bin / K, bin % K);
                            let dy = off[(2 * bin * h + oy) * w + ox];
                            let dx = off[((2 * bin + 1) * h + oy) * w + ox];
                            let sy = (oy + ky) as f64 - PAD as f64 + dy;
                            let sx = (ox + kx) as f64 - PAD as f64 + dx;
                            let v = bilinear_plane(plane, h, w, sy, sx).0;
                            acc += wt[((co * cin + ci) * K + ky) * K + kx] * v;
                        }
                    }
                    out[(co * h + oy) * w + ox] = acc;
                }
            }
        }
        Tensor::new(vec![cout, h, w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let (cin, h, w) = {
            let s = inputs[0].shape();
            (s[0], s[1], s[2])
        };
        let cout = inputs[2].shape()[0];
        let x = inputs[0].data();
        let off = inputs[1].data();
        let wt = inputs[2].data();

        let mut gx = vec![0.0; inputs[0].len()];
        let mut goff = vec![0.0; inputs[1].len()];
        let mut gw = vec![0.0; inputs[2].len()];
        let mut gb = inputs.get(3).map(|b| vec![0.0; b.len()]);

        for oy in 0..h {
            for ox in 0..w {
                if let Some(gb) = gb.as_mut() {
                    for co in 0..cout {
                        gb[co] += out_grad[(co * h + oy) * w + ox];
                    }
                }
                for ci in 0..cin {
                    let plane = &x[ci * h * w..(ci + 1) * h * w];
                    let gplane = &mut gx[ci * h * w..(ci + 1) * h * w];
                    for bin in 0..K * K {
                        let (ky, kx) = (bin / K, bin % K);
                        let dy = off[(2 * bin * h + oy) * w + ox];
                        let dx = off[((2 * bin + 1) * h + oy) * w + ox];
                        let sy = (oy + ky) as f64 - PAD as f64 + dy;
                        let sx = (ox + kx) as f64 - PAD as f64 + dx;
                        let (v, dvdy, dvdx) = bilinear_plane(plane, h, w, sy, sx);

                        // Fold the output grads of all out channels through
                        // their kernel weights once per sample point.
                        let mut g_through_w = 0.0;
                        for co in 0..cout {
                            let g = out_grad[(co * h + oy) * w + ox];
                            if g == 0.0 {
                                continue;
                            }
                            gw[((co * cin + ci) * K + ky) * K + kx] += g * v;
                            g_through_w += g * wt[((co * cin + ci) * K + ky) * K + kx];
                        }
                        if g_through_w != 0.0 {
                            scatter_bilinear(gplane, h, w, sy, sx, g_through_w);
                            goff[(2 * bin * h + oy) * w + ox] += g_through_w * dvdy;
                            goff[((2 * bin + 1) * h + oy) * w + ox] += g_through_w * dvdx;
                        }
                    }
                }
            }
        }

        let mut grads = vec![gx, goff, gw];
        if let Some(gb) = gb {
            grads.push(gb);
        }
        grads
    }
}

impl Tape {
    pub fn bilinear_sample(&mut self, map: VarId, points: VarId) -> Result<VarId> {
        self.apply(Box::new(BilinearSample), &[map, points])
    }

    pub fn deform_conv2d(
        &mut self,
        x: VarId,
        offsets: VarId,
        weight: VarId,
        bias: Option<VarId>,
    ) -> Result<VarId> {
        match bias {
            Some(b) => self.apply(Box::new(DeformConv2d), &[x, offsets, weight, b]),
            None => self.apply(Box::new(DeformConv2d), &[x, offsets, weight]),
        }
    }
}
