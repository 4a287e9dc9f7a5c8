use crate::error::{invalid, Result, TensorError};
use crate::ops::matmul::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    groups: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn cpg(&self) -> usize {
        self.cin / self.groups
    }
    fn opg(&self) -> usize {
        self.cout / self.groups
    }
    fn rows(&self) -> usize {
        self.cpg() * self.k * self.k
    }
    fn pix(&self) -> usize {
        self.ho * self.wo
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds the channels of group `gi` into a `[cpg·k·k, ho·wo]` matrix.
fn im2col(x: &[f64], g: &Geom, gi: usize) -> Vec<f64> {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let mut cols = vec![0.0; g.rows() * g.pix()];
    for c in 0..g.cpg() {
        let plane = &x[(gi * g.cpg() + c) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * g.pix()..][..g.pix()];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    let dst = &mut row[oy * g.wo..][..g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto group `gi` of `dx`.
fn col2im(cols: &[f64], g: &Geom, gi: usize, dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.cpg() {
        let plane = &mut dx[(gi * g.cpg() + c) * g.h * g.w..][..g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * g.pix()..][..g.pix()];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    for (ox, v) in row[oy * g.wo..][..g.wo].iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Grouped 2-D cross-correlation of a `[C_in, H, W]` input with a
    /// `[C_out, C_in/groups, k, k]` kernel under zero padding. No bias.
    pub fn conv2d(&self, weight: &Tensor, groups: usize, stride: usize, pad: usize) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, cpg, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cpg {
            return Err(invalid(
                "conv2d",
                format!("channel/group mismatch: input {cin}, weight {ws:?}, groups {groups}"),
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(invalid("conv2d", "kernel larger than padded input or zero stride"));
        }
        let g = Geom {
            cin,
            h,
            w,
            cout,
            k,
            groups,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };

        let mut out = vec![0.0; cout * g.pix()];
        let mut saved_cols = Vec::with_capacity(groups);
        for gi in 0..groups {
            let wg = &weight.data()[gi * g.opg() * g.rows()..][..g.opg() * g.rows()];
            let og = &mut out[gi * g.opg() * g.pix()..][..g.opg() * g.pix()];
            if g.pointwise() {
                let xg = &self.data()[gi * g.cpg() * g.pix()..][..g.cpg() * g.pix()];
                gemm(g.opg(), g.rows(), g.pix(), wg, (g.rows(), 1), xg, (g.pix(), 1), og, false);
            } else {
                let cols = im2col(self.data(), &g, gi);
                gemm(g.opg(), g.rows(), g.pix(), wg, (g.rows(), 1), &cols, (g.pix(), 1), og, false);
                saved_cols.push(cols);
            }
        }

        let (x, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(out, vec![cout, g.ho, g.wo], &[self, weight], move |dout, need| {
            let mut dx = need[0].then(|| vec![0.0; cin * h * w]);
            let mut dw = need[1].then(|| vec![0.0; wt.numel()]);
            for gi in 0..groups {
                let dg = &dout[gi * g.opg() * g.pix()..][..g.opg() * g.pix()];
                let cols: &[f64] = if g.pointwise() {
                    &x.data()[gi * g.cpg() * g.pix()..][..g.cpg() * g.pix()]
                } else {
                    &saved_cols[gi]
                };
                if let Some(dw) = dw.as_mut() {
                    // dW_g = dOut_g · colsᵀ
                    let dwg = &mut dw[gi * g.opg() * g.rows()..][..g.opg() * g.rows()];
                    gemm(g.opg(), g.pix(), g.rows(), dg, (g.pix(), 1), cols, (1, g.pix()), dwg, false);
                }
                if let Some(dx) = dx.as_mut() {
                    // dCols = W_gᵀ · dOut_g
                    let wg = &wt.data()[gi * g.opg() * g.rows()..][..g.opg() * g.rows()];
                    if g.pointwise() {
                        let dxg = &mut dx[gi * g.cpg() * g.pix()..][..g.cpg() * g.pix()];
                        gemm(g.rows(), g.opg(), g.pix(), wg, (1, g.rows()), dg, (g.pix(), 1), dxg, false);
                    } else {
                        let mut dcols = vec![0.0; g.rows() * g.pix()];
                        gemm(g.rows(), g.opg(), g.pix(), wg, (1, g.rows()), dg, (g.pix(), 1), &mut dcols, false);
                        col2im(&dcols, &g, gi, dx);
                    }
                }
            }
            vec![dx, dw]
        }))
    }
}
