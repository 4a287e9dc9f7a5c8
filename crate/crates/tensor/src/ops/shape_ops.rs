use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::Axis { axis, rank: t.rank() });
    }
    Ok(())
}

fn check_chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(invalid(op, format!("expected [C, H, W], got {:?}", t.shape()))),
    }
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), &[self], |g, _| vec![Some(g.to_vec())]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis(self, axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..len {
                    m = m.max(x[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - m).exp();
                    y[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= s;
                }
            }
        }
        let saved = y.clone();
        Ok(Tensor::from_op(y, self.shape().to_vec(), &[self], move |g, _| {
            let mut dx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| g[base + j * inner] * saved[base + j * inner]).sum();
                    for j in 0..len {
                        let k = base + j * inner;
                        dx[k] = saved[k] * (g[k] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        check_axis(first, axis)?;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..][..l * inner]);
            }
        }
        Ok(Tensor::from_op(out, shape, parts, move |g, need| {
            let mut grads: Vec<Option<Vec<f64>>> =
                lens.iter().zip(need).map(|(&l, &n)| n.then(|| Vec::with_capacity(outer * l * inner))).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis(self, axis)?;
        let (outer, full, inner) = split_at_axis(self.shape(), axis);
        if start + len > full {
            return Err(invalid("narrow", format!("range {start}..{} exceeds {full}", start + len)));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&self.data()[(o * full + start) * inner..][..len * inner]);
        }
        let n_in = self.numel();
        Ok(Tensor::from_op(out, shape, &[self], move |g, _| {
            let mut dx = vec![0.0; n_in];
            for o in 0..outer {
                dx[(o * full + start) * inner..][..len * inner].copy_from_slice(&g[o * len * inner..][..len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    /// Pads the two spatial axes of `[C, H, W]` by repeating border pixels.
    pub fn pad_replicate(&self, pad: usize) -> Result<Tensor> {
        let (c, h, w) = check_chw(self, "pad_replicate")?;
        if h == 0 || w == 0 {
            return Err(invalid("pad_replicate", "empty spatial extent"));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src = |y: usize, x: usize| {
            let sy = y.saturating_sub(pad).min(h - 1);
            let sx = x.saturating_sub(pad).min(w - 1);
            sy * w + sx
        };
        let mut index = Vec::with_capacity(hp * wp);
        for y in 0..hp {
            for x in 0..wp {
                index.push(src(y, x));
            }
        }
        let mut out = Vec::with_capacity(c * hp * wp);
        for ch in 0..c {
            let plane = &self.data()[ch * h * w..][..h * w];
            out.extend(index.iter().map(|&i| plane[i]));
        }
        Ok(Tensor::from_op(out, vec![c, hp, wp], &[self], move |g, _| {
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for (k, &i) in index.iter().enumerate() {
                    dx[ch * h * w + i] += g[ch * hp * wp + k];
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Nearest-neighbour ×2 upsampling of `[C, H, W]`.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        let (c, h, w) = check_chw(self, "upsample_nearest2x")?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(ch * h2 + y) * w2 + x] = self.data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        Ok(Tensor::from_op(out, vec![c, h2, w2], &[self], move |g, _| {
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h2 {
                    for x in 0..w2 {
                        dx[(ch * h + y / 2) * w + x / 2] += g[(ch * h2 + y) * w2 + x];
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Non-overlapping `k×k` average pooling of `[C, H, W]`; H and W must be multiples of k.
    pub fn avg_pool(&self, k: usize) -> Result<Tensor> {
        let (c, h, w) = check_chw(self, "avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(invalid("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        if k == 1 {
            return Ok(self.clone());
        }
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * ho + y / k) * wo + x / k] += self.data()[(ch * h + y) * w + x] * inv;
                }
            }
        }
        Ok(Tensor::from_op(out, vec![c, ho, wo], &[self], move |g, _| {
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        dx[(ch * h + y) * w + x] = g[(ch * ho + y / k) * wo + x / k] * inv;
                    }
                }
            }
            vec![Some(dx)]
        }))
    }
}
