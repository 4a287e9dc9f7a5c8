//! Shape arithmetic shared by the kernels.

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (right-aligned, size-1 dims stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat index of the element of `shape`
/// that broadcasts onto it.
pub fn broadcast_index(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let in_strides = strides(shape);
    // Stride 0 on broadcast (or missing) dimensions.
    let mut eff = vec![0; rank];
    for i in 0..rank {
        if i + shape.len() >= rank {
            let j = i + shape.len() - rank;
            if shape[j] != 1 {
                eff[i] = in_strides[j];
            }
        }
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        idx.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += eff[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Iteration plan for a broadcast binary op: adjacent dimensions that stay
/// contiguous for both operands are merged and size-1 dimensions dropped.
#[derive(Debug, Clone)]
pub struct BroadcastPlan {
    dims: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    len: usize,
}

impl BroadcastPlan {
    /// `out` must be the broadcast of `a` and `b`.
    pub fn new(a: &[usize], b: &[usize], out: &[usize]) -> Self {
        let rank = out.len();
        let eff = |shape: &[usize]| {
            let st = strides(shape);
            let mut e = vec![0; rank];
            for i in 0..rank {
                if i + shape.len() >= rank {
                    let j = i + shape.len() - rank;
                    if shape[j] != 1 {
                        e[i] = st[j];
                    }
                }
            }
            e
        };
        let (ea, eb) = (eff(a), eff(b));
        let (mut dims, mut sa, mut sb): (Vec<usize>, Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..rank {
            if out[i] == 1 {
                continue;
            }
            if let Some(j) = dims.len().checked_sub(1) {
                if sa[j] == ea[i] * out[i] && sb[j] == eb[i] * out[i] {
                    dims[j] *= out[i];
                    sa[j] = ea[i];
                    sb[j] = eb[i];
                    continue;
                }
            }
            dims.push(out[i]);
            sa.push(ea[i]);
            sb.push(eb[i]);
        }
        Self {
            dims,
            sa,
            sb,
            len: out.iter().product(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element, in
    /// increasing `out_index` order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.len == 0 {
            return;
        }
        let Some(r) = self.dims.len().checked_sub(1) else {
            f(0, 0, 0);
            return;
        };
        let (inner, ia, ib) = (self.dims[r], self.sa[r], self.sb[r]);
        let mut counter = vec![0usize; r];
        let (mut oa, mut ob, mut io) = (0usize, 0usize, 0usize);
        for _ in 0..self.len / inner {
            match (ia, ib) {
                (1, 1) => (0..inner).for_each(|k| f(io + k, oa + k, ob + k)),
                (1, 0) => (0..inner).for_each(|k| f(io + k, oa + k, ob)),
                (0, 1) => (0..inner).for_each(|k| f(io + k, oa, ob + k)),
                _ => (0..inner).for_each(|k| f(io + k, oa + k * ia, ob + k * ib)),
            }
            io += inner;
            for d in (0..r).rev() {
                counter[d] += 1;
                oa += self.sa[d];
                ob += self.sb[d];
                if counter[d] < self.dims[d] {
                    break;
                }
                oa -= self.sa[d] * self.dims[d];
                ob -= self.sb[d] * self.dims[d];
                counter[d] = 0;
            }
        }
    }
}

/// Sums a gradient of `out_shape` down to `shape` (the adjoint of broadcasting).
pub fn reduce_to(grad: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return grad.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    if n == 1 {
        out[0] = grad.iter().sum();
        return out;
    }
    for (g, &i) in grad.iter().zip(&broadcast_index(shape, out_shape)) {
        out[i] += g;
    }
    out
}

/// Gathers `data` (of `shape`) onto `out_shape`.
pub fn expand(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    if data.len() == 1 {
        return vec![data[0]; out_shape.iter().product()];
    }
    broadcast_index(shape, out_shape).into_iter().map(|i| data[i]).collect()
}
