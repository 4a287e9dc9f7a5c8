use crate::error::{invalid, Result, TensorError};
use crate::shape::BroadcastPlan;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population variance (divides by N).
    Var,
    Max,
    Min,
}

/// Reduces `x` over `axes`. Reduced dimensions are kept as size 1 when
/// `keepdim` is set, which makes the result broadcast back against `x`.
pub fn reduce(op: ReduceOp, x: &Tensor, axes: &[usize], keepdim: bool) -> Result<Tensor> {
    let shape = x.shape();
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(TensorError::Axis { axis: a, rank: shape.len() });
        }
        if reduced[a] {
            return Err(invalid("reduce", format!("axis {a} listed twice")));
        }
        reduced[a] = true;
    }
    let keep_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let count: usize = shape.iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
    if count == 0 || x.numel() == 0 {
        return Err(invalid("reduce", "empty reduction"));
    }
    let final_shape: Vec<usize> = if keepdim {
        keep_shape.clone()
    } else {
        shape.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect()
    };
    let n_out: usize = keep_shape.iter().product();
    // map[i] is the output slot of input element i
    let mut map = Vec::with_capacity(x.numel());
    if n_out == 1 {
        map.resize(x.numel(), 0);
    } else {
        BroadcastPlan::new(&keep_shape, shape, shape).for_each(|_, o, _| map.push(o));
    }
    let xd = x.data();
    let nf = count as f64;

    match op {
        ReduceOp::Sum | ReduceOp::Mean => {
            let mut out = vec![0.0; n_out];
            for (v, &o) in xd.iter().zip(&map) {
                out[o] += v;
            }
            let scale = if op == ReduceOp::Mean { 1.0 / nf } else { 1.0 };
            if scale != 1.0 {
                out.iter_mut().for_each(|v| *v *= scale);
            }
            Ok(Tensor::from_op(out, final_shape, &[x], move |g, _| {
                vec![Some(map.iter().map(|&o| g[o] * scale).collect())]
            }))
        }
        ReduceOp::Var => {
            let mut mean = vec![0.0; n_out];
            for (v, &o) in xd.iter().zip(&map) {
                mean[o] += v;
            }
            mean.iter_mut().for_each(|m| *m /= nf);
            let mut out = vec![0.0; n_out];
            for (v, &o) in xd.iter().zip(&map) {
                let d = v - mean[o];
                out[o] += d * d;
            }
            out.iter_mut().for_each(|v| *v /= nf);
            let xs = x.clone();
            Ok(Tensor::from_op(out, final_shape, &[x], move |g, _| {
                vec![Some(
                    xs.data()
                        .iter()
                        .zip(&map)
                        .map(|(v, &o)| g[o] * 2.0 * (v - mean[o]) / nf)
                        .collect(),
                )]
            }))
        }
        ReduceOp::Max | ReduceOp::Min => {
            let better = |a: f64, b: f64| if op == ReduceOp::Max { a > b } else { a < b };
            let mut out = vec![f64::NAN; n_out];
            let mut arg = vec![usize::MAX; n_out];
            for (i, (&v, &o)) in xd.iter().zip(&map).enumerate() {
                // First occurrence wins ties.
                if arg[o] == usize::MAX || better(v, out[o]) {
                    out[o] = v;
                    arg[o] = i;
                }
            }
            let n_in = xd.len();
            Ok(Tensor::from_op(out, final_shape, &[x], move |g, _| {
                let mut dx = vec![0.0; n_in];
                for (o, &i) in arg.iter().enumerate() {
                    dx[i] += g[o];
                }
                vec![Some(dx)]
            }))
        }
    }
}

impl Tensor {
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        reduce(ReduceOp::Sum, self, axes, keepdim)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        reduce(ReduceOp::Mean, self, axes, keepdim)
    }

    pub fn var_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        reduce(ReduceOp::Var, self, axes, keepdim)
    }

    pub fn max_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        reduce(ReduceOp::Max, self, axes, keepdim)
    }

    pub fn min_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        reduce(ReduceOp::Min, self, axes, keepdim)
    }

    fn all_axes(&self) -> Vec<usize> {
        (0..self.rank()).collect()
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return Ok(self.clone());
        }
        self.sum_axes(&self.all_axes(), false)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return Ok(self.clone());
        }
        self.mean_axes(&self.all_axes(), false)
    }

    pub fn max_all(&self) -> Result<Tensor> {
        if self.rank() == 0 {
            return Ok(self.clone());
        }
        self.max_axes(&self.all_axes(), false)
    }
}
