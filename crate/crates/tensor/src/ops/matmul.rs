use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `c (+)= a · b` on raw row-major buffers with explicit strides, so transposed
/// operands cost nothing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n) and a
    // dense row-major `c` (m×n); callers size the buffers accordingly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn check_gemm_bounds(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n);
}

impl Tensor {
    /// 2-D matrix product `[M×K] · [K×N]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        check_gemm_bounds(m, k, n, self.data(), rhs.data());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), (k, 1), rhs.data(), (n, 1), &mut out, false);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(out, vec![m, n], &[self, rhs], move |g, need| {
            let ga = need[0].then(|| {
                // dA = dC · Bᵀ
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), b.data(), (1, n), &mut ga, false);
                ga
            });
            let gb = need[1].then(|| {
                // dB = Aᵀ · dC
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k), g, (n, 1), &mut gb, false);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(crate::error::invalid("t", format!("expected rank 2, got {:?}", self.shape())));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = transpose_buf(self.data(), r, c);
        Ok(Tensor::from_op(out, vec![c, r], &[self], move |g, _| vec![Some(transpose_buf(g, c, r))]))
    }
}

pub(crate) fn transpose_buf(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
