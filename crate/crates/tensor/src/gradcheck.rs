//! Central finite-difference gradient verification.

use crate::error::{Result, TensorError};
use crate::param::Param;
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_of(t: &Tensor, what: &'static str) -> Result<f64> {
    if t.numel() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite(what));
    }
    Ok(v)
}

/// Max relative error between the reverse-mode gradient of the scalar
/// function `f` at `x` and its central finite-difference estimate.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = x.requires_grad_(true);
    let y = f(&leaf)?;
    scalar_of(&y, "gradcheck forward")?;
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite("analytic gradient"));
    }

    let _guard = no_grad();
    let mut worst = 0.0f64;
    let mut buf = x.to_vec();
    for i in 0..buf.len() {
        let orig = buf[i];
        buf[i] = orig + eps;
        let fp = scalar_of(&f(&Tensor::new(buf.clone(), x.shape())?)?, "gradcheck +eps")?;
        buf[i] = orig - eps;
        let fm = scalar_of(&f(&Tensor::new(buf.clone(), x.shape())?)?, "gradcheck -eps")?;
        buf[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Like [`gradcheck`] but perturbs trainable parameters in place. At most
/// `max_per_param` evenly spaced components of each parameter are probed.
pub fn gradcheck_params<F>(mut f: F, params: &[&Param], eps: f64, max_per_param: Option<usize>) -> Result<f64>
where
    F: FnMut() -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let y = f()?;
    scalar_of(&y, "gradcheck forward")?;
    y.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let _guard = no_grad();
    let mut worst = 0.0f64;
    for (p, grad) in params.iter().zip(&analytic) {
        let n = p.numel();
        let step = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let mut data = p.data();
        for i in (0..n).step_by(step) {
            let orig = data[i];
            data[i] = orig + eps;
            p.set_data(data.clone())?;
            let fp = scalar_of(&f()?, "gradcheck +eps")?;
            data[i] = orig - eps;
            p.set_data(data.clone())?;
            let fm = scalar_of(&f()?, "gradcheck -eps")?;
            data[i] = orig;
            p.set_data(data.clone())?;
            worst = worst.max(relative_error(grad[i], (fp - fm) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
