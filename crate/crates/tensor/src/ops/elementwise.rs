use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Result, TensorError};
use crate::shape::{broadcast_shape, BroadcastPlan};
use crate::tensor::Tensor;

/// Operation tags accepted by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Relu,
    Gelu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Neg,
}

impl ElementOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div | Self::Pow)
    }
}

/// Tag-dispatched entry point; `b` is required for binary tags and ignored otherwise.
pub fn elementwise(op: ElementOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if op.is_binary() {
        let b = b.ok_or_else(|| crate::error::invalid("elementwise", format!("{op:?} needs two operands")))?;
        return match op {
            ElementOp::Add => a.add(b),
            ElementOp::Sub => a.sub(b),
            ElementOp::Mul => a.mul(b),
            ElementOp::Div => a.div(b),
            _ => a.pow(b),
        };
    }
    match op {
        ElementOp::Relu => Ok(a.relu()),
        ElementOp::Gelu => Ok(a.gelu()),
        ElementOp::Sigmoid => Ok(a.sigmoid()),
        ElementOp::Exp => Ok(a.exp()),
        ElementOp::Log => a.log(),
        ElementOp::Sqrt => a.sqrt(),
        _ => Ok(a.neg()),
    }
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

impl Tensor {
    fn binary(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // (a, b, g) -> (da, db)
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })?;
        let (a, b) = (self.data(), rhs.data());
        let plan = (self.shape() != rhs.shape()).then(|| BroadcastPlan::new(self.shape(), rhs.shape(), &out_shape));
        let out: Vec<f64> = match &plan {
            None => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Some(plan) => {
                let mut out = Vec::with_capacity(plan.len());
                plan.for_each(|_, ia, ib| out.push(f(a[ia], b[ib])));
                out
            }
        };
        let (ta, tb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(out, out_shape, &[self, rhs], move |g, need| {
            let (a, b) = (ta.data(), tb.data());
            match &plan {
                None => vec![
                    need[0].then(|| g.iter().zip(a.iter().zip(b)).map(|(&g, (&x, &y))| df(x, y, g).0).collect()),
                    need[1].then(|| g.iter().zip(a.iter().zip(b)).map(|(&g, (&x, &y))| df(x, y, g).1).collect()),
                ],
                Some(plan) => {
                    let mut ga = need[0].then(|| vec![0.0; a.len()]);
                    let mut gb = need[1].then(|| vec![0.0; b.len()]);
                    plan.for_each(|io, ia, ib| {
                        let (da, db) = df(a[ia], b[ib], g[io]);
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] += da;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] += db;
                        }
                    });
                    vec![ga, gb]
                }
            }
        }))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, "div", |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    /// `self ^ rhs`. Negative bases need integral exponents.
    pub fn pow(&self, rhs: &Tensor) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: "pow",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })?;
        let (a, b) = (self.data(), rhs.data());
        let mut bad = None;
        BroadcastPlan::new(self.shape(), rhs.shape(), &out_shape).for_each(|_, ia, ib| {
            if bad.is_none() && a[ia] < 0.0 && b[ib].fract() != 0.0 {
                bad = Some(a[ia]);
            }
        });
        if let Some(value) = bad {
            return Err(TensorError::Domain { op: "pow", value });
        }
        self.binary(rhs, "pow", f64::powf, |a, b, g| {
            let da = if b == 0.0 { 0.0 } else { g * b * a.powf(b - 1.0) };
            let db = if a > 0.0 { g * a.powf(b) * a.ln() } else { 0.0 };
            (da, db)
        })
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let saved = out.clone();
        Tensor::from_op(out, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().zip(x.data().iter().zip(&saved)).map(|(g, (&x, &y))| g * df(x, y)).collect())]
        })
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
        let x = self.clone();
        Tensor::from_op(out, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().zip(x.data()).map(|(g, &x)| if x > 0.0 { *g } else { slope * g }).collect())]
        })
    }

    /// Exact (erf) GELU.
    pub fn gelu(&self) -> Tensor {
        self.unary(gelu_fwd, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    /// Subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(&v) = self.data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain { op: "log", value: v });
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    /// The gradient at exactly 0 is taken as 0.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(&v) = self.data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain { op: "sqrt", value: v });
        }
        Ok(self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 }))
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(move |x| x.powf(p), move |x, _| if p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let x = self.clone();
        Tensor::from_op(out, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                    .collect(),
            )]
        })
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        self.clamp(lo, f64::INFINITY)
    }

    /// `self * scale + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x * scale + shift).collect();
        Tensor::from_op(out, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().map(|g| g * scale).collect())]
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.affine(c, 0.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.affine(1.0, c)
    }
}
