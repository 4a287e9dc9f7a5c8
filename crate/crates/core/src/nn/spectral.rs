//! Spectrally normalized convolution and fully connected layers.
//!
//! Each forward pass in training mode advances one power-iteration step on the
//! persistent `(u, v)` pair and divides the weight by `σ̂ = uᵀ W v`, treating
//! `u` and `v` as constants. Under [`freeze_power_iteration`] the stored
//! vectors are reused unchanged, which makes forward passes pure functions of
//! the weights (needed for finite-difference checks and evaluation).

use std::cell::{Cell, RefCell};

use exemplar_tensor::{Param, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::nn::module::{join, Buffer, Module};

pub const SIGMA_FLOOR: f64 = 1e-12;
const INIT_POWER_STEPS: usize = 15;
const NORM_FLOOR: f64 = 1e-12;

thread_local! {
    static POWER_ITERATION: Cell<bool> = const { Cell::new(true) };
}

pub struct FreezeGuard {
    prev: bool,
}

impl Drop for FreezeGuard {
    fn drop(&mut self) {
        POWER_ITERATION.with(|c| c.set(self.prev));
    }
}

/// Stops power-iteration updates on this thread until the guard drops.
pub fn freeze_power_iteration() -> FreezeGuard {
    FreezeGuard {
        prev: POWER_ITERATION.with(|c| c.replace(false)),
    }
}

fn power_iteration_enabled() -> bool {
    POWER_ITERATION.with(|c| c.get())
}

/// Normalizes in place; a (near-)zero vector is left untouched and reported.
fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < NORM_FLOOR {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

pub(crate) fn random_unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    if !normalize(&mut v) {
        v = vec![0.0; n];
        v[0] = 1.0;
    }
    v
}

/// Result of one spectral-normalization step.
pub struct SpectralStep {
    /// `w / σ̂`, differentiable with respect to `w`.
    pub weight: Tensor,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
}

/// One power-iteration step on `w` viewed as `[out, rest]`, starting from `u`.
/// `v_prev` is kept when `Wᵀu` vanishes.
pub fn spectral_normalize(w: &Tensor, u: &[f64], v_prev: Option<&[f64]>) -> Result<SpectralStep> {
    let (rows, cols) = matrix_dims(w)?;
    if u.len() != rows {
        return Err(invalid(format!("power-iteration vector has {} entries, weight has {rows} rows", u.len())));
    }
    let wd = w.data();
    let mut v: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| wd[r * cols + c] * u[r]).sum()).collect();
    if !normalize(&mut v) {
        v = v_prev.map(<[f64]>::to_vec).unwrap_or_else(|| {
            let mut e = vec![0.0; cols];
            e[0] = 1.0;
            e
        });
    }
    let mut u_next: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| wd[r * cols + c] * v[c]).sum()).collect();
    if !normalize(&mut u_next) {
        u_next = u.to_vec();
    }
    let (weight, sigma) = divide_by_sigma(w, &u_next, &v)?;
    Ok(SpectralStep {
        weight,
        u: u_next,
        v,
        sigma,
    })
}

fn matrix_dims(w: &Tensor) -> Result<(usize, usize)> {
    let rows = *w.shape().first().ok_or_else(|| invalid("spectral norm of a scalar"))?;
    if rows == 0 {
        return Err(invalid("spectral norm of an empty weight"));
    }
    Ok((rows, w.numel() / rows))
}

/// `w / max(uᵀ W v, floor)` with `u`, `v` held constant.
fn divide_by_sigma(w: &Tensor, u: &[f64], v: &[f64]) -> Result<(Tensor, f64)> {
    let (rows, cols) = matrix_dims(w)?;
    let outer: Vec<f64> = (0..rows).flat_map(|r| v.iter().map(move |c| u[r] * c)).collect();
    let outer = Tensor::new(outer, w.shape())?;
    let sigma = w.mul(&outer)?.sum_all()?.clamp_min(SIGMA_FLOOR);
    let value = sigma.item();
    debug_assert_eq!(rows * cols, w.numel());
    Ok((w.div(&sigma)?, value))
}

/// Weight with optional spectral normalization and its persistent state.
#[derive(Debug)]
struct Weight {
    param: Param,
    spectral: Option<(Buffer, Buffer)>,
}

impl Weight {
    fn new(rng: &mut impl Rng, shape: &[usize], fan_in: usize, spectral: bool, zero: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let data: Vec<f64> = if zero {
            vec![0.0; n]
        } else {
            (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
        };
        let param = Param::new(data, shape)?;
        let spectral = if spectral {
            let rows = shape[0];
            let mut u = random_unit(rng, rows);
            let mut v = random_unit(rng, n / rows);
            // Start from a settled estimate so a frozen forward is well scaled.
            let w = param.get().detach();
            for _ in 0..INIT_POWER_STEPS {
                let step = spectral_normalize(&w, &u, Some(&v))?;
                (u, v) = (step.u, step.v);
            }
            Some((RefCell::new(u), RefCell::new(v)))
        } else {
            None
        };
        Ok(Self { param, spectral })
    }

    fn effective(&self) -> Result<Tensor> {
        let w = self.param.get();
        let Some((u, v)) = &self.spectral else {
            return Ok(w);
        };
        if power_iteration_enabled() {
            let step = spectral_normalize(&w, &u.borrow(), Some(&v.borrow()))?;
            *u.borrow_mut() = step.u;
            *v.borrow_mut() = step.v;
            Ok(step.weight)
        } else {
            Ok(divide_by_sigma(&w, &u.borrow(), &v.borrow())?.0)
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        if let Some((u, v)) = &self.spectral {
            out.push((join(prefix, "sn_u"), u));
            out.push((join(prefix, "sn_v"), v));
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
    pub spectral: bool,
    pub zero_init: bool,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            kernel: 3,
            stride: 1,
            groups: 1,
            bias: true,
            spectral: true,
            zero_init: false,
        }
    }
}

impl ConvOpts {
    pub fn kernel(mut self, k: usize) -> Self {
        self.kernel = k;
        self
    }
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }
    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
    pub fn plain(mut self) -> Self {
        self.spectral = false;
        self
    }
    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }
}

/// 2-D convolution over `[C, H, W]` with "same" zero padding (`k / 2`).
#[derive(Debug)]
pub struct Conv2d {
    weight: Weight,
    bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    opts: ConvOpts,
}

impl Conv2d {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, opts: ConvOpts) -> Result<Self> {
        if opts.groups == 0 || cin % opts.groups != 0 || cout % opts.groups != 0 {
            return Err(invalid(format!("conv {cin}->{cout} not divisible into {} groups", opts.groups)));
        }
        let k = opts.kernel;
        let cpg = cin / opts.groups;
        let weight = Weight::new(rng, &[cout, cpg, k, k], cpg * k * k, opts.spectral, opts.zero_init)?;
        let bias = opts.bias.then(|| Param::zeros(&[cout]));
        Ok(Self {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            opts,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.effective()?;
        let y = x.conv2d(&w, self.opts.groups, self.opts.stride, self.opts.kernel / 2)?;
        match &self.bias {
            Some(b) => Ok(y.add(&b.get().reshape(&[self.out_channels, 1, 1])?)?),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> &Param {
        &self.weight.param
    }

    pub fn bias(&self) -> Option<&Param> {
        self.bias.as_ref()
    }

    /// The weight actually applied in the next frozen forward pass.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let _g = freeze_power_iteration();
        self.weight.effective()
    }

    pub fn is_spectral(&self) -> bool {
        self.weight.spectral.is_some()
    }
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight.param));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.weight.visit_buffers(prefix, out);
    }
}

/// Fully connected layer mapping `[n_in]` (or `[1, n_in]`) to `[n_out]`.
#[derive(Debug)]
pub struct Linear {
    weight: Weight,
    bias: Param,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, n_in: usize, n_out: usize, spectral: bool) -> Result<Self> {
        Ok(Self {
            weight: Weight::new(rng, &[n_out, n_in], n_in, spectral, false)?,
            bias: Param::zeros(&[n_out]),
            n_in,
            n_out,
        })
    }

    /// Overwrites the bias, e.g. to start a modulation scale at 1.
    pub fn set_bias(&self, values: Vec<f64>) -> Result<()> {
        Ok(self.bias.set_data(values)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() != self.n_in {
            return Err(invalid(format!("linear expects {} inputs, got {:?}", self.n_in, x.shape())));
        }
        let w = self.weight.effective()?;
        let y = x.reshape(&[1, self.n_in])?.matmul(&w.t()?)?.reshape(&[self.n_out])?;
        Ok(y.add(&self.bias.get())?)
    }

    pub fn weight(&self) -> &Param {
        &self.weight.param
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight.param));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.weight.visit_buffers(prefix, out);
    }
}
