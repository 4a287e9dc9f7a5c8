use exemplar_tensor::{Param, Tensor};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::module::{join, Buffer, Module};
use crate::nn::norm::{instance_normalize, instance_stats};
use crate::nn::spectral::{Conv2d, ConvOpts, Linear};

pub const MOD_SIGMA_FLOOR: f64 = 1e-5;

/// Spatial scale and bias applied to normalized features.
pub struct ModulationParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// `γ ⊙ (q − μ(q)) / σ(q) + β` with per-channel instance statistics.
pub fn modulate(q: &Tensor, params: &ModulationParams) -> Result<Tensor> {
    let (mu, sigma) = instance_stats(q, MOD_SIGMA_FLOOR)?;
    Ok(q.sub(&mu)?.div(&sigma)?.mul(&params.gamma)?.add(&params.beta)?)
}

/// Spatially adaptive modulation: a two-conv head predicts pixel-wise `γ`, `β`
/// from the conditioning image, average-pooled to the feature resolution.
#[derive(Debug)]
pub struct SpadeModulation {
    hidden: Conv2d,
    head: Conv2d,
    channels: usize,
}

impl SpadeModulation {
    pub fn new(rng: &mut impl Rng, channels: usize, cond_channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            hidden: Conv2d::new(rng, cond_channels, hidden, ConvOpts::default())?,
            head: Conv2d::new(rng, hidden, 2 * channels, ConvOpts::default())?,
            channels,
        })
    }

    pub fn params_for(&self, cond: &Tensor, h: usize, w: usize) -> Result<ModulationParams> {
        let [_, ch, cw] = *cond.shape() else {
            return Err(invalid(format!("conditioning image must be [C, H, W], got {:?}", cond.shape())));
        };
        if ch % h != 0 || cw % w != 0 || ch / h != cw / w {
            return Err(invalid(format!("cannot pool {ch}x{cw} conditioning image to {h}x{w}")));
        }
        let c = cond.avg_pool(ch / h)?;
        let gb = self.head.forward(&self.hidden.forward(&c)?.relu())?;
        Ok(ModulationParams {
            gamma: gb.narrow(0, 0, self.channels)?,
            beta: gb.narrow(0, self.channels, self.channels)?,
        })
    }

    pub fn forward(&self, q: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let [_, h, w] = *q.shape() else {
            return Err(invalid(format!("spade expects [C, H, W], got {:?}", q.shape())));
        };
        modulate(q, &self.params_for(cond, h, w)?)
    }
}

impl Module for SpadeModulation {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.hidden.visit_params(&join(prefix, "hidden"), out);
        self.head.visit_params(&join(prefix, "head"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.hidden.visit_buffers(&join(prefix, "hidden"), out);
        self.head.visit_buffers(&join(prefix, "head"), out);
    }
}

/// Channel-wise modulation from a global style code: one FC layer yields
/// `(scale_c, bias_c)`; the scale half of its bias starts at 1.
#[derive(Debug)]
pub struct AdaInModulation {
    fc: Linear,
    channels: usize,
}

impl AdaInModulation {
    pub fn new(rng: &mut impl Rng, channels: usize, style_dim: usize) -> Result<Self> {
        let fc = Linear::new(rng, style_dim, 2 * channels, true)?;
        let mut b = vec![1.0; channels];
        b.extend(std::iter::repeat(0.0).take(channels));
        fc.set_bias(b)?;
        Ok(Self { fc, channels })
    }

    /// `(scale, bias)`, each `[C, 1, 1]`.
    pub fn factors(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let sb = self.fc.forward(z)?;
        let c = self.channels;
        Ok((sb.narrow(0, 0, c)?.reshape(&[c, 1, 1])?, sb.narrow(0, c, c)?.reshape(&[c, 1, 1])?))
    }

    pub fn forward(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let (scale, bias) = self.factors(z)?;
        apply_adain(x, &scale, &bias)
    }
}

/// `scale_c · IN(x)_c + bias_c`.
pub fn apply_adain(x: &Tensor, scale: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(instance_normalize(x, MOD_SIGMA_FLOOR)?.mul(scale)?.add(bias)?)
}

impl Module for AdaInModulation {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.fc.visit_params(&join(prefix, "fc"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.fc.visit_buffers(&join(prefix, "fc"), out);
    }
}
