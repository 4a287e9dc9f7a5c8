use exemplar_tensor::{Param, Tensor};

use crate::error::{invalid, Result};
use crate::nn::module::{join, Module};

pub const PONO_EPS: f64 = 1e-5;

/// Positional normalization output: normalized features plus the per-position
/// statistics that were removed.
pub struct Pono {
    pub y: Tensor,
    /// `[1, H, W]` channel mean.
    pub mu: Tensor,
    /// `[1, H, W]` `sqrt(var + eps)`.
    pub sigma: Tensor,
}

/// Normalizes the channel vector at every position of `[C, H, W]` to zero mean
/// and unit (population) variance.
pub fn pono(x: &Tensor, eps: f64) -> Result<Pono> {
    if x.rank() != 3 || x.shape()[0] == 0 {
        return Err(invalid(format!("pono expects [C, H, W], got {:?}", x.shape())));
    }
    let mu = x.mean_axes(&[0], true)?;
    let sigma = x.var_axes(&[0], true)?.add_scalar(eps).sqrt()?;
    let y = x.sub(&mu)?.div(&sigma)?;
    Ok(Pono { y, mu, sigma })
}

/// Per-channel normalization over all positions of `[C, H, W]`. The standard
/// deviation is floored at `sigma_floor`.
pub fn instance_normalize(x: &Tensor, sigma_floor: f64) -> Result<Tensor> {
    let (mu, sigma) = instance_stats(x, sigma_floor)?;
    Ok(x.sub(&mu)?.div(&sigma)?)
}

/// `([C,1,1] mean, [C,1,1] floored std)`.
pub fn instance_stats(x: &Tensor, sigma_floor: f64) -> Result<(Tensor, Tensor)> {
    if x.rank() != 3 {
        return Err(invalid(format!("instance norm expects [C, H, W], got {:?}", x.shape())));
    }
    let mu = x.mean_axes(&[1, 2], true)?;
    let sigma = x.var_axes(&[1, 2], true)?.sqrt()?.clamp_min(sigma_floor);
    Ok((mu, sigma))
}

/// Fixed 2-D sinusoidal encoding `[C, H, W]`. Channel blocks of size C/4 hold
/// `sin(y·f)`, `cos(y·f)`, `sin(x·f)`, `cos(x·f)` with `f_i = 10000^(-i/(C/4))`.
pub fn positional_encoding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || c % 4 != 0 {
        return Err(invalid(format!("positional encoding needs channels divisible by 4, got {c}")));
    }
    let q = c / 4;
    let mut data = vec![0.0; c * h * w];
    for i in 0..q {
        let f = 10000f64.powf(-(i as f64) / q as f64);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 * f, x as f64 * f);
                let at = |ch: usize| (ch * h + y) * w + x;
                data[at(i)] = py.sin();
                data[at(i + q)] = py.cos();
                data[at(i + 2 * q)] = px.sin();
                data[at(i + 3 * q)] = px.cos();
            }
        }
    }
    Ok(Tensor::new(data, &[c, h, w])?)
}

/// LayerNorm over the channel axis at each position, with per-channel affine.
#[derive(Debug)]
pub struct ChannelLayerNorm {
    gamma: Param,
    beta: Param,
    channels: usize,
    eps: f64,
}

impl ChannelLayerNorm {
    pub fn new(channels: usize) -> Self {
        let gamma = Param::new(vec![1.0; channels], &[channels]).expect("shape matches data");
        Self {
            gamma,
            beta: Param::zeros(&[channels]),
            channels,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = pono(x, self.eps)?.y;
        let g = self.gamma.get().reshape(&[self.channels, 1, 1])?;
        let b = self.beta.get().reshape(&[self.channels, 1, 1])?;
        Ok(y.mul(&g)?.add(&b)?)
    }
}

impl Module for ChannelLayerNorm {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pono_hand_example() {
        let x = Tensor::new(vec![1.0, 3.0], &[2, 1, 1]).unwrap();
        let p = pono(&x, 0.0).unwrap();
        assert_eq!(p.y.data(), &[-1.0, 1.0]);
        assert_eq!(p.mu.data(), &[2.0]);
        assert_eq!(p.sigma.data(), &[1.0]);
    }

    #[test]
    fn pono_constant_position_is_zero() {
        let x = Tensor::full(&[4, 2, 2], 3.5);
        let p = pono(&x, PONO_EPS).unwrap();
        assert!(p.y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn positional_encoding_origin_and_range() {
        let pe = positional_encoding(5, 6, 8).unwrap();
        for ch in 0..8 {
            let v = pe.data()[ch * 30];
            let expected = if (ch / 2) % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(v, expected, "channel {ch}");
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe.data(), positional_encoding(5, 6, 8).unwrap().data());
        assert!(positional_encoding(4, 4, 6).is_err());
    }
}
