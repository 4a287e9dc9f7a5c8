use exemplar_tensor::{Param, Tensor};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::module::{join, Buffer, Module};
use crate::nn::spectral::{Conv2d, ConvOpts};

/// Coordinate attention: axis-wise pooled descriptors drive one gate per row
/// and one per column, `out = x ⊙ a_h ⊙ a_w`.
///
/// The two gate convolutions start at zero (and skip spectral normalization,
/// which is undefined at a zero weight), so a fresh block scales its input by
/// `sigmoid(0)² = 0.25`.
#[derive(Debug)]
pub struct CoordAttention {
    shared: Conv2d,
    gate_h: Conv2d,
    gate_w: Conv2d,
    channels: usize,
}

/// Gates computed by [`CoordAttention::gates`].
pub struct AxisGates {
    /// `[C, H, 1]`
    pub a_h: Tensor,
    /// `[C, 1, W]`
    pub a_w: Tensor,
}

impl CoordAttention {
    pub fn new(rng: &mut impl Rng, channels: usize) -> Result<Self> {
        let r = (channels / 4).max(4);
        let pw = ConvOpts::default().kernel(1);
        Ok(Self {
            shared: Conv2d::new(rng, channels, r, pw)?,
            gate_h: Conv2d::new(rng, r, channels, pw.plain().zero_init())?,
            gate_w: Conv2d::new(rng, r, channels, pw.plain().zero_init())?,
            channels,
        })
    }

    pub fn reduction_width(&self) -> usize {
        self.shared.out_channels
    }

    pub fn gates(&self, x: &Tensor) -> Result<AxisGates> {
        let [c, h, w] = *x.shape() else {
            return Err(invalid(format!("coord attention expects [C, H, W], got {:?}", x.shape())));
        };
        if c != self.channels {
            return Err(invalid(format!("coord attention built for {} channels, got {c}", self.channels)));
        }
        let pooled_h = x.mean_axes(&[2], true)?; // [C, H, 1]
        let pooled_w = x.mean_axes(&[1], true)?.reshape(&[c, w, 1])?;
        let joint = Tensor::concat(&[&pooled_h, &pooled_w], 1)?;
        let mid = self.shared.forward(&joint)?.gelu();
        let r = self.reduction_width();
        let a_h = self.gate_h.forward(&mid.narrow(1, 0, h)?)?.sigmoid();
        let a_w = self.gate_w.forward(&mid.narrow(1, h, w)?)?.sigmoid().reshape(&[c, 1, w])?;
        debug_assert_eq!(mid.shape()[0], r);
        Ok(AxisGates { a_h, a_w })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.gates(x)?;
        Ok(x.mul(&g.a_h)?.mul(&g.a_w)?)
    }

    /// The zero-initialized gate layers, exposed for tests that perturb them.
    pub fn gate_params(&self) -> Vec<&Param> {
        let mut v = vec![self.gate_h.weight(), self.gate_w.weight()];
        v.extend(self.gate_h.bias());
        v.extend(self.gate_w.bias());
        v
    }
}

impl Module for CoordAttention {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.shared.visit_params(&join(prefix, "shared"), out);
        self.gate_h.visit_params(&join(prefix, "gate_h"), out);
        self.gate_w.visit_params(&join(prefix, "gate_w"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.shared.visit_buffers(&join(prefix, "shared"), out);
    }
}
