use exemplar_tensor::{Param, Tensor};
use rand::Rng;

use crate::error::Result;
use crate::nn::coord::CoordAttention;
use crate::nn::module::{join, Buffer, Module};
use crate::nn::norm::ChannelLayerNorm;
use crate::nn::spectral::{Conv2d, ConvOpts};

/// Depthwise conv → coordinate attention → pointwise expand (×4) → GELU →
/// channel LayerNorm → pointwise contract. Shape preserving.
#[derive(Debug)]
pub struct AdaConvBlock {
    dwise: Conv2d,
    coord: CoordAttention,
    expand: Conv2d,
    norm: ChannelLayerNorm,
    contract: Conv2d,
}

impl AdaConvBlock {
    pub fn new(rng: &mut impl Rng, channels: usize, kernel: usize) -> Result<Self> {
        let pw = ConvOpts::default().kernel(1);
        Ok(Self {
            dwise: Conv2d::new(rng, channels, channels, ConvOpts::default().kernel(kernel).groups(channels))?,
            coord: CoordAttention::new(rng, channels)?,
            expand: Conv2d::new(rng, channels, 4 * channels, pw)?,
            norm: ChannelLayerNorm::new(4 * channels),
            contract: Conv2d::new(rng, 4 * channels, channels, pw)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.dwise.forward(x)?;
        let h = self.coord.forward(&h)?;
        let h = self.expand.forward(&h)?.gelu();
        let h = self.norm.forward(&h)?;
        self.contract.forward(&h)
    }

    /// Zeroes every weight and bias so the block outputs exactly zero.
    pub fn zero_(&self) -> Result<()> {
        for (_, p) in self.named_params() {
            p.set_data(vec![0.0; p.numel()])?;
        }
        Ok(())
    }

    pub fn coord(&self) -> &CoordAttention {
        &self.coord
    }
}

impl Module for AdaConvBlock {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.dwise.visit_params(&join(prefix, "dwise"), out);
        self.coord.visit_params(&join(prefix, "coord"), out);
        self.expand.visit_params(&join(prefix, "expand"), out);
        self.norm.visit_params(&join(prefix, "norm"), out);
        self.contract.visit_params(&join(prefix, "contract"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.dwise.visit_buffers(&join(prefix, "dwise"), out);
        self.coord.visit_buffers(&join(prefix, "coord"), out);
        self.expand.visit_buffers(&join(prefix, "expand"), out);
        self.contract.visit_buffers(&join(prefix, "contract"), out);
    }
}
