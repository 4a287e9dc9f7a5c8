//! Generator (two encoders, MAT stack, style MLP, U-Net decoder) and the patch
//! discriminator.

use exemplar_tensor::{Param, Tensor};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::mat::{CorrespondenceMap, MatConfig, MatStack, MatState};
use crate::nn::module::{join, Buffer, Module};
use crate::nn::{AdaInModulation, Conv2d, ConvOpts, Linear};

pub const LEAKY_SLOPE: f64 = 0.2;
const STYLE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    /// Side of the square matching grid.
    pub feature_grid: usize,
    pub mat_blocks: usize,
    pub style_dim: usize,
    /// Channels of the source image `x_A` (edge maps are single-channel).
    pub source_channels: usize,
    pub mat: MatConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            feature_grid: 16,
            mat_blocks: 3,
            style_dim: 128,
            source_channels: 1,
            mat: MatConfig::default(),
        }
    }
}

impl GeneratorConfig {
    /// 8×8 images on a 4×4 grid, for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            base_channels: 4,
            feature_grid: 4,
            mat_blocks: 1,
            style_dim: 8,
            source_channels: 1,
            mat: MatConfig {
                spade_hidden: 4,
                ..MatConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v > 0 && v.is_power_of_two();
        if !pow2(self.image_size) || !pow2(self.feature_grid) || self.feature_grid > self.image_size {
            return Err(invalid(format!(
                "image_size {} and feature_grid {} must be powers of two with grid <= image",
                self.image_size, self.feature_grid
            )));
        }
        if self.mat_blocks < 1 {
            return Err(invalid("mat_blocks must be at least 1"));
        }
        if self.base_channels == 0 || self.style_dim == 0 || self.mat.spade_hidden == 0 {
            return Err(invalid("channel widths must be positive"));
        }
        if self.bottleneck_channels() % 4 != 0 {
            return Err(invalid("bottleneck channels must be divisible by 4"));
        }
        if !matches!(self.source_channels, 1 | 3) {
            return Err(invalid(format!("source_channels must be 1 or 3, got {}", self.source_channels)));
        }
        if self.mat.dwise_kernel % 2 == 0 {
            return Err(invalid(format!("dwise_kernel must be odd, got {}", self.mat.dwise_kernel)));
        }
        if !(self.mat.alpha > 0.0 && self.mat.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {}", self.mat.alpha)));
        }
        Ok(())
    }

    /// Number of stride-2 stages between the image and the matching grid.
    pub fn downsamples(&self) -> usize {
        (self.image_size / self.feature_grid).trailing_zeros() as usize
    }

    pub fn level_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << (self.downsamples() + 1)
    }
}

/// Encoder pyramid: `levels[i]` sits at stride `2^i`; the bottleneck shares
/// the last level's resolution.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub levels: Vec<Tensor>,
    pub bottleneck: Tensor,
}

#[derive(Debug)]
pub struct Encoder {
    stem: Conv2d,
    down: Vec<Conv2d>,
    bottleneck: Conv2d,
    in_channels: usize,
    image_size: usize,
}

impl Encoder {
    pub fn new(rng: &mut impl Rng, in_channels: usize, cfg: &GeneratorConfig) -> Result<Self> {
        let n = cfg.downsamples();
        let stem = Conv2d::new(rng, in_channels, cfg.base_channels, ConvOpts::default())?;
        let down = (1..=n)
            .map(|i| Conv2d::new(rng, cfg.level_channels(i - 1), cfg.level_channels(i), ConvOpts::default().stride(2)))
            .collect::<Result<Vec<_>>>()?;
        let bottleneck = Conv2d::new(rng, cfg.level_channels(n), cfg.bottleneck_channels(), ConvOpts::default())?;
        Ok(Self {
            stem,
            down,
            bottleneck,
            in_channels,
            image_size: cfg.image_size,
        })
    }

    pub fn forward(&self, img: &Tensor) -> Result<EncoderOutput> {
        let expected = [self.in_channels, self.image_size, self.image_size];
        if img.shape() != expected {
            return Err(invalid(format!("encoder expects {:?}, got {:?}", expected, img.shape())));
        }
        let mut x = self.stem.forward(img)?.leaky_relu(LEAKY_SLOPE);
        let mut levels = vec![x.clone()];
        for conv in &self.down {
            x = conv.forward(&x)?.leaky_relu(LEAKY_SLOPE);
            levels.push(x.clone());
        }
        let bottleneck = self.bottleneck.forward(&x)?;
        Ok(EncoderOutput { levels, bottleneck })
    }
}

impl Module for Encoder {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.stem.visit_params(&join(prefix, "stem"), out);
        for (i, c) in self.down.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("down{i}")), out);
        }
        self.bottleneck.visit_params(&join(prefix, "bottleneck"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.stem.visit_buffers(&join(prefix, "stem"), out);
        for (i, c) in self.down.iter().enumerate() {
            c.visit_buffers(&join(prefix, &format!("down{i}")), out);
        }
        self.bottleneck.visit_buffers(&join(prefix, "bottleneck"), out);
    }
}

/// Global average pool → FC → leaky ReLU → FC → L2 normalize.
#[derive(Debug)]
pub struct StyleMlp {
    fc1: Linear,
    fc2: Linear,
}

impl StyleMlp {
    pub fn new(rng: &mut impl Rng, in_channels: usize, style_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(rng, in_channels, style_dim, true)?,
            fc2: Linear::new(rng, style_dim, style_dim, true)?,
        })
    }

    pub fn forward(&self, bottleneck: &Tensor) -> Result<Tensor> {
        let pooled = bottleneck.mean_axes(&[1, 2], false)?;
        let h = self.fc1.forward(&pooled)?.leaky_relu(LEAKY_SLOPE);
        let z = self.fc2.forward(&h)?;
        l2_normalize(&z)
    }
}

pub fn l2_normalize(z: &Tensor) -> Result<Tensor> {
    let norm = z.square().sum_all()?.sqrt()?.clamp_min(STYLE_NORM_FLOOR);
    Ok(z.div(&norm)?)
}

impl Module for StyleMlp {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.fc1.visit_params(&join(prefix, "fc1"), out);
        self.fc2.visit_params(&join(prefix, "fc2"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.fc1.visit_buffers(&join(prefix, "fc1"), out);
        self.fc2.visit_buffers(&join(prefix, "fc2"), out);
    }
}

#[derive(Debug)]
struct DecoderStage {
    conv: Conv2d,
    adain: AdaInModulation,
}

/// U-Net decoder. Stage `i` (coarse to fine) upsamples unless it is the
/// first, concatenates the source level of matching resolution, convolves,
/// applies AdaIN with the style code, then leaky ReLU.
#[derive(Debug)]
pub struct Decoder {
    stages: Vec<DecoderStage>,
    to_rgb: Conv2d,
}

impl Decoder {
    pub fn new(rng: &mut impl Rng, cfg: &GeneratorConfig) -> Result<Self> {
        let n = cfg.downsamples();
        let mut stages = Vec::with_capacity(n + 1);
        let mut state = cfg.bottleneck_channels();
        for i in (0..=n).rev() {
            let out = cfg.level_channels(i);
            stages.push(DecoderStage {
                conv: Conv2d::new(rng, state + out, out, ConvOpts::default())?,
                adain: AdaInModulation::new(rng, out, cfg.style_dim)?,
            });
            state = out;
        }
        Ok(Self {
            stages,
            to_rgb: Conv2d::new(rng, cfg.base_channels, 3, ConvOpts::default())?,
        })
    }

    pub fn forward(&self, x_mat: &Tensor, skips: &[Tensor], z: &Tensor) -> Result<Tensor> {
        if skips.len() != self.stages.len() {
            return Err(invalid(format!("decoder needs {} skips, got {}", self.stages.len(), skips.len())));
        }
        let mut x = x_mat.clone();
        for (k, stage) in self.stages.iter().enumerate() {
            if k > 0 {
                x = x.upsample_nearest2x()?;
            }
            let skip = &skips[skips.len() - 1 - k];
            if skip.shape()[1..] != x.shape()[1..] {
                return Err(invalid(format!("skip {:?} does not match decoder state {:?}", skip.shape(), x.shape())));
            }
            x = Tensor::concat(&[&x, skip], 0)?;
            x = stage.adain.forward(&stage.conv.forward(&x)?, z)?.leaky_relu(LEAKY_SLOPE);
        }
        Ok(self.to_rgb.forward(&x)?.tanh().affine(0.5, 0.5))
    }
}

impl Module for Decoder {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.conv.visit_params(&join(prefix, &format!("stage{i}.conv")), out);
            s.adain.visit_params(&join(prefix, &format!("stage{i}.adain")), out);
        }
        self.to_rgb.visit_params(&join(prefix, "to_rgb"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.conv.visit_buffers(&join(prefix, &format!("stage{i}.conv")), out);
            s.adain.visit_buffers(&join(prefix, &format!("stage{i}.adain")), out);
        }
        self.to_rgb.visit_buffers(&join(prefix, "to_rgb"), out);
    }
}

/// Everything the objectives need from one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub image: Tensor,
    /// Style code of the exemplar.
    pub z: Tensor,
    pub maps: Vec<CorrespondenceMap>,
    pub states: Vec<MatState>,
    pub enc_a: EncoderOutput,
    pub enc_b: EncoderOutput,
}

#[derive(Debug)]
pub struct Generator {
    pub enc_a: Encoder,
    pub enc_b: Encoder,
    pub style: StyleMlp,
    pub mat: MatStack,
    pub decoder: Decoder,
    cfg: GeneratorConfig,
}

impl Generator {
    pub fn new(rng: &mut impl Rng, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let cb = cfg.bottleneck_channels();
        Ok(Self {
            enc_a: Encoder::new(rng, cfg.source_channels, &cfg)?,
            enc_b: Encoder::new(rng, 3, &cfg)?,
            style: StyleMlp::new(rng, cb, cfg.style_dim)?,
            mat: MatStack::new(rng, cfg.mat_blocks, cb, cfg.source_channels, cfg.mat)?,
            decoder: Decoder::new(rng, &cfg)?,
            cfg,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn encode_source(&self, x_a: &Tensor) -> Result<EncoderOutput> {
        self.enc_a.forward(x_a)
    }

    pub fn encode_exemplar(&self, y_b: &Tensor) -> Result<EncoderOutput> {
        self.enc_b.forward(y_b)
    }

    pub fn style_code(&self, e_b: &EncoderOutput) -> Result<Tensor> {
        self.style.forward(&e_b.bottleneck)
    }

    pub fn decode(&self, x_mat: &Tensor, skips: &[Tensor], z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(x_mat, skips, z)
    }

    pub fn forward(&self, x_a: &Tensor, y_b: &Tensor) -> Result<GeneratorOutput> {
        let enc_a = self.encode_source(x_a)?;
        let enc_b = self.encode_exemplar(y_b)?;
        let z = self.style_code(&enc_b)?;
        let stack = self.mat.forward(&enc_a.bottleneck, &enc_b.bottleneck, x_a)?;
        let image = self.decode(&stack.x_mat, &enc_a.levels, &z)?;
        Ok(GeneratorOutput {
            image,
            z,
            maps: stack.maps,
            states: stack.states,
            enc_a,
            enc_b,
        })
    }
}

impl Module for Generator {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.enc_a.visit_params(&join(prefix, "enc_a"), out);
        self.enc_b.visit_params(&join(prefix, "enc_b"), out);
        self.style.visit_params(&join(prefix, "style"), out);
        self.mat.visit_params(&join(prefix, "mat"), out);
        self.decoder.visit_params(&join(prefix, "decoder"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.enc_a.visit_buffers(&join(prefix, "enc_a"), out);
        self.enc_b.visit_buffers(&join(prefix, "enc_b"), out);
        self.style.visit_buffers(&join(prefix, "style"), out);
        self.mat.visit_buffers(&join(prefix, "mat"), out);
        self.decoder.visit_buffers(&join(prefix, "decoder"), out);
    }
}

/// Three stride-2 convs and a final 3×3 conv to a single logit channel.
#[derive(Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
    image_size: usize,
}

impl Discriminator {
    pub fn new(rng: &mut impl Rng, image_size: usize, base_channels: usize) -> Result<Self> {
        if image_size < 8 || !image_size.is_power_of_two() {
            return Err(invalid(format!("discriminator needs a power-of-two size >= 8, got {image_size}")));
        }
        let widths = [3, base_channels, base_channels * 2, base_channels * 4];
        let convs = widths
            .windows(2)
            .map(|w| Conv2d::new(rng, w[0], w[1], ConvOpts::default().stride(2)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            head: Conv2d::new(rng, widths[3], 1, ConvOpts::default())?,
            image_size,
        })
    }

    /// Raw patch logits, `[1, S/8, S/8]`.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let expected = [3, self.image_size, self.image_size];
        if img.shape() != expected {
            return Err(invalid(format!("discriminator expects {:?}, got {:?}", expected, img.shape())));
        }
        let mut x = img.clone();
        for c in &self.convs {
            x = c.forward(&x)?.leaky_relu(LEAKY_SLOPE);
        }
        self.head.forward(&x)
    }
}

impl Module for Discriminator {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("conv{i}")), out);
        }
        self.head.visit_params(&join(prefix, "head"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_buffers(&join(prefix, &format!("conv{i}")), out);
        }
        self.head.visit_buffers(&join(prefix, "head"), out);
    }
}
