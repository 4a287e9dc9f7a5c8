//! Reusable building blocks: spectrally normalized layers, normalizations,
//! positional encoding, coordinate attention, the AdaConv block and the two
//! feature modulations.

pub mod adaconv;
pub mod coord;
pub mod modulation;
pub mod module;
pub mod norm;
pub mod spectral;

pub use adaconv::AdaConvBlock;
pub use coord::{AxisGates, CoordAttention};
pub use modulation::{apply_adain, modulate, AdaInModulation, ModulationParams, SpadeModulation};
pub use module::{Buffer, Module};
pub use norm::{instance_normalize, pono, positional_encoding, ChannelLayerNorm, Pono, PONO_EPS};
pub use spectral::{freeze_power_iteration, spectral_normalize, Conv2d, ConvOpts, Linear, SpectralStep};
