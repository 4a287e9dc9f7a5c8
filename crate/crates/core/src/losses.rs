//! Training objectives, the fixed feature extractor and the Sobel edge
//! extractor.

use std::io::{Read, Write};
use std::path::Path;

use exemplar_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::mat::{grid_to_rows, CorrespondenceMap};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;
pub const CX_EPS: f64 = 1e-5;
pub const CX_BANDWIDTH: f64 = 0.5;
const CX_COS_FLOOR: f64 = 1e-8;
const EDGE_MAX_FLOOR: f64 = 1e-8;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Number of tap points of [`FeatureExtractor`].
pub const TAPS: usize = 5;
const TAP_WIDTHS: [usize; TAPS] = [16, 32, 64, 64, 64];
/// Max-free downsampling (average pool) before these layers.
const POOL_BEFORE: [bool; TAPS] = [false, true, true, false, true];
const FE_MAGIC: &[u8; 4] = b"MBFE";
const FE_VERSION: u32 = 1;

/// Fixed conv stack with five ReLU tap points. Weights are plain constants,
/// so gradients reach the input only.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    /// He-normal weights drawn from `seed`, zero biases.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = TAP_WIDTHS
            .iter()
            .map(|&cout| {
                let fan_in = cin * 9;
                let std = (2.0 / fan_in as f64).sqrt();
                let w: Vec<f64> = (0..cout * fan_in)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                let layer = (
                    Tensor::new(w, &[cout, cin, 3, 3]).expect("sizes agree"),
                    Tensor::zeros(&[cout, 1, 1]),
                );
                cin = cout;
                layer
            })
            .collect();
        Self { layers }
    }

    /// Loads weights from the flat `MBFE` format: magic, version u32, layer
    /// count u32, then per layer the weight and the bias arrays, each as rank
    /// u32, dims u64, little-endian f64 data.
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != FE_MAGIC {
            return Err(Error::Format("extractor weights: bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FE_VERSION {
            return Err(Error::Format(format!("extractor weights: unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        if count != TAPS {
            return Err(Error::Format(format!("extractor weights: expected {TAPS} layers, got {count}")));
        }
        let mut cin = 3;
        let mut layers = Vec::with_capacity(TAPS);
        for &cout in &TAP_WIDTHS {
            let w = read_array(r)?;
            let b = read_array(r)?;
            if w.shape() != [cout, cin, 3, 3] || b.shape() != [cout] {
                return Err(Error::Format(format!(
                    "extractor weights: layer shapes {:?}/{:?}, expected [{cout}, {cin}, 3, 3]/[{cout}]",
                    w.shape(),
                    b.shape()
                )));
            }
            layers.push((w, b.reshape(&[cout, 1, 1])?));
            cin = cout;
        }
        if !r.is_empty() {
            return Err(Error::Format("extractor weights: trailing bytes".into()));
        }
        Ok(Self { layers })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FE_MAGIC);
        out.extend_from_slice(&FE_VERSION.to_le_bytes());
        out.extend_from_slice(&(TAPS as u32).to_le_bytes());
        for (w, b) in &self.layers {
            write_array(&mut out, w.shape(), w.data());
            write_array(&mut out, &b.shape()[..1], b.data());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// All five taps of a 3-channel image in `[0, 1]`.
    pub fn taps(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        self.taps_upto(img, TAPS)
    }

    /// Taps `1..=n` (computation stops after tap `n`).
    pub fn taps_upto(&self, img: &Tensor, n: usize) -> Result<Vec<Tensor>> {
        if img.rank() != 3 || img.shape()[0] != 3 {
            return Err(invalid(format!("feature extractor expects [3, H, W], got {:?}", img.shape())));
        }
        let mut x = img.affine(2.0, -1.0);
        let mut out = Vec::with_capacity(n);
        for (i, (w, b)) in self.layers.iter().take(n).enumerate() {
            if POOL_BEFORE[i] {
                x = x.avg_pool(2)?;
            }
            x = x.conv2d(w, 1, 1, 1)?.add(b)?.relu();
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Tap `k` (1-based).
    pub fn tap(&self, img: &Tensor, k: usize) -> Result<Tensor> {
        if !(1..=TAPS).contains(&k) {
            return Err(invalid(format!("tap index {k} outside 1..={TAPS}")));
        }
        Ok(self.taps_upto(img, k)?.pop().expect("k >= 1"))
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Format("extractor weights: truncated file".into())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_array(r: &mut &[u8]) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("extractor weights: rank {rank} too large")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(truncated)?;
        dims.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = dims.iter().product();
    if r.len() < n * 8 {
        return Err(Error::Format("extractor weights: truncated file".into()));
    }
    let (head, tail) = r.split_at(n * 8);
    let data = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    *r = tail;
    Ok(Tensor::new(data, &dims)?)
}

fn write_array(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Fixed-capacity FIFO of unit-norm style codes used as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleQueue {
    dim: usize,
    capacity: usize,
    slots: Vec<Vec<f64>>,
    cursor: usize,
    frozen: bool,
}

impl StyleQueue {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if dim == 0 || capacity == 0 {
            return Err(invalid("style queue needs positive dim and capacity"));
        }
        Ok(Self {
            dim,
            capacity,
            slots: Vec::new(),
            cursor: 0,
            frozen: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Slot index the next push writes to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Inserts a renormalized copy, evicting the oldest entry when full.
    /// Returns false (and leaves the queue untouched) when frozen or when the
    /// code is zero or non-finite.
    pub fn push(&mut self, z: &[f64]) -> Result<bool> {
        if z.len() != self.dim {
            return Err(invalid(format!("style code has {} entries, queue holds {}", z.len(), self.dim)));
        }
        if self.frozen {
            return Ok(false);
        }
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Ok(false);
        }
        let code: Vec<f64> = z.iter().map(|v| v / n).collect();
        if self.slots.len() < self.capacity {
            self.slots.push(code);
        } else {
            self.slots[self.cursor] = code;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(true)
    }

    /// Entries oldest first.
    pub fn entries(&self) -> Vec<&[f64]> {
        if self.slots.len() < self.capacity {
            self.slots.iter().map(Vec::as_slice).collect()
        } else {
            (0..self.capacity).map(|i| self.slots[(self.cursor + i) % self.capacity].as_slice()).collect()
        }
    }

    /// Constant `[len, dim]` matrix of the stored codes in slot order.
    pub fn as_tensor(&self) -> Option<Tensor> {
        if self.slots.is_empty() {
            return None;
        }
        let data = self.slots.concat();
        Some(Tensor::new(data, &[self.slots.len(), self.dim]).expect("sizes agree"))
    }

    /// Raw slot contents for serialization.
    pub fn raw_slots(&self) -> &[Vec<f64>] {
        &self.slots
    }

    pub(crate) fn from_raw(dim: usize, capacity: usize, slots: Vec<Vec<f64>>, cursor: usize, frozen: bool) -> Result<Self> {
        if dim == 0 || capacity == 0 || slots.len() > capacity || cursor >= capacity || slots.iter().any(|s| s.len() != dim) {
            return Err(Error::Checkpoint("inconsistent style queue state".into()));
        }
        if slots.len() < capacity && cursor != slots.len() % capacity {
            return Err(Error::Checkpoint("style queue cursor does not match its fill".into()));
        }
        Ok(Self {
            dim,
            capacity,
            slots,
            cursor,
            frozen,
        })
    }
}

/// `log Σ exp(x)` over a rank-1 tensor, shifted by the (constant) maximum.
fn logsumexp(x: &Tensor) -> Result<Tensor> {
    let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(x.add_scalar(-m).exp().sum_all()?.log()?.add_scalar(m))
}

/// InfoNCE: `−log(exp(z·z⁺/τ) / (exp(z·z⁺/τ) + Σ_k exp(z·n_k/τ)))`.
/// Negatives are detached; an empty queue gives `0`.
pub fn style_contrastive(z: &Tensor, z_plus: &Tensor, queue: &StyleQueue, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if z.shape() != [queue.dim()] || z_plus.shape() != [queue.dim()] {
        return Err(invalid(format!(
            "style codes {:?}/{:?} do not match queue dim {}",
            z.shape(),
            z_plus.shape(),
            queue.dim()
        )));
    }
    let pos = z.mul(z_plus)?.sum_axes(&[0], true)?.scale(1.0 / tau);
    let logits = match queue.as_tensor() {
        None => pos.clone(),
        Some(neg) => {
            let s = neg.matmul(&z.reshape(&[queue.dim(), 1])?)?.reshape(&[queue.len()])?.scale(1.0 / tau);
            Tensor::concat(&[&pos, &s], 0)?
        }
    };
    Ok(logsumexp(&logits)?.sub(&pos.reshape(&[])?)?)
}

fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("L1 shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.abs().mean_all()?)
}

/// Mean absolute difference of the two bottlenecks.
pub fn align_loss(ea_x_a: &Tensor, eb_x_b: &Tensor) -> Result<Tensor> {
    l1(ea_x_a, eb_x_b)
}

/// Downsamples `y_b` and `x_b` to the map's grid, warps the exemplar rows
/// with the map's weights and returns the L1 distance to the ground truth.
/// `transpose` selects the alternate `Ãᵀ` orientation.
pub fn corr_loss(map: &CorrespondenceMap, y_b: &Tensor, x_b: &Tensor, transpose: bool) -> Result<Tensor> {
    corr_loss_weights(&map.warp_weights, map.height, map.width, y_b, x_b, transpose)
}

pub fn corr_loss_weights(weights: &Tensor, h: usize, w: usize, y_b: &Tensor, x_b: &Tensor, transpose: bool) -> Result<Tensor> {
    if y_b.shape() != x_b.shape() || y_b.rank() != 3 {
        return Err(invalid(format!("corr loss images {:?}/{:?}", y_b.shape(), x_b.shape())));
    }
    let s = y_b.shape()[1];
    if h != w || s % h != 0 || y_b.shape()[2] != s {
        return Err(invalid(format!("cannot pool {:?} to a {h}x{w} grid", y_b.shape())));
    }
    let y = grid_to_rows(&y_b.avg_pool(s / h)?)?;
    let x = grid_to_rows(&x_b.avg_pool(s / h)?)?;
    let a = if transpose { weights.t()? } else { weights.clone() };
    l1(&a.matmul(&y)?, &x)
}

/// Tap-4 L1.
pub fn perceptual_loss(fe: &FeatureExtractor, x_hat: &Tensor, x_b: &Tensor) -> Result<Tensor> {
    let target = {
        let _g = exemplar_tensor::no_grad();
        fe.tap(x_b, 4)?
    };
    l1(&fe.tap(x_hat, 4)?, &target)
}

/// Contextual similarity of two `[C, H, W]` feature maps, treated as sets of
/// `HW` vectors.
pub fn contextual_similarity(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let xr = grid_to_rows(x)?;
    let yr = grid_to_rows(y)?;
    let mu = yr.mean_axes(&[0], true)?;
    let unit = |r: &Tensor| -> Result<Tensor> {
        let c = r.sub(&mu)?;
        let n = c.square().sum_axes(&[1], true)?.sqrt()?.clamp_min(CX_COS_FLOOR);
        Ok(c.div(&n)?)
    };
    let cos = unit(&xr)?.matmul(&unit(&yr)?.t()?)?;
    let d = cos.neg().add_scalar(1.0);
    let rel = d.div(&d.min_axes(&[1], true)?.add_scalar(CX_EPS))?;
    let cx = rel.neg().add_scalar(1.0).scale(1.0 / CX_BANDWIDTH).softmax(1)?;
    Ok(cx.max_axes(&[1], false)?.mean_all()?)
}

/// `−log(Σ_l w_l CX_l)` over taps 2–4 with uniform `w_l`.
pub fn contextual_loss(fe: &FeatureExtractor, x_hat: &Tensor, y_b: &Tensor) -> Result<Tensor> {
    let fx = fe.taps_upto(x_hat, 4)?;
    let fy = {
        let _g = exemplar_tensor::no_grad();
        fe.taps_upto(y_b, 4)?
    };
    let mut acc: Option<Tensor> = None;
    for l in 1..4 {
        let term = contextual_similarity(&fx[l], &fy[l])?.scale(1.0 / 3.0);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    Ok(acc.expect("three taps").log()?.neg())
}

/// `[1, 2, 1]` smoothing of `x` along `axis`, where `x` is two longer than
/// `n` on that axis.
fn smooth3(x: &Tensor, axis: usize, n: usize) -> Result<Tensor> {
    Ok(x.narrow(axis, 0, n)?.add(&x.narrow(axis, 1, n)?.scale(2.0))?.add(&x.narrow(axis, 2, n)?)?)
}

/// Luma → replicate pad → Sobel magnitude, divided by its (floored) maximum.
/// Accepts 1- or 3-channel images; returns `[1, H, W]`.
pub fn edge_extract(img: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *img.shape() else {
        return Err(invalid(format!("edge extractor expects [C, H, W], got {:?}", img.shape())));
    };
    let gray = match c {
        1 => img.clone(),
        3 => {
            let luma = Tensor::new(LUMA.to_vec(), &[3, 1, 1])?;
            img.mul(&luma)?.sum_axes(&[0], true)?
        }
        _ => return Err(invalid(format!("edge extractor expects 1 or 3 channels, got {c}"))),
    };
    // Sobel as central differences then smoothing, so flat regions are
    // exactly zero.
    let p = gray.pad_replicate(1)?;
    let gx = smooth3(&p.narrow(2, 2, w)?.sub(&p.narrow(2, 0, w)?)?, 1, h)?;
    let gy = smooth3(&p.narrow(1, 2, h)?.sub(&p.narrow(1, 0, h)?)?, 2, w)?;
    let mag = gx.square().add(&gy.square())?.sqrt()?;
    debug_assert_eq!(mag.shape(), [1, h, w]);
    let peak = mag.max_all()?.clamp_min(EDGE_MAX_FLOOR);
    Ok(mag.div(&peak)?)
}

fn gray_to_rgb(e: &Tensor) -> Result<Tensor> {
    Ok(Tensor::concat(&[e, e, e], 0)?)
}

/// Tap-2 L1 between the edge maps of the two images.
pub fn structural_loss(fe: &FeatureExtractor, x_hat: &Tensor, x_b: &Tensor) -> Result<Tensor> {
    let target = {
        let _g = exemplar_tensor::no_grad();
        fe.tap(&gray_to_rgb(&edge_extract(x_b)?)?, 2)?
    };
    l1(&fe.tap(&gray_to_rgb(&edge_extract(x_hat)?)?, 2)?, &target)
}

/// Hinge losses `(L_D, L_G)` on raw logits.
pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let l_d = d_real.neg().add_scalar(1.0).relu().mean_all()?.add(&d_fake.add_scalar(1.0).relu().mean_all()?)?;
    let l_g = d_fake.mean_all()?.neg();
    Ok((l_d, l_g))
}

/// `λ₁…λ₆`; `perceptual` scales both the perceptual and contextual terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub style: f64,
    pub align: f64,
    pub corr: f64,
    pub structural: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            style: 1.0,
            align: 1.0,
            corr: 10.0,
            structural: 1.0,
            perceptual: 1.0,
            adversarial: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            style: 0.0,
            align: 0.0,
            corr: 0.0,
            structural: 0.0,
            perceptual: 0.0,
            adversarial: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("style", self.style),
            ("align", self.align),
            ("corr", self.corr),
            ("structural", self.structural),
            ("perceptual", self.perceptual),
            ("adversarial", self.adversarial),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss terms of one sample or batch.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub style: Tensor,
    pub align: Tensor,
    pub corr: Tensor,
    pub structural: Tensor,
    pub perceptual: Tensor,
    pub contextual: Tensor,
    pub adv_g: Tensor,
    pub adv_d: Tensor,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("L_style", &self.style),
            ("L_align", &self.align),
            ("L_corr", &self.corr),
            ("L_str", &self.structural),
            ("L_perc", &self.perceptual),
            ("L_ctx", &self.contextual),
            ("L_advG", &self.adv_g),
            ("L_advD", &self.adv_d),
        ]
    }
}

/// `(L_G_total, L_D_total)`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<(Tensor, Tensor)> {
    w.validate()?;
    let g = parts
        .style
        .scale(w.style)
        .add(&parts.align.scale(w.align))?
        .add(&parts.corr.scale(w.corr))?
        .add(&parts.structural.scale(w.structural))?
        .add(&parts.perceptual.add(&parts.contextual)?.scale(w.perceptual))?
        .add(&parts.adv_g.scale(w.adversarial))?;
    let d = parts.adv_d.scale(w.adversarial);
    Ok((g, d))
}
