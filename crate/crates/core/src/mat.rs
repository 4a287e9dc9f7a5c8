//! Masked correspondence learning and reliability-adaptive aggregation.
//!
//! A block projects the query grid to `Q` and the exemplar grid to `K`, `V`,
//! scores every query/exemplar position pair with the cosine of channel-centred
//! vectors, drops negative scores, and warps `V` with a sharpened softmax over
//! the surviving scores. Positions whose kept scores carry little mass fall
//! back to a SPADE-modulated copy of `Q`. The three paths are summed, normalized
//! per position, and refined by an AdaConv block with a residual connection.

use exemplar_tensor::{Param, Tensor};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::nn::module::{join, Buffer, Module};
use crate::nn::{pono, positional_encoding, AdaConvBlock, Conv2d, ConvOpts, SpadeModulation, PONO_EPS};

/// Norm floor for centred query/key vectors; a zero vector scores 0 everywhere.
pub const COSINE_FLOOR: f64 = 1e-8;
pub const DEFAULT_ALPHA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatConfig {
    /// Softmax sharpness applied to masked scores.
    pub alpha: f64,
    /// Replace the ReLU mask by the identity (full-correspondence ablation).
    pub disable_mask: bool,
    /// Clamp the uncorrelated-selection coefficient to `[0, 1]`.
    pub clamp_uncorrelated: bool,
    pub dwise_kernel: usize,
    pub spade_hidden: usize,
}

impl Default for MatConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            disable_mask: false,
            clamp_uncorrelated: true,
            dwise_kernel: 3,
            spade_hidden: 64,
        }
    }
}

/// Correspondence between `HW` query positions (rows) and `HW` exemplar
/// positions (columns).
#[derive(Debug, Clone)]
pub struct CorrespondenceMap {
    /// Cosine scores in `[-1, 1]`.
    pub raw: Tensor,
    /// `relu(raw)` (or `raw` under the mask ablation).
    pub masked: Tensor,
    /// Row-stochastic `softmax(alpha · masked)`.
    pub warp_weights: Tensor,
    pub alpha: f64,
    pub height: usize,
    pub width: usize,
}

/// Intermediate values of one block.
#[derive(Debug, Clone)]
pub struct MatState {
    /// `[HW, C]` rows.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// `[C, H, W]` grids.
    pub x_cor: Tensor,
    pub x_uncor: Tensor,
    pub x_agg: Tensor,
    pub x_mat: Tensor,
}

/// `[C, H, W]` → `[HW, C]`.
pub fn grid_to_rows(x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(invalid(format!("expected [C, H, W], got {:?}", x.shape())));
    };
    Ok(x.reshape(&[c, h * w])?.t()?)
}

/// `[HW, C]` → `[C, H, W]`.
pub fn rows_to_grid(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [n, c] = *x.shape() else {
        return Err(invalid(format!("expected [HW, C], got {:?}", x.shape())));
    };
    if n != h * w {
        return Err(invalid(format!("{n} rows do not fill a {h}x{w} grid")));
    }
    Ok(x.t()?.reshape(&[c, h, w])?)
}

/// Subtracts each row's mean and scales it to unit norm (floored).
fn centred_unit_rows(x: &Tensor) -> Result<Tensor> {
    let centred = x.sub(&x.mean_axes(&[1], true)?)?;
    let norm = centred.square().sum_axes(&[1], true)?.sqrt()?.clamp_min(COSINE_FLOOR);
    Ok(centred.div(&norm)?)
}

/// Cosine similarity of channel-centred rows: `A[u, v] = cos(q̃_u, k̃_v)`.
pub fn cosine_scores(q_rows: &Tensor, k_rows: &Tensor) -> Result<Tensor> {
    if q_rows.rank() != 2 || k_rows.rank() != 2 || q_rows.shape()[1] != k_rows.shape()[1] {
        return Err(invalid(format!(
            "cosine scores need [N, C] and [M, C], got {:?} and {:?}",
            q_rows.shape(),
            k_rows.shape()
        )));
    }
    let q = centred_unit_rows(q_rows)?;
    let k = centred_unit_rows(k_rows)?;
    Ok(q.matmul(&k.t()?)?)
}

/// Drops unreliable (negative) correspondences. No parameters.
pub fn mask_correspondence(raw: &Tensor) -> Tensor {
    raw.relu()
}

/// Returns `(softmax(alpha · masked) over keys, weights · V)`.
pub fn warp_values(masked: &Tensor, v_rows: &Tensor, alpha: f64) -> Result<(Tensor, Tensor)> {
    if alpha <= 0.0 {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    let weights = masked.scale(alpha).softmax(1)?;
    let warped = weights.matmul(v_rows)?;
    Ok((weights, warped))
}

/// Per-position gate `1 − Σ_v masked(u, v)`, optionally clamped to `[0, 1]`,
/// as a `[1, H, W]` tensor.
pub fn uncorrelated_coefficient(masked: &Tensor, h: usize, w: usize, clamp: bool) -> Result<Tensor> {
    let c = masked.sum_axes(&[1], false)?.neg().add_scalar(1.0);
    let c = if clamp { c.clamp(0.0, 1.0) } else { c };
    Ok(c.reshape(&[1, h, w])?)
}

/// `x_uncor = c ⊙ q_norm` with `c` from [`uncorrelated_coefficient`].
pub fn uncorrelated_select(masked: &Tensor, q_norm: &Tensor, clamp: bool) -> Result<Tensor> {
    let [_, h, w] = *q_norm.shape() else {
        return Err(invalid(format!("q_norm must be [C, H, W], got {:?}", q_norm.shape())));
    };
    Ok(uncorrelated_coefficient(masked, h, w, clamp)?.mul(q_norm)?)
}

/// `pono(x_cor + x_uncor + q)`.
pub fn aggregate(x_cor: &Tensor, x_uncor: &Tensor, q: &Tensor) -> Result<Tensor> {
    if x_cor.shape() != q.shape() || x_uncor.shape() != q.shape() {
        return Err(invalid(format!(
            "aggregate shape mismatch: {:?}, {:?}, {:?}",
            x_cor.shape(),
            x_uncor.shape(),
            q.shape()
        )));
    }
    Ok(pono(&x_cor.add(x_uncor)?.add(q)?, PONO_EPS)?.y)
}

/// One masked-attention transformer block.
#[derive(Debug)]
pub struct MatBlock {
    q_proj: Conv2d,
    k_proj: Conv2d,
    v_proj: Conv2d,
    spade: SpadeModulation,
    adaconv: AdaConvBlock,
    cfg: MatConfig,
}

pub struct MatBlockOutput {
    pub state: MatState,
    pub map: CorrespondenceMap,
}

impl MatBlock {
    pub fn new(rng: &mut impl Rng, channels: usize, cond_channels: usize, cfg: MatConfig) -> Result<Self> {
        let pw = ConvOpts::default().kernel(1);
        Ok(Self {
            q_proj: Conv2d::new(rng, channels, channels, pw)?,
            k_proj: Conv2d::new(rng, channels, channels, pw)?,
            v_proj: Conv2d::new(rng, channels, channels, pw)?,
            spade: SpadeModulation::new(rng, channels, cond_channels, cfg.spade_hidden)?,
            adaconv: AdaConvBlock::new(rng, channels, cfg.dwise_kernel)?,
            cfg,
        })
    }

    pub fn config(&self) -> &MatConfig {
        &self.cfg
    }

    pub fn adaconv(&self) -> &AdaConvBlock {
        &self.adaconv
    }

    pub fn spade(&self) -> &SpadeModulation {
        &self.spade
    }

    /// Copies the query projection onto the key projection (used by the
    /// self-correspondence check).
    pub fn tie_key_to_query(&self) -> Result<()> {
        let (q, k) = (self.q_proj.named_params(), self.k_proj.named_params());
        for ((_, qp), (_, kp)) in q.iter().zip(&k) {
            kp.set_data(qp.data())?;
        }
        for ((_, qb), (_, kb)) in self.q_proj.named_buffers().iter().zip(self.k_proj.named_buffers()) {
            *kb.borrow_mut() = qb.borrow().clone();
        }
        Ok(())
    }

    /// Raw cosine correspondence between projected query and key grids, plus
    /// the projected query grid.
    pub fn cosine_attention(&self, query: &Tensor, key_src: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.q_proj.forward(query)?;
        let k = self.k_proj.forward(key_src)?;
        let raw = cosine_scores(&grid_to_rows(&q)?, &grid_to_rows(&k)?)?;
        Ok((raw, q))
    }

    /// `query` and `key_src` already carry positional encoding; `value_src`
    /// is the plain exemplar grid; `cond` is the source image.
    pub fn forward(&self, query: &Tensor, key_src: &Tensor, value_src: &Tensor, cond: &Tensor) -> Result<MatBlockOutput> {
        if query.shape() != key_src.shape() || query.shape() != value_src.shape() {
            return Err(invalid(format!(
                "MAT inputs must share a shape: {:?}, {:?}, {:?}",
                query.shape(),
                key_src.shape(),
                value_src.shape()
            )));
        }
        let [_, h, w] = *query.shape() else {
            return Err(invalid(format!("MAT expects [C, H, W], got {:?}", query.shape())));
        };
        let q_grid = self.q_proj.forward(query)?;
        let q_rows = grid_to_rows(&q_grid)?;
        let k_rows = grid_to_rows(&self.k_proj.forward(key_src)?)?;
        let raw = cosine_scores(&q_rows, &k_rows)?;
        let v_rows = grid_to_rows(&self.v_proj.forward(value_src)?)?;

        let masked = if self.cfg.disable_mask { raw.clone() } else { mask_correspondence(&raw) };
        let (weights, cor_rows) = warp_values(&masked, &v_rows, self.cfg.alpha)?;
        let x_cor = rows_to_grid(&cor_rows, h, w)?;
        let q_norm = self.spade.forward(&q_grid, cond)?;
        let x_uncor = uncorrelated_select(&masked, &q_norm, self.cfg.clamp_uncorrelated)?;
        let x_agg = aggregate(&x_cor, &x_uncor, &q_grid)?;
        let x_mat = self.adaconv.forward(&x_agg)?.add(&x_agg)?;

        Ok(MatBlockOutput {
            state: MatState {
                q: q_rows,
                k: k_rows,
                v: v_rows,
                x_cor,
                x_uncor,
                x_agg,
                x_mat,
            },
            map: CorrespondenceMap {
                raw,
                masked,
                warp_weights: weights,
                alpha: self.cfg.alpha,
                height: h,
                width: w,
            },
        })
    }
}

impl Module for MatBlock {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.q_proj.visit_params(&join(prefix, "q_proj"), out);
        self.k_proj.visit_params(&join(prefix, "k_proj"), out);
        self.v_proj.visit_params(&join(prefix, "v_proj"), out);
        self.spade.visit_params(&join(prefix, "spade"), out);
        self.adaconv.visit_params(&join(prefix, "adaconv"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        self.q_proj.visit_buffers(&join(prefix, "q_proj"), out);
        self.k_proj.visit_buffers(&join(prefix, "k_proj"), out);
        self.v_proj.visit_buffers(&join(prefix, "v_proj"), out);
        self.spade.visit_buffers(&join(prefix, "spade"), out);
        self.adaconv.visit_buffers(&join(prefix, "adaconv"), out);
    }
}

/// A chain of blocks. Positional encoding is added once, before the first
/// block; each block re-projects the exemplar grid with its own weights.
#[derive(Debug)]
pub struct MatStack {
    blocks: Vec<MatBlock>,
    channels: usize,
}

pub struct MatStackOutput {
    pub x_mat: Tensor,
    pub maps: Vec<CorrespondenceMap>,
    pub states: Vec<MatState>,
}

impl MatStack {
    pub fn new(rng: &mut impl Rng, n: usize, channels: usize, cond_channels: usize, cfg: MatConfig) -> Result<Self> {
        if n < 1 {
            return Err(invalid("a MAT stack needs at least one block"));
        }
        let blocks = (0..n)
            .map(|_| MatBlock::new(rng, channels, cond_channels, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, channels })
    }

    pub fn blocks(&self) -> &[MatBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn forward(&self, x_feat: &Tensor, y_feat: &Tensor, cond: &Tensor) -> Result<MatStackOutput> {
        let [c, h, w] = *x_feat.shape() else {
            return Err(invalid(format!("MAT stack expects [C, H, W], got {:?}", x_feat.shape())));
        };
        if c != self.channels {
            return Err(invalid(format!("MAT stack built for {} channels, got {c}", self.channels)));
        }
        let pe = positional_encoding(h, w, c)?;
        let x_pe = x_feat.add(&pe)?;
        let y_pe = y_feat.add(&pe)?;
        let mut query = x_pe;
        let mut maps = Vec::with_capacity(self.blocks.len());
        let mut states = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(&query, &y_pe, y_feat, cond)?;
            query = out.state.x_mat.clone();
            maps.push(out.map);
            states.push(out.state);
        }
        Ok(MatStackOutput {
            x_mat: query,
            maps,
            states,
        })
    }
}

impl Module for MatStack {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), out);
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Buffer)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_buffers(&join(prefix, &format!("block{i}")), out);
        }
    }
}

/// 8-bit grayscale rendering of one correspondence row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapView {
    Raw,
    Masked,
}

fn render(row: &[f64], lo: f64, hi: f64, height: usize, width: usize) -> GrayMap {
    let range = hi - lo;
    let pixels = row
        .iter()
        .map(|&v| {
            if range <= 0.0 {
                0
            } else {
                ((v - lo) / range * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    GrayMap { width, height, pixels }
}

fn map_row<'a>(map: &'a CorrespondenceMap, view: MapView, u: usize) -> Result<&'a [f64]> {
    let n = map.height * map.width;
    if u >= n {
        return Err(invalid(format!("query index {u} outside 0..{n}")));
    }
    let t = match view {
        MapView::Raw => &map.raw,
        MapView::Masked => &map.masked,
    };
    Ok(&t.data()[u * n..(u + 1) * n])
}

/// Row `u` of the chosen view reshaped to the grid and min-max normalized to
/// 0–255. A constant row renders as all zeros.
pub fn export_correspondence(map: &CorrespondenceMap, u: usize, view: MapView) -> Result<GrayMap> {
    let row = map_row(map, view, u)?;
    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(render(row, lo, hi, map.height, map.width))
}

/// Raw and masked renderings of row `u` on a shared intensity scale, so the
/// two images differ only where the raw score is negative.
pub fn export_correspondence_pair(map: &CorrespondenceMap, u: usize) -> Result<(GrayMap, GrayMap)> {
    let raw = map_row(map, MapView::Raw, u)?;
    let masked = map_row(map, MapView::Masked, u)?;
    let lo = raw.iter().chain(masked).cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().chain(masked).cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((
        render(raw, lo, hi, map.height, map.width),
        render(masked, lo, hi, map.height, map.width),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[f64], n: usize, c: usize) -> Tensor {
        Tensor::new(data.to_vec(), &[n, c]).unwrap()
    }

    #[test]
    fn cosine_hand_examples() {
        let q = rows(&[2.0, 0.0], 1, 2);
        let a = cosine_scores(&q, &rows(&[4.0, 0.0], 1, 2)).unwrap();
        assert!((a.item() - 1.0).abs() < 1e-15);
        let a = cosine_scores(&q, &rows(&[0.0, 4.0], 1, 2)).unwrap();
        assert!((a.item() + 1.0).abs() < 1e-15);
        let a = cosine_scores(&rows(&[3.0, 3.0], 1, 2), &rows(&[0.0, 4.0], 1, 2)).unwrap();
        assert_eq!(a.item(), 0.0);
    }

    #[test]
    fn mask_examples() {
        let raw = rows(&[0.5, -0.3, -0.2, 0.9], 2, 2);
        assert_eq!(mask_correspondence(&raw).data(), &[0.5, 0.0, 0.0, 0.9]);
        let neg = rows(&[-0.1, -0.7], 1, 2);
        assert!(mask_correspondence(&neg).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn warp_examples() {
        let v = rows(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        let (w, x) = warp_values(&rows(&[0.5, 0.0], 1, 2), &v, 100.0).unwrap();
        assert!((w.data()[0] - 1.0).abs() < 1e-15);
        assert!((w.data()[1] - 1.0 / (50f64.exp() + 1.0)).abs() < 1e-30);
        assert!((x.data()[0] - 1.0).abs() < 1e-12 && (x.data()[1] - 2.0).abs() < 1e-12);

        let (w, x) = warp_values(&rows(&[0.0, 0.0], 1, 2), &v, 100.0).unwrap();
        assert_eq!(w.data(), &[0.5, 0.5]);
        assert_eq!(x.data(), &[2.0, 3.0]);
        assert!(warp_values(&rows(&[0.0, 0.0], 1, 2), &v, 0.0).is_err());
    }

    #[test]
    fn uncorrelated_coefficient_cases() {
        let masked = rows(&[0.4, 0.6, 0.0, 0.0, 1.5, 0.8, 0.1, 0.2], 4, 2);
        let c = uncorrelated_coefficient(&masked, 2, 2, true).unwrap();
        assert!(c.data()[0].abs() < 1e-15);
        assert_eq!(c.data()[1], 1.0);
        assert_eq!(c.data()[2], 0.0);
        assert!((c.data()[3] - 0.7).abs() < 1e-15);
        let unclamped = uncorrelated_coefficient(&masked, 2, 2, false).unwrap();
        assert!((unclamped.data()[2] + 1.3).abs() < 1e-12);
    }

    #[test]
    fn export_conventions() {
        let n = 4;
        let mut raw = vec![0.0; n * n];
        raw[n + 2] = 1.0;
        let raw = Tensor::new(raw, &[n, n]).unwrap();
        let map = CorrespondenceMap {
            masked: raw.relu(),
            warp_weights: raw.clone(),
            raw,
            alpha: 100.0,
            height: 2,
            width: 2,
        };
        let uniform = export_correspondence(&map, 0, MapView::Masked).unwrap();
        assert!(uniform.pixels.iter().all(|&p| p == 0));
        let hot = export_correspondence(&map, 1, MapView::Masked).unwrap();
        assert_eq!(hot.pixels, vec![0, 0, 255, 0]);
        assert!(export_correspondence(&map, 4, MapView::Raw).is_err());
    }
}
