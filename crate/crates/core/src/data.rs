//! Procedural training triplets: shapes on a gradient background, a random
//! affine warp of the same image as exemplar, and its edge map as source.

use exemplar_tensor::{no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::losses::edge_extract;

#[derive(Debug, Clone)]
pub struct TrainTriplet {
    /// `[1, S, S]` edge map of `x_b`.
    pub x_a: Tensor,
    /// `[3, S, S]` warped `x_b`.
    pub y_b: Tensor,
    /// `[3, S, S]` ground truth.
    pub x_b: Tensor,
}

/// Affine warp about the image centre. Translation is a fraction of the side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpParams {
    pub rotation_deg: f64,
    pub translate: (f64, f64),
    pub scale: f64,
    pub flip: bool,
}

impl WarpParams {
    pub const IDENTITY: Self = Self {
        rotation_deg: 0.0,
        translate: (0.0, 0.0),
        scale: 1.0,
        flip: false,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            rotation_deg: rng.gen_range(-20.0..=20.0),
            translate: (rng.gen_range(-0.125..=0.125), rng.gen_range(-0.125..=0.125)),
            scale: rng.gen_range(0.9..=1.1),
            flip: rng.gen_bool(0.5),
        }
    }
}

/// Reflects `p` into `[0, n − 1]` (mirror without repeating the edge pixel).
fn reflect(p: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = p.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

/// Inverse-maps every output pixel through the warp and samples bilinearly
/// with reflect padding.
pub fn warp(img: &Tensor, p: &WarpParams) -> Result<Tensor> {
    let [c, h, w] = *img.shape() else {
        return Err(invalid(format!("warp expects [C, H, W], got {:?}", img.shape())));
    };
    let src = img.data();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let (ty, tx) = (p.translate.0 * h as f64, p.translate.1 * w as f64);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let xo = if p.flip { (w - 1 - x) as f64 } else { x as f64 };
            let (dy, dx) = (y as f64 - cy - ty, xo - cx - tx);
            let sx = reflect((cos * dx + sin * dy) / p.scale + cx, w);
            let sy = reflect((-sin * dx + cos * dy) / p.scale + cy, h);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let top = if fx == 0.0 { at(y0, x0) } else { at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx };
                let bot = if fx == 0.0 { at(y1, x0) } else { at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx };
                out[(ch * h + y) * w + x] = if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy };
            }
        }
    }
    Ok(Tensor::new(out, &[c, h, w])?)
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disc,
    Box,
    Ring,
}

fn smoothstep_inside(sd: f64, softness: f64) -> f64 {
    (0.5 - sd / softness).clamp(0.0, 1.0)
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// `[3, size, size]` image with 2–4 soft-edged shapes on a linear gradient.
pub fn render_scene(rng: &mut impl Rng, size: usize) -> Tensor {
    let s = size as f64;
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let mut img = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let t = (((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            for ch in 0..3 {
                img[(ch * size + y) * size + x] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    let count = rng.gen_range(2..=4);
    let softness = 1.5;
    for _ in 0..count {
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Disc,
            1 => ShapeKind::Box,
            _ => ShapeKind::Ring,
        };
        let fill = color(rng);
        let (cx, cy) = (rng.gen_range(0.2..0.8) * s, rng.gen_range(0.2..0.8) * s);
        let r = rng.gen_range(0.12..0.25) * s;
        let (hw, hh) = (rng.gen_range(0.1..0.25) * s, rng.gen_range(0.1..0.25) * s);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let sd = match kind {
                    ShapeKind::Disc => (px * px + py * py).sqrt() - r,
                    ShapeKind::Box => (px.abs() - hw).max(py.abs() - hh),
                    ShapeKind::Ring => ((px * px + py * py).sqrt() - r).abs() - r * 0.35,
                };
                let a = smoothstep_inside(sd, softness);
                if a > 0.0 {
                    for ch in 0..3 {
                        let v = &mut img[(ch * size + y) * size + x];
                        *v = *v * (1.0 - a) + fill[ch] * a;
                    }
                }
            }
        }
    }
    Tensor::new(img, &[3, size, size]).expect("sizes agree")
}

/// Random generator for sample `index` of dataset `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn synth_triplet(seed: u64, index: u64, size: usize) -> Result<TrainTriplet> {
    let mut rng = sample_rng(seed, index);
    let x_b = render_scene(&mut rng, size);
    let params = WarpParams::sample(&mut rng);
    triplet_with_warp(x_b, &params)
}

pub fn triplet_with_warp(x_b: Tensor, params: &WarpParams) -> Result<TrainTriplet> {
    let _g = no_grad();
    let y_b = warp(&x_b, params)?;
    let x_a = edge_extract(&x_b)?;
    Ok(TrainTriplet { x_a, y_b, x_b })
}

pub fn synth_dataset(n: usize, seed: u64, size: usize) -> Result<Vec<TrainTriplet>> {
    if n == 0 {
        return Err(invalid("dataset size must be positive"));
    }
    if !matches!(size, 32 | 64) && !(size >= 8 && size.is_power_of_two()) {
        return Err(invalid(format!("image size must be a power of two >= 8, got {size}")));
    }
    (0..n as u64).map(|i| synth_triplet(seed, i, size)).collect()
}
