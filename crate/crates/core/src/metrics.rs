//! Feature-cosine style metrics and the sliced Wasserstein distance between
//! patch sets.

use exemplar_tensor::{no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::losses::FeatureExtractor;

pub const SWD_PATCH: usize = 7;
pub const SWD_STRIDE: usize = 4;
pub const SWD_PROJECTIONS: usize = 64;
pub const SWD_REPEATS: usize = 4;
pub const SWD_SEED: u64 = 0x5EED;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub texture: f64,
    pub color: f64,
    pub semantic: f64,
    pub swd: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "texture,color,semantic,swd";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.texture, self.color, self.semantic, self.swd)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    dot / (na * nb).max(1e-12)
}

/// Channel means of a `[C, H, W]` feature map.
fn pooled(t: &Tensor) -> Vec<f64> {
    let c = t.shape()[0];
    let n = t.numel() / c;
    t.data().chunks(n).map(|ch| ch.iter().sum::<f64>() / n as f64).collect()
}

/// Cosine similarity of spatially pooled features at each tap (1-based).
pub fn tap_cosines(fe: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<[f64; 5]> {
    let _g = no_grad();
    let fa = fe.taps(a)?;
    let fb = fe.taps(b)?;
    let mut out = [0.0; 5];
    for (k, o) in out.iter_mut().enumerate() {
        *o = cosine(&pooled(&fa[k]), &pooled(&fb[k]));
    }
    Ok(out)
}

/// Mean-removed `7×7×C` patches at stride 4, one row per patch.
pub fn patch_descriptors(img: &Tensor) -> Result<Vec<Vec<f64>>> {
    let [c, h, w] = *img.shape() else {
        return Err(invalid(format!("patches need [C, H, W], got {:?}", img.shape())));
    };
    if h < SWD_PATCH || w < SWD_PATCH {
        return Err(invalid(format!("image {h}x{w} smaller than a {SWD_PATCH}x{SWD_PATCH} patch")));
    }
    let d = img.data();
    let mut out = Vec::new();
    for y in (0..=h - SWD_PATCH).step_by(SWD_STRIDE) {
        for x in (0..=w - SWD_PATCH).step_by(SWD_STRIDE) {
            let mut patch = Vec::with_capacity(c * SWD_PATCH * SWD_PATCH);
            for ch in 0..c {
                let start = patch.len();
                for dy in 0..SWD_PATCH {
                    for dx in 0..SWD_PATCH {
                        patch.push(d[(ch * h + y + dy) * w + x + dx]);
                    }
                }
                let mean = patch[start..].iter().sum::<f64>() / (SWD_PATCH * SWD_PATCH) as f64;
                patch[start..].iter_mut().for_each(|v| *v -= mean);
            }
            out.push(patch);
        }
    }
    Ok(out)
}

/// Sliced Wasserstein distance between two equally sized descriptor sets:
/// mean over `repeats × projections` random unit directions of the mean
/// absolute difference of the sorted projections.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], projections: usize, repeats: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(invalid(format!("descriptor sets must be non-empty and equal in size ({} vs {})", a.len(), b.len())));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(invalid("descriptor dimensions differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..repeats * projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        dir.iter_mut().for_each(|v| *v /= n);
        let project = |set: &[Vec<f64>]| {
            let mut p: Vec<f64> = set.iter().map(|v| v.iter().zip(&dir).map(|(x, d)| x * d).sum()).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pa, pb) = (project(a), project(b));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / pa.len() as f64;
    }
    Ok(total / (repeats * projections) as f64)
}

pub fn swd_images(a: &[Tensor], b: &[Tensor], seed: u64) -> Result<f64> {
    let collect = |set: &[Tensor]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for img in set {
            out.extend(patch_descriptors(img)?);
        }
        Ok(out)
    };
    sliced_wasserstein(&collect(a)?, &collect(b)?, SWD_PROJECTIONS, SWD_REPEATS, seed)
}

/// Texture and color compare generated images with their exemplars (taps 2
/// and 1), semantic compares with the ground truth (taps 3–5 averaged), and
/// SWD compares patch statistics with the ground truth.
pub fn eval_metrics(fe: &FeatureExtractor, generated: &[Tensor], exemplars: &[Tensor], ground_truth: &[Tensor]) -> Result<MetricsReport> {
    if generated.is_empty() || generated.len() != exemplars.len() || generated.len() != ground_truth.len() {
        return Err(invalid(format!(
            "metric lists must be non-empty and equal length ({}, {}, {})",
            generated.len(),
            exemplars.len(),
            ground_truth.len()
        )));
    }
    let n = generated.len() as f64;
    let (mut texture, mut color, mut semantic) = (0.0, 0.0, 0.0);
    for ((g, e), t) in generated.iter().zip(exemplars).zip(ground_truth) {
        let ce = tap_cosines(fe, g, e)?;
        let ct = tap_cosines(fe, g, t)?;
        color += ce[0];
        texture += ce[1];
        semantic += (ct[2] + ct[3] + ct[4]) / 3.0;
    }
    Ok(MetricsReport {
        texture: texture / n,
        color: color / n,
        semantic: semantic / n,
        swd: swd_images(generated, ground_truth, SWD_SEED)?,
    })
}
