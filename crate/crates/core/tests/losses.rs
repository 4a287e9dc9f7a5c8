mod common;

use common::{info_nce_oracle, max_abs_diff, rng, uniform};
use exemplar_core::losses::*;
use exemplar_tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn unit_code(r: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn basis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Queue of `count` unit codes orthogonal to the first two axes.
fn orthogonal_queue(dim: usize, count: usize, r: &mut impl Rng) -> StyleQueue {
    let mut q = StyleQueue::new(dim, DEFAULT_QUEUE_CAPACITY).unwrap();
    for _ in 0..count {
        let mut v = unit_code(r, dim);
        v[0] = 0.0;
        v[1] = 0.0;
        q.push(&v).unwrap();
    }
    q
}

#[test]
fn aligned_anchor_against_orthogonal_negatives() {
    let mut r = rng(40);
    let dim = 16;
    let q = orthogonal_queue(dim, 1024, &mut r);
    assert_eq!(q.len(), 1024);
    let z = Tensor::new(basis(dim, 0), &[dim]).unwrap();
    let got = style_contrastive(&z, &z, &q, DEFAULT_TAU).unwrap().item();
    let closed = -((1.0 / DEFAULT_TAU).exp() / ((1.0 / DEFAULT_TAU).exp() + 1024.0)).ln();
    assert!(rel(got, closed) < 1e-6, "{got} vs {closed}");
    assert!(rel(got, 1024.0 * (-1.0 / DEFAULT_TAU).exp()) < 1e-3);
    assert!((got - 6.4e-4).abs() < 1e-5);
}

#[test]
fn fully_orthogonal_codes_give_log_1025() {
    let mut r = rng(41);
    let dim = 16;
    let q = orthogonal_queue(dim, 1024, &mut r);
    let z = Tensor::new(basis(dim, 0), &[dim]).unwrap();
    let zp = Tensor::new(basis(dim, 1), &[dim]).unwrap();
    let got = style_contrastive(&z, &zp, &q, DEFAULT_TAU).unwrap().item();
    assert!(rel(got, 1025f64.ln()) < 1e-6, "{got}");
    assert!((got - 6.932).abs() < 1e-3);
}

#[test]
fn empty_queue_and_matching_codes_give_zero() {
    let q = StyleQueue::new(4, 8).unwrap();
    let z = Tensor::new(vec![0.5, 0.5, 0.5, 0.5], &[4]).unwrap();
    assert_eq!(style_contrastive(&z, &z, &q, DEFAULT_TAU).unwrap().item(), 0.0);
    assert!(style_contrastive(&z, &z, &q, 0.0).is_err());
    assert!(style_contrastive(&Tensor::zeros(&[3]), &z, &q, DEFAULT_TAU).is_err());
}

#[test]
fn info_nce_matches_scalar_loop() {
    let mut r = rng(42);
    for case in 0..60 {
        let dim = r.gen_range(2..20);
        let cap = r.gen_range(1..40);
        let mut q = StyleQueue::new(dim, cap).unwrap();
        for _ in 0..r.gen_range(0..2 * cap) {
            q.push(&unit_code(&mut r, dim)).unwrap();
        }
        let z = unit_code(&mut r, dim);
        let zp = unit_code(&mut r, dim);
        let tau = if case % 2 == 0 { DEFAULT_TAU } else { r.gen_range(0.01..2.0) };
        let negatives: Vec<Vec<f64>> = q.entries().iter().map(|e| e.to_vec()).collect();
        let got = style_contrastive(&Tensor::new(z.clone(), &[dim]).unwrap(), &Tensor::new(zp.clone(), &[dim]).unwrap(), &q, tau)
            .unwrap()
            .item();
        let want = info_nce_oracle(&z, &zp, &negatives, tau);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn queue_is_fifo_at_capacity_1024() {
    let mut r = rng(43);
    let dim = 4;
    let mut q = StyleQueue::new(dim, DEFAULT_QUEUE_CAPACITY).unwrap();
    assert_eq!(q.capacity(), 1024);
    let codes: Vec<Vec<f64>> = (0..1025).map(|_| unit_code(&mut r, dim)).collect();
    let mut last = 0;
    for c in &codes {
        assert!(q.push(c).unwrap());
        assert!(q.len() >= last);
        last = q.len();
    }
    assert_eq!(q.len(), 1024);
    let entries = q.entries();
    assert_eq!(entries[0], codes[1].as_slice());
    assert_eq!(entries[1023], codes[1024].as_slice());
    assert!(entries.iter().all(|e| e != &codes[0].as_slice()));
    // One more push evicts the next oldest.
    q.push(&codes[0]).unwrap();
    assert_eq!(q.entries()[0], codes[2].as_slice());
}

#[test]
fn queue_renormalizes_and_freezes() {
    let mut q = StyleQueue::new(2, 3).unwrap();
    q.push(&[3.0, 4.0]).unwrap();
    assert_eq!(q.entries()[0], [0.6, 0.8]);
    assert!(!q.push(&[0.0, 0.0]).unwrap());
    assert!(!q.push(&[f64::NAN, 1.0]).unwrap());
    assert!(q.push(&[1.0]).is_err());
    q.freeze();
    let before = q.clone();
    assert!(!q.push(&[1.0, 0.0]).unwrap());
    assert_eq!(q, before);
    assert!(q.is_frozen());
}

#[test]
fn align_loss_cases() {
    let mut r = rng(44);
    let a = uniform(&mut r, &[8, 4, 4], -1.0, 1.0);
    assert_eq!(align_loss(&a, &a).unwrap().item(), 0.0);
    let b = a.add_scalar(0.5);
    assert!((align_loss(&a, &b).unwrap().item() - 0.5).abs() < 1e-12);
    let c = uniform(&mut r, &[8, 4, 4], -1.0, 1.0);
    assert_eq!(align_loss(&a, &c).unwrap().item(), align_loss(&c, &a).unwrap().item());
    assert!(align_loss(&a, &Tensor::zeros(&[8, 4, 2])).is_err());
}

#[test]
fn perceptual_loss_vanishes_on_equal_images_and_descends() {
    let fe = FeatureExtractor::seeded(7);
    let mut r = rng(45);
    let x_b = uniform(&mut r, &[3, 16, 16], 0.0, 1.0);
    assert_eq!(perceptual_loss(&fe, &x_b, &x_b).unwrap().item(), 0.0);
    let mut x = uniform(&mut r, &[3, 16, 16], 0.0, 1.0);
    let first = perceptual_loss(&fe, &x, &x_b).unwrap().item();
    let mut prev = first;
    for step in 0..50 {
        let leaf = x.requires_grad_(true);
        let l = perceptual_loss(&fe, &leaf, &x_b).unwrap();
        assert!(l.item() >= 0.0);
        assert!(l.item() <= prev * 1.05 + 1e-12, "step {step}: {} after {prev}", l.item());
        prev = l.item();
        l.backward().unwrap();
        let g = leaf.grad().unwrap();
        let peak = g.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        x = Tensor::new(x.data().iter().zip(&g).map(|(v, d)| v - 0.01 * d / peak).collect(), x.shape()).unwrap();
    }
    assert!(prev < 0.5 * first, "{prev} vs {first}");
}

#[test]
fn contextual_similarity_single_feature_and_permutation() {
    let f = Tensor::new(vec![0.3, -1.0, 2.0], &[3, 1, 1]).unwrap();
    assert!((contextual_similarity(&f, &f).unwrap().item() - 1.0).abs() < 1e-12);

    let mut r = rng(46);
    let x = uniform(&mut r, &[6, 3, 4], -1.0, 1.0);
    let y = uniform(&mut r, &[6, 3, 4], -1.0, 1.0);
    let mut perm: Vec<usize> = (0..12).collect();
    for i in (1..12).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let mut yp = vec![0.0; 72];
    for ch in 0..6 {
        for (j, &src) in perm.iter().enumerate() {
            yp[ch * 12 + j] = y.data()[ch * 12 + src];
        }
    }
    let yp = Tensor::new(yp, &[6, 3, 4]).unwrap();
    let a = contextual_similarity(&x, &y).unwrap().item();
    let b = contextual_similarity(&x, &yp).unwrap().item();
    assert!((a - b).abs() < 1e-12);
    assert!(a > 0.0 && a <= 1.0);
}

#[test]
fn contextual_loss_is_smallest_at_the_exemplar() {
    let fe = FeatureExtractor::seeded(8);
    let mut r = rng(47);
    let y_b = uniform(&mut r, &[3, 16, 16], 0.0, 1.0);
    let base = contextual_loss(&fe, &y_b, &y_b).unwrap().item();
    assert!(base.abs() < 1e-2, "{base}");
    for _ in 0..10 {
        let noise = uniform(&mut r, &[3, 16, 16], -0.2, 0.2);
        let pert = y_b.add(&noise).unwrap();
        assert!(base <= contextual_loss(&fe, &pert, &y_b).unwrap().item());
    }
}

fn rot90(img: &Tensor) -> Tensor {
    let [c, h, w] = *img.shape() else { unreachable!() };
    let mut out = vec![0.0; c * h * w];
    // out[y][x] = in[x][w - 1 - y] (counter-clockwise)
    for ch in 0..c {
        for y in 0..w {
            for x in 0..h {
                out[(ch * w + y) * h + x] = img.data()[(ch * h + x) * w + (w - 1 - y)];
            }
        }
    }
    Tensor::new(out, &[c, w, h]).unwrap()
}

#[test]
fn edge_extract_cases() {
    let flat = Tensor::full(&[3, 8, 8], 0.4);
    assert!(edge_extract(&flat).unwrap().data().iter().all(|v| *v == 0.0));

    // Vertical step between columns 3 and 4.
    let step = Tensor::new((0..64).map(|i| if i % 8 >= 4 { 1.0 } else { 0.0 }).collect(), &[1, 8, 8]).unwrap();
    let e = edge_extract(&step).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            let v = e.data()[y * 8 + x];
            if x == 3 || x == 4 {
                assert!((v - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    let mut r = rng(48);
    for _ in 0..10 {
        let img = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
        let a = rot90(&edge_extract(&img).unwrap());
        let b = edge_extract(&rot90(&img)).unwrap();
        assert!(max_abs_diff(a.data(), b.data()) < 1e-9);
        let e = edge_extract(&img).unwrap();
        assert_eq!(e.shape(), [1, 8, 8]);
        assert!((e.data().iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }
    assert!(edge_extract(&Tensor::zeros(&[2, 4, 4])).is_err());
}

#[test]
fn structural_loss_cases() {
    let fe = FeatureExtractor::seeded(9);
    let mut r = rng(49);
    let img = uniform(&mut r, &[3, 16, 16], 0.2, 0.8);
    assert_eq!(structural_loss(&fe, &img, &img).unwrap().item(), 0.0);
    let shifted = img.add_scalar(0.1);
    assert!(structural_loss(&fe, &shifted, &img).unwrap().item() < 1e-6);
    let other = uniform(&mut r, &[3, 16, 16], 0.2, 0.8);
    assert!(structural_loss(&fe, &other, &img).unwrap().item() > 0.0);
}

#[test]
fn hinge_cases() {
    let real = Tensor::full(&[1, 4, 4], 1.5);
    let fake = Tensor::full(&[1, 4, 4], -1.5);
    let (d, g) = adversarial_losses(&real, &fake).unwrap();
    assert_eq!(d.item(), 0.0);
    assert_eq!(g.item(), 1.5);
    let (d, _) = adversarial_losses(&Tensor::full(&[1, 2, 2], 0.2), &Tensor::full(&[1, 2, 2], -5.0)).unwrap();
    assert!((d.item() - 0.8).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for k in -5..5 {
        let (_, g) = adversarial_losses(&real, &Tensor::full(&[1, 2, 2], k as f64 * 0.3)).unwrap();
        assert!(g.item() < prev);
        prev = g.item();
    }
}

fn parts_of(vals: [f64; 8]) -> LossParts {
    let s = Tensor::scalar;
    LossParts {
        style: s(vals[0]),
        align: s(vals[1]),
        corr: s(vals[2]),
        structural: s(vals[3]),
        perceptual: s(vals[4]),
        contextual: s(vals[5]),
        adv_g: s(vals[6]),
        adv_d: s(vals[7]),
    }
}

#[test]
fn total_loss_is_linear_in_the_weights() {
    let vals = [0.3, 1.1, 0.05, 0.7, 0.2, 1.9, -0.4, 1.6];
    let parts = parts_of(vals);
    let (g, d) = total_loss(&parts, &LossWeights::zero()).unwrap();
    assert_eq!((g.item(), d.item()), (0.0, 0.0));
    let single = |f: fn(&mut LossWeights)| {
        let mut w = LossWeights::zero();
        f(&mut w);
        total_loss(&parts, &w).unwrap()
    };
    assert_eq!(single(|w| w.style = 1.0).0.item(), vals[0]);
    assert_eq!(single(|w| w.align = 1.0).0.item(), vals[1]);
    assert_eq!(single(|w| w.corr = 1.0).0.item(), vals[2]);
    assert_eq!(single(|w| w.structural = 1.0).0.item(), vals[3]);
    assert_eq!(single(|w| w.perceptual = 1.0).0.item(), vals[4] + vals[5]);
    let (g, d) = single(|w| w.adversarial = 1.0);
    assert_eq!((g.item(), d.item()), (vals[6], vals[7]));

    let w = LossWeights::default();
    let (g, _) = total_loss(&parts, &w).unwrap();
    let expect = vals[0] + vals[1] + 10.0 * vals[2] + vals[3] + vals[4] + vals[5] + vals[6];
    assert!((g.item() - expect).abs() < 1e-12);
    let bad = LossWeights { corr: -1.0, ..w };
    assert!(total_loss(&parts, &bad).is_err());
}

#[test]
fn extractor_is_seeded_and_serializable() {
    let a = FeatureExtractor::seeded(3);
    let b = FeatureExtractor::seeded(3);
    let c = FeatureExtractor::seeded(4);
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_ne!(a.to_bytes(), c.to_bytes());
    let back = FeatureExtractor::from_bytes(&a.to_bytes()).unwrap();
    assert_eq!(back.to_bytes(), a.to_bytes());
    let img = uniform(&mut rng(50), &[3, 16, 16], 0.0, 1.0);
    let taps = a.taps(&img).unwrap();
    assert_eq!(taps.len(), TAPS);
    assert_eq!(taps[3].data(), back.tap(&img, 4).unwrap().data());
    let mut bytes = a.to_bytes();
    bytes[0] = b'X';
    assert!(FeatureExtractor::from_bytes(&bytes).is_err());
    assert!(FeatureExtractor::from_bytes(&a.to_bytes()[..40]).is_err());
}

proptest! {
    #[test]
    fn info_nce_is_nonnegative_and_finite(seed in 0u64..1000, n in 0usize..30) {
        let mut r = rng(seed);
        let mut q = StyleQueue::new(6, 16).unwrap();
        for _ in 0..n {
            q.push(&unit_code(&mut r, 6)).unwrap();
        }
        let z = Tensor::new(unit_code(&mut r, 6), &[6]).unwrap();
        let zp = Tensor::new(unit_code(&mut r, 6), &[6]).unwrap();
        let l = style_contrastive(&z, &zp, &q, DEFAULT_TAU).unwrap().item();
        prop_assert!(l.is_finite() && l >= 0.0);
        prop_assert!(q.len() <= 16);
    }
}
