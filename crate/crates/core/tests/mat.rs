mod common;

use common::{corr_oracle, cosine_oracle, max_abs_diff, rng, uniform, warp_oracle};
use exemplar_core::losses::corr_loss_weights;
use exemplar_core::mat::*;
use exemplar_core::nn::{freeze_power_iteration, positional_encoding, Module};
use exemplar_tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

const GRID: usize = 4;
const N: usize = GRID * GRID;

#[test]
fn cosine_scores_match_scalar_loop_on_4x4_grids() {
    let mut r = rng(20);
    for case in 0..120 {
        let c = r.gen_range(2..10);
        let mut q = uniform(&mut r, &[N, c], -2.0, 2.0).to_vec();
        let k = uniform(&mut r, &[N, c], -2.0, 2.0);
        // Every so often a constant row exercises the floored denominator.
        if case % 10 == 0 {
            let row = r.gen_range(0..N);
            q[row * c..(row + 1) * c].fill(0.7);
        }
        let qt = Tensor::new(q.clone(), &[N, c]).unwrap();
        let got = cosine_scores(&qt, &k).unwrap();
        let want = cosine_oracle(&q, k.data(), N, N, c);
        assert!(max_abs_diff(got.data(), &want) < 1e-9, "case {case}");
        assert!(got.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }
}

#[test]
fn warp_matches_scalar_loop_on_4x4_grids() {
    let mut r = rng(21);
    for case in 0..120 {
        let c = r.gen_range(1..9);
        let alpha = if case % 2 == 0 { DEFAULT_ALPHA } else { r.gen_range(0.5..200.0) };
        let raw = uniform(&mut r, &[N, N], -1.0, 1.0);
        let masked = mask_correspondence(&raw);
        let v = uniform(&mut r, &[N, c], -3.0, 3.0);
        let (w, x) = warp_values(&masked, &v, alpha).unwrap();
        let (w_ref, x_ref) = warp_oracle(masked.data(), v.data(), N, N, c, alpha);
        assert!(max_abs_diff(w.data(), &w_ref) < 1e-9, "case {case}");
        assert!(max_abs_diff(x.data(), &x_ref) < 1e-9, "case {case}");
    }
}

fn random_stochastic(r: &mut impl Rng, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0f64).powi(3)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(data, &[n, n]).unwrap()
}

#[test]
fn corr_loss_matches_scalar_loop_on_4x4_grids() {
    let mut r = rng(22);
    for case in 0..120 {
        let s = [4, 8, 16][case % 3];
        let transpose = case % 2 == 1;
        let weights = random_stochastic(&mut r, N);
        let y_b = uniform(&mut r, &[3, s, s], 0.0, 1.0);
        let x_b = uniform(&mut r, &[3, s, s], 0.0, 1.0);
        let got = corr_loss_weights(&weights, GRID, GRID, &y_b, &x_b, transpose).unwrap().item();
        let want = corr_oracle(weights.data(), GRID, y_b.data(), x_b.data(), 3, s, transpose);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn identity_warp_of_equal_images_has_zero_corr() {
    let mut r = rng(23);
    let eye = Tensor::new((0..N * N).map(|i| if i / N == i % N { 1.0 } else { 0.0 }).collect(), &[N, N]).unwrap();
    let img = uniform(&mut r, &[3, 8, 8], 0.0, 1.0);
    assert_eq!(corr_loss_weights(&eye, GRID, GRID, &img, &img, false).unwrap().item(), 0.0);
    // Uniform weights on a constant exemplar against the same constant.
    let uni = Tensor::full(&[N, N], 1.0 / N as f64);
    let flat = Tensor::full(&[3, 8, 8], 0.3);
    assert!(corr_loss_weights(&uni, GRID, GRID, &flat, &flat, false).unwrap().item() < 1e-15);
}

#[test]
fn mask_is_exact_relu() {
    let mut r = rng(24);
    for _ in 0..50 {
        let raw = uniform(&mut r, &[N, N], -1.0, 1.0);
        let masked = mask_correspondence(&raw);
        for (m, a) in masked.data().iter().zip(raw.data()) {
            assert_eq!(*m, a.max(0.0));
            assert!(*m <= a.abs());
        }
    }
}

#[test]
fn uncorrelated_gate_extremes() {
    let mut r = rng(25);
    for _ in 0..50 {
        let mut data = vec![0.0; N * N];
        let mut expect = vec![0.0; N];
        for u in 0..N {
            match r.gen_range(0..3) {
                // all-zero row: fully unmatched
                0 => expect[u] = 1.0,
                // mass at least one
                1 => {
                    let k = r.gen_range(1..N);
                    for v in 0..N {
                        data[u * N + v] = if v < k { r.gen_range(1.0 / k as f64..=1.0) } else { 0.0 };
                    }
                }
                _ => {
                    let v = r.gen_range(0..N);
                    data[u * N + v] = r.gen_range(0.0..0.99);
                    expect[u] = 1.0 - data[u * N + v];
                }
            }
        }
        let masked = Tensor::new(data, &[N, N]).unwrap();
        let c = uncorrelated_coefficient(&masked, GRID, GRID, true).unwrap();
        assert!(max_abs_diff(c.data(), &expect) < 1e-12);
        let q = uniform(&mut r, &[3, GRID, GRID], -1.0, 1.0);
        let x = uncorrelated_select(&masked, &q, true).unwrap();
        for u in 0..N {
            for ch in 0..3 {
                let got = x.data()[ch * N + u];
                let want = expect[u] * q.data()[ch * N + u];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
    let heavy = Tensor::full(&[1, 10], 0.23);
    assert_eq!(uncorrelated_coefficient(&heavy, 1, 1, true).unwrap().data(), [0.0]);
    let c = uncorrelated_coefficient(&heavy, 1, 1, false).unwrap().item();
    assert!((c + 1.3).abs() < 1e-12);
}

#[test]
fn warp_rows_are_distributions() {
    let mut r = rng(26);
    for _ in 0..50 {
        let raw = uniform(&mut r, &[N, N], -1.0, 1.0);
        for alpha in [1e-3, 1.0, DEFAULT_ALPHA, 1e4] {
            let (w, _) = warp_values(&mask_correspondence(&raw), &Tensor::ones(&[N, 2]), alpha).unwrap();
            for row in w.data().chunks(N) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }
    let zero_row = Tensor::zeros(&[1, 4]);
    let v = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[4, 2]).unwrap();
    let (w, x) = warp_values(&zero_row, &v, DEFAULT_ALPHA).unwrap();
    assert!(w.data().iter().all(|p| (p - 0.25).abs() < 1e-15));
    assert!(max_abs_diff(x.data(), &[4.0, 5.0]) < 1e-12);
    assert!(warp_values(&zero_row, &v, 0.0).is_err());
}

#[test]
fn raw_and_masked_warps_differ_when_scores_are_negative() {
    let mut r = rng(27);
    for _ in 0..50 {
        // Mostly negative scores: rows whose best match is weak are where the
        // mask changes the softmax noticeably at alpha = 100.
        let raw = uniform(&mut r, &[N, N], -1.0, 0.05);
        let v = uniform(&mut r, &[N, 4], -1.0, 1.0);
        let (wm, xm) = warp_values(&mask_correspondence(&raw), &v, DEFAULT_ALPHA).unwrap();
        let (wr, xr) = warp_values(&raw, &v, DEFAULT_ALPHA).unwrap();
        assert!(max_abs_diff(wm.data(), wr.data()) > 1e-3);
        assert!(max_abs_diff(xm.data(), xr.data()) > 1e-3);
        // Rows without negative entries warp identically.
        let pos = raw.abs();
        let (a, _) = warp_values(&mask_correspondence(&pos), &v, DEFAULT_ALPHA).unwrap();
        let (b, _) = warp_values(&pos, &v, DEFAULT_ALPHA).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn mask_ablation_is_visible_inside_a_block() {
    let mut r = rng(28);
    let c = 8;
    let on = MatConfig::default();
    let off = MatConfig { disable_mask: true, ..on };
    let block_on = MatBlock::new(&mut rng(99), c, 1, on).unwrap();
    let block_off = MatBlock::new(&mut rng(99), c, 1, off).unwrap();
    block_on.tie_key_to_query().unwrap();
    block_off.tie_key_to_query().unwrap();
    let _f = freeze_power_iteration();
    // Keys cluster around f; query position 0 holds -f, so with tied bias-free
    // projections its whole raw row sits near -1.
    let f: Vec<f64> = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut y = vec![0.0; c * N];
    let mut x = uniform(&mut r, &[c, GRID, GRID], -1.0, 1.0).to_vec();
    for ch in 0..c {
        for pos in 0..N {
            y[ch * N + pos] = f[ch] + 0.3 * r.gen_range(-1.0..1.0);
        }
        x[ch * N] = -f[ch];
    }
    let x = Tensor::new(x, &[c, GRID, GRID]).unwrap();
    let y = Tensor::new(y, &[c, GRID, GRID]).unwrap();
    let cond = uniform(&mut r, &[1, 8, 8], 0.0, 1.0);
    let a = block_on.forward(&x, &y, &y, &cond).unwrap();
    let b = block_off.forward(&x, &y, &y, &cond).unwrap();
    assert_eq!(a.map.raw.data(), b.map.raw.data());
    assert!(a.map.raw.data()[..N].iter().all(|v| *v < -0.5));
    assert_eq!(b.map.masked.data(), b.map.raw.data());
    assert!(a.map.masked.data()[..N].iter().all(|v| *v == 0.0));
    assert!(a.map.warp_weights.data()[..N].iter().all(|p| (p - 1.0 / N as f64).abs() < 1e-15));
    assert!(max_abs_diff(&a.map.warp_weights.data()[..N], &b.map.warp_weights.data()[..N]) > 1e-2);
    assert!(max_abs_diff(a.state.x_cor.data(), b.state.x_cor.data()) > 1e-3);
}

#[test]
fn scaling_a_centred_query_leaves_its_warp_unchanged() {
    let mut r = rng(29);
    for _ in 0..30 {
        let c = r.gen_range(2..8);
        let q = uniform(&mut r, &[N, c], -1.0, 1.0);
        let k = uniform(&mut r, &[N, c], -1.0, 1.0);
        let v = uniform(&mut r, &[N, c], -1.0, 1.0);
        let scale = r.gen_range(0.01..50.0);
        let q2 = q.scale(scale);
        let (_, x1) = warp_values(&mask_correspondence(&cosine_scores(&q, &k).unwrap()), &v, DEFAULT_ALPHA).unwrap();
        let (_, x2) = warp_values(&mask_correspondence(&cosine_scores(&q2, &k).unwrap()), &v, DEFAULT_ALPHA).unwrap();
        assert!(max_abs_diff(x1.data(), x2.data()) < 1e-9);
    }
}

#[test]
fn identical_features_with_tied_projections_match_themselves() {
    let mut r = rng(30);
    let c = 8;
    let block = MatBlock::new(&mut r, c, 1, MatConfig::default()).unwrap();
    block.tie_key_to_query().unwrap();
    let _f = freeze_power_iteration();
    let pe = positional_encoding(GRID, GRID, c).unwrap();
    let cond = Tensor::zeros(&[1, 8, 8]);
    for trial in 0..100 {
        let feat = uniform(&mut r, &[c, GRID, GRID], -1.0, 1.0);
        let with_pe = feat.add(&pe).unwrap();
        let out = block.forward(&with_pe, &with_pe, &feat, &cond).unwrap();
        for (u, row) in out.map.warp_weights.data().chunks(N).enumerate() {
            let argmax = (0..N).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(argmax, u, "trial {trial}");
        }
    }
}

#[test]
fn zero_adaconv_makes_block_output_the_aggregate() {
    let mut r = rng(31);
    let c = 8;
    let block = MatBlock::new(&mut r, c, 1, MatConfig::default()).unwrap();
    for (_, p) in block.adaconv().named_params() {
        p.set_data(vec![0.0; p.numel()]).unwrap();
    }
    let x = uniform(&mut r, &[c, GRID, GRID], -1.0, 1.0);
    let y = uniform(&mut r, &[c, GRID, GRID], -1.0, 1.0);
    let out = block.forward(&x, &y, &y, &uniform(&mut r, &[1, 8, 8], 0.0, 1.0)).unwrap();
    assert_eq!(out.state.x_mat.shape(), [c, GRID, GRID]);
    assert_eq!(out.state.x_mat.data(), out.state.x_agg.data());
    // The aggregate is position-normalized.
    for pos in 0..N {
        let mean = (0..c).map(|ch| out.state.x_agg.data()[ch * N + pos]).sum::<f64>() / c as f64;
        assert!(mean.abs() < 1e-9);
    }
}

#[test]
fn single_block_stack_equals_the_block() {
    let mut r = rng(32);
    let c = 8;
    let cfg = MatConfig::default();
    let stack = MatStack::new(&mut rng(7), 1, c, 1, cfg).unwrap();
    let block = MatBlock::new(&mut rng(7), c, 1, cfg).unwrap();
    let x = uniform(&mut r, &[c, GRID, GRID], -1.0, 1.0);
    let y = uniform(&mut r, &[c, GRID, GRID], -1.0, 1.0);
    let cond = uniform(&mut r, &[1, 8, 8], 0.0, 1.0);
    let pe = positional_encoding(GRID, GRID, c).unwrap();
    let s = stack.forward(&x, &y, &cond).unwrap();
    let b = block.forward(&x.add(&pe).unwrap(), &y.add(&pe).unwrap(), &y, &cond).unwrap();
    assert_eq!(s.maps.len(), 1);
    assert_eq!(s.x_mat.data(), b.state.x_mat.data());

    let three = MatStack::new(&mut r, 3, c, 1, cfg).unwrap();
    let out = three.forward(&x, &y, &cond).unwrap();
    assert_eq!((three.len(), out.maps.len(), out.states.len()), (3, 3, 3));
    assert_eq!(out.x_mat.shape(), x.shape());
    assert!(MatStack::new(&mut r, 0, c, 1, cfg).is_err());
}

fn map_from_raw(raw: Vec<f64>, h: usize, w: usize) -> CorrespondenceMap {
    let n = h * w;
    let raw = Tensor::new(raw, &[n, n]).unwrap();
    let masked = mask_correspondence(&raw);
    let (warp_weights, _) = warp_values(&masked, &Tensor::ones(&[n, 1]), DEFAULT_ALPHA).unwrap();
    CorrespondenceMap { raw, masked, warp_weights, alpha: DEFAULT_ALPHA, height: h, width: w }
}

#[test]
fn exported_pair_differs_exactly_at_negative_scores() {
    let mut r = rng(33);
    for _ in 0..20 {
        let map = map_from_raw(uniform(&mut r, &[N, N], -1.0, 1.0).to_vec(), GRID, GRID);
        let u = r.gen_range(0..N);
        let (raw, masked) = export_correspondence_pair(&map, u).unwrap();
        let row = &map.raw.data()[u * N..(u + 1) * N];
        for (i, score) in row.iter().enumerate() {
            assert_eq!(raw.pixels[i] != masked.pixels[i], *score < 0.0, "pixel {i}: {score}");
        }
    }
}

#[test]
fn export_degenerate_and_one_hot_rows() {
    let mut one_hot = vec![0.0; N * N];
    one_hot[3 * N + 9] = 0.8;
    let map = map_from_raw(one_hot, GRID, GRID);
    let img = export_correspondence(&map, 3, MapView::Masked).unwrap();
    assert_eq!((img.width, img.height), (GRID, GRID));
    for (i, p) in img.pixels.iter().enumerate() {
        assert_eq!(*p, if i == 9 { 255 } else { 0 });
    }
    assert!(export_correspondence(&map, 0, MapView::Raw).unwrap().pixels.iter().all(|p| *p == 0));
    assert!(export_correspondence(&map, N, MapView::Raw).is_err());
}

proptest! {
    #[test]
    fn warp_and_gate_stay_bounded(raw in proptest::collection::vec(-1.0f64..1.0, N * N), alpha in 0.01f64..1000.0) {
        let raw = Tensor::new(raw, &[N, N]).unwrap();
        let masked = mask_correspondence(&raw);
        let v = Tensor::new((0..N * 3).map(|i| (i as f64).sin()).collect(), &[N, 3]).unwrap();
        let (w, x) = warp_values(&masked, &v, alpha).unwrap();
        for row in w.data().chunks(N) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(x.all_finite());
        let c = uncorrelated_coefficient(&masked, GRID, GRID, true).unwrap();
        prop_assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
