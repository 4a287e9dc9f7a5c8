mod common;

use common::{max_abs_diff, rng, top_singular_value, uniform};
use exemplar_core::nn::*;
use exemplar_tensor::{gradcheck, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn svd_of(t: &Tensor) -> f64 {
    let rows = t.shape()[0];
    top_singular_value(t.data(), rows, t.numel() / rows)
}

#[test]
fn singular_value_oracle_on_known_matrices() {
    assert!((top_singular_value(&[3.0, 0.0, 0.0, 1.0], 2, 2) - 3.0).abs() < 1e-12);
    // Rotated diag(5, 2): [[c, -s], [s, c]] · diag(5, 2).
    let (c, s) = (0.6, 0.8);
    let m = [5.0 * c, -2.0 * s, 5.0 * s, 2.0 * c];
    assert!((top_singular_value(&m, 2, 2) - 5.0).abs() < 1e-12);
    // Rank one: outer product of [1, 2] and [2, 0, 1] has σ = √5 · √5.
    let m = [2.0, 0.0, 1.0, 4.0, 0.0, 2.0];
    assert!((top_singular_value(&m, 2, 3) - 5.0).abs() < 1e-12);
    assert!((top_singular_value(&m, 2, 3) - top_singular_value(&[2.0, 4.0, 0.0, 0.0, 1.0, 2.0], 3, 2)).abs() < 1e-12);
}

#[test]
fn cold_single_step_underestimates_sigma() {
    let mut r = rng(5);
    for _ in 0..20 {
        let w = uniform(&mut r, &[8, 8], -1.0, 1.0);
        let u = common::unit(&mut r, 8);
        let step = spectral_normalize(&w, &u, None).unwrap();
        assert!(step.sigma <= svd_of(&w) + 1e-12);
        assert!(svd_of(&step.weight) >= 1.0 - 1e-12);
    }
}

#[test]
fn fresh_8x8_layer_after_one_forward_has_unit_norm() {
    let mut r = rng(4);
    for _ in 0..50 {
        let lin = Linear::new(&mut r, 8, 8, true).unwrap();
        lin.forward(&uniform(&mut r, &[8], -1.0, 1.0)).unwrap();
        let _g = freeze_power_iteration();
        let (u, v) = {
            let b = lin.named_buffers();
            (b[0].1.borrow().clone(), b[1].1.borrow().clone())
        };
        let w = lin.weight().get();
        let sigma_hat = spectral_normalize(&w, &u, Some(&v)).unwrap().sigma;
        assert!((svd_of(&w) / sigma_hat - 1.0).abs() < 5e-2);
    }
}

#[test]
fn normalized_norm_decreases_monotonically_to_one() {
    let mut r = rng(6);
    for trial in 0..25 {
        let rows = r.gen_range(2..9);
        let cols = r.gen_range(2..9);
        let w = uniform(&mut r, &[rows, cols], -1.0, 1.0);
        let mut u = common::unit(&mut r, rows);
        let mut v: Option<Vec<f64>> = None;
        let mut prev = f64::INFINITY;
        for _ in 0..40 {
            let s = spectral_normalize(&w, &u, v.as_deref()).unwrap();
            let norm = svd_of(&s.weight);
            assert!(norm >= 1.0 - 1e-9, "trial {trial}: {norm}");
            assert!(norm <= prev + 1e-9, "trial {trial}: {norm} after {prev}");
            prev = norm;
            u = s.u;
            v = Some(s.v);
        }
        assert!(prev - 1.0 < 5e-2, "trial {trial}: {prev}");
    }
}

#[test]
fn spectral_layers_have_unit_top_singular_value() {
    let mut r = rng(7);
    let shapes = [(3, 8, 3, 1), (8, 16, 3, 2), (16, 16, 1, 1), (16, 64, 1, 1), (64, 16, 1, 1), (4, 4, 3, 4)];
    for (cin, cout, k, groups) in shapes {
        let conv = Conv2d::new(&mut r, cin, cout, ConvOpts::default().kernel(k).groups(groups)).unwrap();
        let x = uniform(&mut r, &[cin, 6, 6], -1.0, 1.0);
        conv.forward(&x).unwrap();
        let sigma = svd_of(&conv.effective_weight().unwrap());
        assert!((sigma - 1.0).abs() < 5e-2, "{cin}->{cout} k{k} g{groups}: {sigma}");
    }
    let lin = Linear::new(&mut r, 128, 64, true).unwrap();
    lin.forward(&Tensor::ones(&[128])).unwrap();
    let _g = freeze_power_iteration();
    let w = lin.weight().get();
    let (u, v) = {
        let b = lin.named_buffers();
        (b[0].1.borrow().clone(), b[1].1.borrow().clone())
    };
    let sigma_hat = spectral_normalize(&w, &u, Some(&v)).unwrap().sigma;
    assert!((svd_of(&w) / sigma_hat - 1.0).abs() < 5e-2);
}

#[test]
fn plain_conv_is_not_normalized() {
    let mut r = rng(8);
    let conv = Conv2d::new(&mut r, 4, 4, ConvOpts::default().plain()).unwrap();
    assert!(!conv.is_spectral());
    assert!(conv.named_buffers().is_empty());
    assert_eq!(conv.effective_weight().unwrap().data(), conv.weight().get().data());
}

#[test]
fn pono_invariants_at_eps_zero() {
    let mut r = rng(9);
    for _ in 0..20 {
        let c = r.gen_range(2..12);
        let x = uniform(&mut r, &[c, 3, 5], -3.0, 3.0);
        let y = pono(&x, 0.0).unwrap().y;
        for pos in 0..15 {
            let col: Vec<f64> = (0..c).map(|ch| y.data()[ch * 15 + pos]).collect();
            let mean = col.iter().sum::<f64>() / c as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64).sqrt();
            assert!(mean.abs() < 1e-9, "{mean}");
            assert!((std - 1.0).abs() < 1e-6, "{std}");
        }
        let again = pono(&y, 0.0).unwrap().y;
        assert!(max_abs_diff(again.data(), y.data()) < 1e-6);
    }
}

#[test]
fn coord_attention_starts_at_quarter_scaling() {
    let mut r = rng(10);
    let ca = CoordAttention::new(&mut r, 8).unwrap();
    assert_eq!(ca.reduction_width(), 4);
    let x = uniform(&mut r, &[8, 5, 7], -1.0, 1.0);
    let g = ca.gates(&x).unwrap();
    assert!(g.a_h.data().iter().chain(g.a_w.data()).all(|v| *v == 0.5));
    let y = ca.forward(&x).unwrap();
    assert_eq!(y.shape(), x.shape());
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - 0.25 * b).abs() < 1e-15);
    }
}

fn permute_columns(x: &Tensor, perm: &[usize]) -> Tensor {
    let [c, h, w] = *x.shape() else { unreachable!() };
    let mut out = vec![0.0; x.numel()];
    for ch in 0..c {
        for y in 0..h {
            for (j, &src) in perm.iter().enumerate() {
                out[(ch * h + y) * w + j] = x.data()[(ch * h + y) * w + src];
            }
        }
    }
    Tensor::new(out, &[c, h, w]).unwrap()
}

#[test]
fn coord_attention_is_column_equivariant_and_contractive() {
    let mut r = rng(11);
    let ca = CoordAttention::new(&mut r, 8).unwrap();
    for p in ca.gate_params() {
        let n = p.numel();
        p.set_data((0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    }
    let _g = freeze_power_iteration();
    for _ in 0..10 {
        let x = uniform(&mut r, &[8, 4, 6], -2.0, 2.0);
        let mut perm: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let g = ca.gates(&x).unwrap();
        let gp = ca.gates(&permute_columns(&x, &perm)).unwrap();
        let a_w = Tensor::new(g.a_w.to_vec(), &[8, 1, 6]).unwrap();
        assert!(max_abs_diff(permute_columns(&a_w, &perm).data(), gp.a_w.data()) < 1e-12);
        assert!(max_abs_diff(g.a_h.data(), gp.a_h.data()) < 1e-12);
        let y = ca.forward(&x).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
    }
}

#[test]
fn adaconv_block_shapes_and_zero_response() {
    let mut r = rng(12);
    for (c, h, w, k) in [(4, 3, 5, 3), (8, 8, 8, 3), (16, 4, 4, 7)] {
        let block = AdaConvBlock::new(&mut r, c, k).unwrap();
        let x = uniform(&mut r, &[c, h, w], -1.0, 1.0);
        assert_eq!(block.forward(&x).unwrap().shape(), [c, h, w]);
        // Zero input with zero biases: every stage maps 0 to 0.
        let y = block.forward(&Tensor::zeros(&[c, h, w])).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0), "{c}x{h}x{w}");
    }
}

#[test]
fn adaconv_gradcheck() {
    let mut r = rng(13);
    let block = AdaConvBlock::new(&mut r, 4, 3).unwrap();
    let x = uniform(&mut r, &[4, 4, 4], -1.0, 1.0);
    let _g = freeze_power_iteration();
    let err = gradcheck(|t| Ok(block.forward(t).map_err(to_tensor)?.square().sum_all()?), &x, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

fn to_tensor(e: exemplar_core::Error) -> exemplar_tensor::TensorError {
    exemplar_tensor::TensorError::Invalid {
        op: "test",
        msg: e.to_string(),
    }
}

#[test]
fn modulation_identities() {
    let mut r = rng(14);
    let q = uniform(&mut r, &[5, 4, 4], -2.0, 3.0);
    let (mu, sigma) = instance_stats(&q);
    let restored = modulate(
        &q,
        &ModulationParams {
            gamma: sigma.clone(),
            beta: mu.clone(),
        },
    )
    .unwrap();
    assert!(max_abs_diff(restored.data(), q.data()) < 1e-6);

    let plain = modulate(
        &q,
        &ModulationParams {
            gamma: Tensor::ones(&[5, 1, 1]),
            beta: Tensor::zeros(&[5, 1, 1]),
        },
    )
    .unwrap();
    for ch in 0..5 {
        let v = &plain.data()[ch * 16..(ch + 1) * 16];
        let mean = v.iter().sum::<f64>() / 16.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-6);
    }
}

fn instance_stats(q: &Tensor) -> (Tensor, Tensor) {
    let mu = q.mean_axes(&[1, 2], true).unwrap();
    let sigma = q.var_axes(&[1, 2], true).unwrap().sqrt().unwrap();
    (mu, sigma)
}

#[test]
fn spade_gradcheck_on_features_and_head() {
    let mut r = rng(15);
    let spade = SpadeModulation::new(&mut r, 4, 1, 4).unwrap();
    let q = uniform(&mut r, &[4, 4, 4], -1.0, 1.0);
    let cond = uniform(&mut r, &[1, 8, 8], 0.0, 1.0);
    for _ in 0..20 {
        spade.forward(&q, &cond).unwrap();
    }
    let _g = freeze_power_iteration();
    let err = gradcheck(|t| Ok(spade.forward(t, &cond).map_err(to_tensor)?.square().sum_all()?), &q, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
    let params: Vec<_> = spade.named_params().into_iter().map(|(_, p)| p).collect();
    let err = exemplar_tensor::gradcheck_params(
        || Ok(spade.forward(&q, &cond).map_err(to_tensor)?.square().sum_all()?),
        &params,
        1e-5,
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn adain_channel_mean_equals_bias() {
    let mut r = rng(16);
    let adain = AdaInModulation::new(&mut r, 6, 8).unwrap();
    let x = uniform(&mut r, &[6, 5, 5], -1.0, 2.0);
    let z1 = Tensor::new(common::unit(&mut r, 8), &[8]).unwrap();
    let z2 = Tensor::new(common::unit(&mut r, 8), &[8]).unwrap();
    let (_, bias) = adain.factors(&z1).unwrap();
    let y = adain.forward(&x, &z1).unwrap();
    for ch in 0..6 {
        let mean = y.data()[ch * 25..(ch + 1) * 25].iter().sum::<f64>() / 25.0;
        assert!((mean - bias.data()[ch]).abs() < 1e-6);
    }
    assert!(max_abs_diff(y.data(), adain.forward(&x, &z2).unwrap().data()) > 0.0);

    let n = apply_adain(&x, &Tensor::ones(&[6, 1, 1]), &Tensor::zeros(&[6, 1, 1])).unwrap();
    assert!(max_abs_diff(n.data(), instance_normalize(&x, 1e-5).unwrap().data()) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pono_zero_mean_any_shape(c in 1usize..9, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[c, h, w], -5.0, 5.0);
        let y = pono(&x, PONO_EPS).unwrap().y;
        for pos in 0..h * w {
            let mean = (0..c).map(|ch| y.data()[ch * h * w + pos]).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_conv_output_scale_is_bounded(seed in 0u64..1000) {
        let mut r = rng(seed);
        let conv = Conv2d::new(&mut r, 3, 5, ConvOpts::default().kernel(1)).unwrap();
        let x = uniform(&mut r, &[3, 2, 2], -1.0, 1.0);
        conv.forward(&x).unwrap();
        let sigma = svd_of(&conv.effective_weight().unwrap());
        prop_assert!((sigma - 1.0).abs() < 5e-2);
    }
}
