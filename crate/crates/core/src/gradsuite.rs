//! Central finite-difference checks over every differentiable tensor op, every
//! composite block, the micro generator and each loss term.
//!
//! Spectral layers first run a few power-iteration steps, then the iteration
//! is frozen for the check itself so the probed function is deterministic.

use exemplar_tensor::{gradcheck, gradcheck_params, no_grad, Param, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    adversarial_losses, align_loss, contextual_loss, corr_loss_weights, edge_extract, perceptual_loss, structural_loss,
    style_contrastive, total_loss, FeatureExtractor, LossParts, LossWeights, StyleQueue,
};
use crate::mat::{cosine_scores, uncorrelated_select, warp_values, MatBlock, MatConfig};
use crate::network::{Discriminator, Generator, GeneratorConfig};
use crate::nn::{
    freeze_power_iteration, instance_normalize, pono, AdaConvBlock, AdaInModulation, ChannelLayerNorm, Conv2d, ConvOpts,
    CoordAttention, Linear, Module, SpadeModulation, PONO_EPS,
};

/// Pass threshold on the max relative error `|a − n| / max(1, |a|, |n|)`.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// Components probed per parameter tensor.
const PARAM_PROBES: usize = 6;
/// Power-iteration steps taken before a module is checked.
const SETTLE_STEPS: usize = 30;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < GRAD_TOLERANCE
    }
}

fn lift<T>(r: Result<T>) -> exemplar_tensor::Result<T> {
    r.map_err(|e| TensorError::Invalid {
        op: "gradcheck",
        msg: e.to_string(),
    })
}

/// Fixed pseudo-random readout `Σ y_i · sin(1.7 i + 0.3)`, so every output
/// element gets a distinct, nonzero upstream gradient.
fn probe(y: &Tensor) -> Result<Tensor> {
    let w: Vec<f64> = (0..y.numel()).map(|i| (1.7 * i as f64 + 0.3).sin()).collect();
    Ok(y.mul(&Tensor::new(w, y.shape())?)?.sum_all()?)
}

/// Converges the power-iteration vectors of every spectral layer `f` touches.
fn settle(mut f: impl FnMut() -> Result<Tensor>) -> Result<()> {
    let _g = no_grad();
    for _ in 0..SETTLE_STEPS {
        f()?;
    }
    Ok(())
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<GradCheck>,
}

impl Suite {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| self.rng.gen_range(lo..hi)).collect(), shape).expect("sizes agree")
    }

    /// Values with magnitude in `[0.05, 1)` and random sign, away from kinks at 0.
    fn kinked(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v = self.rng.gen_range(0.05..1.0);
                if self.rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(data, shape).expect("sizes agree")
    }

    fn unit(&mut self, n: usize) -> Tensor {
        let v = self.uniform(&[n], -1.0, 1.0);
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        v.scale(1.0 / norm).detach()
    }

    fn input(&mut self, name: &str, x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<()> {
        settle(|| f(x))?;
        let _frozen = freeze_power_iteration();
        let err = gradcheck(|t| lift(f(t)), x, EPS)?;
        self.out.push(GradCheck {
            name: name.to_string(),
            max_rel_err: err,
        });
        Ok(())
    }

    fn params<M: Module>(&mut self, name: &str, m: &M, mut f: impl FnMut() -> Result<Tensor>) -> Result<()> {
        let named = m.named_params();
        let ps: Vec<&Param> = named.iter().map(|(_, p)| *p).collect();
        settle(&mut f)?;
        let _frozen = freeze_power_iteration();
        let err = gradcheck_params(|| lift(f()), &ps, EPS, Some(PARAM_PROBES))?;
        self.out.push(GradCheck {
            name: format!("{name} (params)"),
            max_rel_err: err,
        });
        Ok(())
    }
}

type OpCase = (&'static str, Box<dyn Fn(&Tensor) -> Result<Tensor>>, Tensor);

fn tensor_ops(s: &mut Suite) -> Result<()> {
    let a = s.uniform(&[2, 3], -1.0, 1.0);
    let b = s.uniform(&[3], -1.0, 1.0);
    let pos = s.uniform(&[2, 3], 0.5, 1.5);
    let kinked = s.kinked(&[2, 3]);
    let w = s.uniform(&[3, 4], -1.0, 1.0);
    let img = s.uniform(&[2, 5, 5], -1.0, 1.0);
    let dense = s.uniform(&[3, 2, 3, 3], -1.0, 1.0);
    let dwise = s.uniform(&[2, 1, 3, 3], -1.0, 1.0);
    let grid = s.uniform(&[2, 4, 4], -1.0, 1.0);

    let cases: Vec<OpCase> = vec![
        ("add", Box::new(move |x| Ok(x.add(&b)?.square().sum_all()?)), a.clone()),
        ("sub", Box::new(|x| Ok(x.sub(&x.scale(0.3))?.square().sum_all()?)), a.clone()),
        ("mul", Box::new(|x| Ok(x.mul(&x.tanh().add_scalar(0.5))?.sum_all()?)), a.clone()),
        ("div", Box::new(|x| Ok(x.div(&x.square().add_scalar(1.0))?.sum_all()?)), a.clone()),
        ("pow", Box::new(|x| Ok(x.pow(&Tensor::full(&[1], 1.7))?.sum_all()?)), pos.clone()),
        ("pow exponent", Box::new(|x| Ok(Tensor::full(&[2, 3], 1.3).pow(x)?.sum_all()?)), a.clone()),
        ("relu", Box::new(|x| probe(&x.relu())), kinked.clone()),
        ("leaky_relu", Box::new(|x| probe(&x.leaky_relu(0.2))), kinked.clone()),
        ("abs", Box::new(|x| probe(&x.abs())), kinked.clone()),
        ("gelu", Box::new(|x| probe(&x.gelu())), a.clone()),
        ("sigmoid", Box::new(|x| probe(&x.sigmoid())), a.clone()),
        ("tanh", Box::new(|x| probe(&x.tanh())), a.clone()),
        ("exp", Box::new(|x| probe(&x.exp())), a.clone()),
        ("log", Box::new(|x| probe(&x.log()?)), pos.clone()),
        ("sqrt", Box::new(|x| probe(&x.sqrt()?)), pos.clone()),
        ("neg", Box::new(|x| probe(&x.neg())), a.clone()),
        ("square", Box::new(|x| probe(&x.square())), a.clone()),
        ("powf", Box::new(|x| probe(&x.powf(2.5))), pos.clone()),
        ("affine", Box::new(|x| probe(&x.affine(-1.5, 0.25).square())), a.clone()),
        ("clamp", Box::new(|x| probe(&x.clamp(-0.5, 0.5))), kinked.clone()),
        ("matmul", Box::new(move |x| probe(&x.matmul(&w)?)), a.clone()),
        ("transpose", Box::new(|x| probe(&x.t()?.matmul(x)?)), a.clone()),
        ("softmax", Box::new(|x| probe(&x.softmax(1)?)), a.clone()),
        ("sum", Box::new(|x| Ok(x.sum_axes(&[0], true)?.square().sum_all()?)), a.clone()),
        ("mean", Box::new(|x| Ok(x.mean_axes(&[1], false)?.square().sum_all()?)), a.clone()),
        ("var", Box::new(|x| probe(&x.var_axes(&[1], true)?)), a.clone()),
        ("max", Box::new(|x| probe(&x.max_axes(&[1], false)?)), a.clone()),
        ("min", Box::new(|x| probe(&x.min_axes(&[0], false)?)), a.clone()),
        ("reshape", Box::new(|x| probe(&x.reshape(&[3, 2])?.softmax(0)?)), a.clone()),
        ("concat", Box::new(|x| probe(&Tensor::concat(&[x, &x.square()], 1)?)), a.clone()),
        ("narrow", Box::new(|x| probe(&x.narrow(1, 1, 2)?)), a.clone()),
        ("conv2d", Box::new(move |x| probe(&x.conv2d(&dense, 1, 2, 1)?)), img.clone()),
        ("conv2d depthwise", Box::new(move |x| probe(&x.conv2d(&dwise, 2, 1, 1)?)), grid.clone()),
        ("pad_replicate", Box::new(|x| probe(&x.pad_replicate(2)?)), grid.clone()),
        ("upsample_nearest2x", Box::new(|x| probe(&x.upsample_nearest2x()?)), grid.clone()),
        ("avg_pool", Box::new(|x| probe(&x.avg_pool(2)?)), grid.clone()),
    ];
    for (name, f, x) in &cases {
        s.input(name, x, f)?;
    }
    Ok(())
}

fn layers(s: &mut Suite) -> Result<()> {
    let c = 8;
    let x = s.uniform(&[c, 4, 4], -1.0, 1.0);

    let conv = Conv2d::new(&mut s.rng, c, 6, ConvOpts::default().stride(2))?;
    s.input("spectral conv2d", &x, |t| probe(&conv.forward(t)?))?;
    s.params("spectral conv2d", &conv, || probe(&conv.forward(&x)?))?;

    let lin = Linear::new(&mut s.rng, 5, 3, true)?;
    let v = s.uniform(&[5], -1.0, 1.0);
    s.input("spectral linear", &v, |t| probe(&lin.forward(t)?))?;
    s.params("spectral linear", &lin, || probe(&lin.forward(&v)?))?;

    s.input("pono", &x, |t| probe(&pono(t, PONO_EPS)?.y))?;
    s.input("instance norm", &x, |t| probe(&instance_normalize(t, 1e-5)?))?;

    let ln = ChannelLayerNorm::new(c);
    s.input("channel layer norm", &x, |t| probe(&ln.forward(t)?))?;
    s.params("channel layer norm", &ln, || probe(&ln.forward(&x)?))?;

    let coord = CoordAttention::new(&mut s.rng, c)?;
    // Move the zero-initialized gates off the origin so every path is exercised.
    for p in coord.gate_params() {
        let n = p.numel();
        p.set_data(s.uniform(&[n], -0.5, 0.5).to_vec())?;
    }
    s.input("coord attention", &x, |t| probe(&coord.forward(t)?))?;
    s.params("coord attention", &coord, || probe(&coord.forward(&x)?))?;

    let ada = AdaConvBlock::new(&mut s.rng, c, 3)?;
    s.input("adaconv block", &x, |t| probe(&ada.forward(t)?))?;
    s.params("adaconv block", &ada, || probe(&ada.forward(&x)?))?;

    let spade = SpadeModulation::new(&mut s.rng, c, 1, 4)?;
    let cond = s.uniform(&[1, 8, 8], 0.0, 1.0);
    s.input("spade modulate", &x, |t| probe(&spade.forward(t, &cond)?))?;
    s.input("spade modulate (cond)", &cond, |t| probe(&spade.forward(&x, t)?))?;
    s.params("spade modulate", &spade, || probe(&spade.forward(&x, &cond)?))?;

    let adain = AdaInModulation::new(&mut s.rng, c, 5)?;
    s.input("adain", &x, |t| probe(&adain.forward(t, &v)?))?;
    s.input("adain (style)", &v, |t| probe(&adain.forward(&x, t)?))?;
    s.params("adain", &adain, || probe(&adain.forward(&x, &v)?))?;
    Ok(())
}

fn attention(s: &mut Suite) -> Result<()> {
    let q = s.uniform(&[16, 6], -1.0, 1.0);
    let k = s.uniform(&[16, 6], -1.0, 1.0);
    s.input("cosine scores (query)", &q, |t| probe(&cosine_scores(t, &k)?))?;
    s.input("cosine scores (key)", &k, |t| probe(&cosine_scores(&q, t)?))?;

    let masked = s.uniform(&[16, 16], 0.0, 0.05);
    let v = s.uniform(&[16, 6], -1.0, 1.0);
    s.input("warp values (weights)", &masked, |t| probe(&warp_values(t, &v, 100.0)?.1))?;
    s.input("warp values (values)", &v, |t| probe(&warp_values(&masked, t, 100.0)?.1))?;

    let q_norm = s.uniform(&[6, 4, 4], -1.0, 1.0);
    s.input("uncorrelated select", &masked, |t| probe(&uncorrelated_select(t, &q_norm, true)?))?;

    let cfg = MatConfig {
        spade_hidden: 4,
        ..MatConfig::default()
    };
    let block = MatBlock::new(&mut s.rng, 8, 1, cfg)?;
    let query = s.uniform(&[8, 4, 4], -1.0, 1.0);
    let key = s.uniform(&[8, 4, 4], -1.0, 1.0);
    let value = s.uniform(&[8, 4, 4], -1.0, 1.0);
    let cond = s.uniform(&[1, 8, 8], 0.0, 1.0);
    let run = |q: &Tensor, k: &Tensor, v: &Tensor, c: &Tensor| -> Result<Tensor> {
        probe(&block.forward(q, k, v, c)?.state.x_mat)
    };
    s.input("mat block (query)", &query, |t| run(t, &key, &value, &cond))?;
    s.input("mat block (key)", &key, |t| run(&query, t, &value, &cond))?;
    s.input("mat block (value)", &value, |t| run(&query, &key, t, &cond))?;
    s.input("mat block (cond)", &cond, |t| run(&query, &key, &value, t))?;
    s.params("mat block", &block, || run(&query, &key, &value, &cond))?;
    Ok(())
}

fn networks(s: &mut Suite) -> Result<()> {
    let cfg = GeneratorConfig::micro();
    let g = Generator::new(&mut s.rng, cfg)?;
    let x_a = s.uniform(&[1, 8, 8], 0.0, 1.0);
    let y_b = s.uniform(&[3, 8, 8], 0.0, 1.0);
    s.input("generator (source)", &x_a, |t| probe(&g.forward(t, &y_b)?.image))?;
    s.input("generator (exemplar)", &y_b, |t| probe(&g.forward(&x_a, t)?.image))?;
    s.params("generator", &g, || probe(&g.forward(&x_a, &y_b)?.image))?;

    let d = Discriminator::new(&mut s.rng, 8, 4)?;
    s.input("discriminator", &y_b, |t| probe(&d.forward(t)?))?;
    s.params("discriminator", &d, || probe(&d.forward(&y_b)?))?;
    Ok(())
}

fn losses(s: &mut Suite) -> Result<()> {
    let mut queue = StyleQueue::new(8, 16)?;
    for _ in 0..5 {
        let n = s.unit(8);
        queue.push(n.data())?;
    }
    let z = s.unit(8);
    let zp = s.unit(8);
    s.input("style contrastive (anchor)", &z, |t| Ok(style_contrastive(t, &zp, &queue, 0.07)?))?;
    s.input("style contrastive (positive)", &zp, |t| Ok(style_contrastive(&z, t, &queue, 0.07)?))?;

    let ea = s.uniform(&[4, 2, 2], -1.0, 1.0);
    let eb = s.uniform(&[4, 2, 2], -1.0, 1.0);
    s.input("align", &ea, |t| Ok(align_loss(t, &eb)?))?;

    let weights = s.uniform(&[16, 16], 0.0, 0.2);
    let y_b = s.uniform(&[3, 8, 8], 0.0, 1.0);
    let x_b = s.uniform(&[3, 8, 8], 0.0, 1.0);
    s.input("corr (weights)", &weights, |t| Ok(corr_loss_weights(t, 4, 4, &y_b, &x_b, false)?))?;
    s.input("corr (transposed weights)", &weights, |t| Ok(corr_loss_weights(t, 4, 4, &y_b, &x_b, true)?))?;
    s.input("corr (exemplar)", &y_b, |t| Ok(corr_loss_weights(&weights, 4, 4, t, &x_b, false)?))?;

    let fe = FeatureExtractor::seeded(1234);
    let x_hat = s.uniform(&[3, 8, 8], 0.0, 1.0);
    s.input("perceptual", &x_hat, |t| Ok(perceptual_loss(&fe, t, &x_b)?))?;
    s.input("contextual", &x_hat, |t| Ok(contextual_loss(&fe, t, &y_b)?))?;
    s.input("edge extract", &x_hat, |t| probe(&edge_extract(t)?))?;
    s.input("structural", &x_hat, |t| Ok(structural_loss(&fe, t, &x_b)?))?;

    let real = s.kinked(&[1, 2, 2]).affine(0.5, 0.0);
    let fake = s.kinked(&[1, 2, 2]).affine(0.5, 0.0);
    s.input("hinge discriminator (real)", &real, |t| Ok(adversarial_losses(t, &fake)?.0))?;
    s.input("hinge discriminator (fake)", &fake, |t| Ok(adversarial_losses(&real, t)?.0))?;
    s.input("hinge generator", &fake, |t| Ok(adversarial_losses(&real, t)?.1))?;

    let v = s.uniform(&[8], -1.0, 1.0);
    let w = LossWeights::default();
    s.input("total", &v, |t| {
        let term = |i: usize| -> Result<Tensor> { Ok(t.narrow(0, i, 1)?.square().sum_all()?) };
        let parts = LossParts {
            style: term(0)?,
            align: term(1)?,
            corr: term(2)?,
            structural: term(3)?,
            perceptual: term(4)?,
            contextual: term(5)?,
            adv_g: term(6)?,
            adv_d: term(7)?,
        };
        let (g, d) = total_loss(&parts, &w)?;
        Ok(g.add(&d)?)
    })?;
    Ok(())
}

/// Runs every check with inputs drawn from `seed`.
pub fn run_gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    tensor_ops(&mut s)?;
    layers(&mut s)?;
    attention(&mut s)?;
    networks(&mut s)?;
    losses(&mut s)?;
    Ok(s.out)
}
