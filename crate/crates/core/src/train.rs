//! Adam optimizer, the alternating discriminator/generator step and the
//! training loop with CSV logging and periodic checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use exemplar_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{synth_dataset, TrainTriplet};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    adversarial_losses, align_loss, contextual_loss, corr_loss, perceptual_loss, structural_loss, style_contrastive,
    total_loss, FeatureExtractor, LossParts, StyleQueue,
};
use crate::network::{Discriminator, Generator};
use crate::nn::Module;

pub const LOG_HEADER: &str = "step,L_style,L_align,L_corr,L_str,L_perc,L_ctx,L_advG,L_advD";

/// Adam moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates taken.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every parameter holding a gradient.
    pub fn step<M: Module>(&mut self, module: &M) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in module.named_params() {
            let Some(g) = p.grad() else { continue };
            let mo = self.moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let mut data = p.data();
            for i in 0..g.len() {
                mo.m[i] = self.beta1 * mo.m[i] + (1.0 - self.beta1) * g[i];
                mo.v[i] = self.beta2 * mo.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = mo.m[i] / c1;
                let vh = mo.v[i] / c2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// Loss values of one step, in log-column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub values: [f64; 8],
}

impl StepLosses {
    pub fn perceptual(&self) -> f64 {
        self.values[4]
    }

    pub fn csv_row(&self) -> String {
        let mut s = self.step.to_string();
        for v in self.values {
            write!(s, ",{v}").expect("string write");
        }
        s
    }
}

#[derive(Debug)]
pub struct Trainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: FeatureExtractor,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub queue: StyleQueue,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub cfg: Config,
}

fn mean_of(terms: &[Tensor]) -> Result<Tensor> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / terms.len() as f64))
}

fn check_finite(name: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(&mut init, cfg.generator())?;
        let discriminator = Discriminator::new(&mut init, cfg.image_size, cfg.base_channels)?;
        let extractor = if cfg.extractor_weights.is_empty() {
            FeatureExtractor::seeded(cfg.extractor_seed)
        } else {
            FeatureExtractor::from_file(Path::new(&cfg.extractor_weights))?
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            generator,
            discriminator,
            extractor,
            opt_g: Adam::new(cfg.lr_g, cfg.beta1, cfg.beta2, cfg.adam_eps),
            opt_d: Adam::new(cfg.lr_d, cfg.beta1, cfg.beta2, cfg.adam_eps),
            queue: StyleQueue::new(cfg.style_dim, cfg.m)?,
            rng,
            step: 0,
            cfg: cfg.clone(),
        })
    }

    /// Draws `batch_size` indices (with replacement) from the trainer RNG.
    pub fn sample_batch(&mut self, n: usize) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| self.rng.gen_range(0..n)).collect()
    }

    /// Generator-side loss terms of one sample plus the generated style code.
    fn generator_terms(&self, t: &TrainTriplet, out: &crate::network::GeneratorOutput) -> Result<(LossParts, Tensor)> {
        let g = &self.generator;
        let x_hat = &out.image;
        let z_gen = g.style_code(&g.encode_exemplar(x_hat)?)?;
        let style = style_contrastive(&z_gen, &out.z, &self.queue, self.cfg.tau)?;
        let align = align_loss(&out.enc_a.bottleneck, &g.encode_exemplar(&t.x_b)?.bottleneck)?;
        let corr_terms = out
            .maps
            .iter()
            .map(|m| corr_loss(m, &t.y_b, &t.x_b, self.cfg.corr_transpose))
            .collect::<Result<Vec<_>>>()?;
        let corr = mean_of(&corr_terms)?;
        let structural = structural_loss(&self.extractor, x_hat, &t.x_b)?;
        let perceptual = perceptual_loss(&self.extractor, x_hat, &t.x_b)?;
        let contextual = contextual_loss(&self.extractor, x_hat, &t.y_b)?;
        let adv_g = self.discriminator.forward(x_hat)?.mean_all()?.neg();
        let parts = LossParts {
            style,
            align,
            corr,
            structural,
            perceptual,
            contextual,
            adv_g,
            adv_d: Tensor::scalar(0.0),
        };
        Ok((parts, z_gen))
    }

    /// One discriminator update on detached generated images, then one
    /// generator update against the updated discriminator.
    pub fn train_step(&mut self, batch: &[&TrainTriplet]) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let weights = self.cfg.loss_weights();
        let outs = batch
            .iter()
            .map(|t| self.generator.forward(&t.x_a, &t.y_b))
            .collect::<Result<Vec<_>>>()?;

        self.discriminator.zero_grad();
        let mut d_terms = Vec::with_capacity(batch.len());
        for (t, o) in batch.iter().zip(&outs) {
            let real = self.discriminator.forward(&t.y_b)?;
            let fake = self.discriminator.forward(&o.image.detach())?;
            d_terms.push(adversarial_losses(&real, &fake)?.0);
        }
        let l_d = mean_of(&d_terms)?;
        check_finite("L_advD", &l_d)?;
        l_d.scale(weights.adversarial).backward()?;
        self.opt_d.step(&self.discriminator)?;

        self.generator.zero_grad();
        let mut per_sample = Vec::with_capacity(batch.len());
        let mut codes = Vec::with_capacity(batch.len());
        for (t, o) in batch.iter().zip(&outs) {
            let (parts, z) = self.generator_terms(t, o)?;
            per_sample.push(parts);
            codes.push(z);
        }
        let avg = |f: fn(&LossParts) -> &Tensor| mean_of(&per_sample.iter().map(|p| f(p).clone()).collect::<Vec<_>>());
        let parts = LossParts {
            style: avg(|p| &p.style)?,
            align: avg(|p| &p.align)?,
            corr: avg(|p| &p.corr)?,
            structural: avg(|p| &p.structural)?,
            perceptual: avg(|p| &p.perceptual)?,
            contextual: avg(|p| &p.contextual)?,
            adv_g: avg(|p| &p.adv_g)?,
            adv_d: l_d.detach(),
        };
        for (name, t) in parts.named() {
            check_finite(name, t)?;
        }
        let (g_total, _) = total_loss(&parts, &weights)?;
        g_total.backward()?;
        self.opt_g.step(&self.generator)?;
        self.discriminator.zero_grad();

        if (self.step as usize) < self.cfg.freeze_step() {
            for z in &codes {
                self.queue.push(z.data())?;
            }
        } else {
            self.queue.freeze();
        }
        self.step += 1;
        let mut values = [0.0; 8];
        for (v, (_, t)) in values.iter_mut().zip(parts.named()) {
            *v = t.item();
        }
        Ok(StepLosses { step: self.step, values })
    }

    /// Translates one pair without recording a graph or advancing power
    /// iteration.
    pub fn translate(&self, x_a: &Tensor, y_b: &Tensor) -> Result<Tensor> {
        translate(&self.generator, x_a, y_b)
    }
}

pub fn translate(g: &Generator, x_a: &Tensor, y_b: &Tensor) -> Result<Tensor> {
    let _ng = exemplar_tensor::no_grad();
    let _fz = crate::nn::freeze_power_iteration();
    Ok(g.forward(x_a, y_b)?.image)
}

/// Where [`train`] writes its outputs.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{step:06}.mbck"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.mbck")
    }
}

/// Runs `trainer` until `cfg.steps`, appending rows to the CSV log (created
/// with a header when absent) and writing checkpoints.
pub fn run(trainer: &mut Trainer, data: &[TrainTriplet], paths: &RunPaths, mut on_step: impl FnMut(&StepLosses)) -> Result<Vec<StepLosses>> {
    std::fs::create_dir_all(&paths.dir)?;
    let log_path = paths.log();
    let fresh = !log_path.exists() || trainer.step == 0;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)?;
    if fresh {
        writeln!(log, "{LOG_HEADER}")?;
    }
    let mut history = Vec::new();
    while (trainer.step as usize) < trainer.cfg.steps {
        let idx = trainer.sample_batch(data.len());
        let batch: Vec<&TrainTriplet> = idx.iter().map(|&i| &data[i]).collect();
        let losses = trainer.train_step(&batch)?;
        writeln!(log, "{}", losses.csv_row())?;
        on_step(&losses);
        history.push(losses);
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.step % every as u64 == 0 && (trainer.step as usize) < trainer.cfg.steps {
            crate::checkpoint::save(trainer, &paths.checkpoint(trainer.step))?;
        }
    }
    log.flush()?;
    crate::checkpoint::save(trainer, &paths.final_checkpoint())?;
    Ok(history)
}

/// Builds the dataset and a fresh trainer from `cfg` and trains to completion.
pub fn train(cfg: &Config, paths: &RunPaths, on_step: impl FnMut(&StepLosses)) -> Result<(Trainer, Vec<StepLosses>)> {
    let data = dataset_for(cfg)?;
    let mut trainer = Trainer::new(cfg)?;
    let history = run(&mut trainer, &data, paths, on_step)?;
    Ok((trainer, history))
}

pub fn dataset_for(cfg: &Config) -> Result<Vec<TrainTriplet>> {
    synth_dataset(cfg.dataset_size, cfg.data_seed, cfg.image_size)
}
