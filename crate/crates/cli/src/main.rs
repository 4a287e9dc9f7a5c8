use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use exemplar_core::checkpoint;
use exemplar_core::data::{synth_dataset, TrainTriplet};
use exemplar_core::gradsuite::{run_gradient_suite, GRAD_TOLERANCE};
use exemplar_core::io::{read_image, write_gray, write_image};
use exemplar_core::losses::{edge_extract, FeatureExtractor};
use exemplar_core::mat::export_correspondence_pair;
use exemplar_core::metrics::{eval_metrics, MetricsReport};
use exemplar_core::network::Generator;
use exemplar_core::train::{run, translate, RunPaths, Trainer};
use exemplar_core::Config;
use exemplar_tensor::Tensor;

#[derive(Parser)]
#[command(name = "exemplar", version, about = "Exemplar-based image translation with masked cross-domain attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic (edge map, exemplar, ground truth) triplets.
    SynthData(SynthArgs),
    /// Train on synthetic triplets, writing a loss log and checkpoints.
    Train(TrainArgs),
    /// Translate one source image with one exemplar.
    Translate(TranslateArgs),
    /// Export raw and masked correspondence maps for one query position.
    ExportAttn(ExportArgs),
    /// Print texture, color, semantic and SWD metrics as CSV.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set steps=200`. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        Ok(Config::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory for `loss.csv` and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Log a progress line every this many steps (0 = never).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct TranslateArgs {
    /// Source image: a PGM edge map, or a PPM whose edges are extracted.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    exemplar: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    exemplar: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Query position on the feature grid as `row,col`.
    #[arg(long, value_parser = parse_query)]
    query: (usize, usize),
    /// MAT block to read (0-based); defaults to the last.
    #[arg(long)]
    block: Option<usize>,
    /// Directory for `raw.pgm` and `masked.pgm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Translate every triplet in a `synth-data` directory with this checkpoint.
    #[arg(long, requires = "data")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generated images (repeatable); used when no checkpoint is given.
    #[arg(long, conflicts_with = "ckpt")]
    generated: Vec<PathBuf>,
    #[arg(long)]
    exemplar: Vec<PathBuf>,
    #[arg(long)]
    truth: Vec<PathBuf>,
    #[arg(long, default_value_t = Config::default().extractor_seed)]
    extractor_seed: u64,
    /// `MBFE` extractor weights; overrides the seed.
    #[arg(long)]
    extractor_weights: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

fn parse_query(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected `row,col`")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad coordinate {v:?}"));
    Ok((num(r)?, num(c)?))
}

fn triplet_paths(dir: &Path, i: usize) -> [PathBuf; 3] {
    ["xa.pgm", "yb.ppm", "xb.ppm"].map(|s| dir.join(format!("{i:04}_{s}")))
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    for (i, t) in synth_dataset(a.count, a.seed, a.size)?.iter().enumerate() {
        let [pa, pb, pt] = triplet_paths(&a.out, i);
        write_image(&t.x_a, &pa)?;
        write_image(&t.y_b, &pb)?;
        write_image(&t.x_b, &pt)?;
    }
    println!("wrote {} triplets to {}", a.count, a.out.display());
    Ok(())
}

fn read_triplets(dir: &Path) -> Result<Vec<TrainTriplet>> {
    let mut out = Vec::new();
    loop {
        let [pa, pb, pt] = triplet_paths(dir, out.len());
        if !pa.exists() {
            break;
        }
        out.push(TrainTriplet {
            x_a: read_image(&pa)?,
            y_b: read_image(&pb)?,
            x_b: read_image(&pt)?,
        });
    }
    if out.is_empty() {
        bail!("no triplets (0000_xa.pgm, ...) in {}", dir.display());
    }
    Ok(out)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let data = exemplar_core::train::dataset_for(&cfg)?;
    let mut trainer = Trainer::new(&cfg)?;
    if let Some(p) = &a.resume {
        checkpoint::load(&mut trainer, p).with_context(|| format!("resuming from {}", p.display()))?;
        log::info!("resumed at step {}", trainer.step);
    }
    let paths = RunPaths { dir: a.out.clone() };
    let every = a.log_every;
    let hist = run(&mut trainer, &data, &paths, |l| {
        if every > 0 && l.step % every == 0 {
            log::info!("step {} perceptual {:.5}", l.step, l.perceptual());
        }
    })?;
    println!("trained {} steps; checkpoint {}", hist.len(), paths.final_checkpoint().display());
    Ok(())
}

/// Reads a source image and converts it to the channel count `g` expects.
fn source_for(g: &Generator, path: &Path) -> Result<Tensor> {
    let img = read_image(path)?;
    let want = g.config().source_channels;
    match (img.shape()[0], want) {
        (c, w) if c == w => Ok(img),
        (3, 1) => Ok(edge_extract(&img)?),
        (1, 3) => Ok(Tensor::concat(&[&img, &img, &img], 0)?),
        (c, w) => bail!("source has {c} channels, model expects {w}"),
    }
}

fn translate_cmd(a: &TranslateArgs) -> Result<()> {
    let g = checkpoint::load_generator(&a.ckpt)?;
    let x_a = source_for(&g, &a.input)?;
    let y_b = read_image(&a.exemplar)?;
    write_image(&translate(&g, &x_a, &y_b)?, &a.out)?;
    Ok(())
}

fn export_attn(a: &ExportArgs) -> Result<()> {
    let g = checkpoint::load_generator(&a.ckpt)?;
    let x_a = source_for(&g, &a.input)?;
    let y_b = read_image(&a.exemplar)?;
    let out = {
        let _ng = exemplar_tensor::no_grad();
        let _fz = exemplar_core::nn::freeze_power_iteration();
        g.forward(&x_a, &y_b)?
    };
    let k = a.block.unwrap_or(out.maps.len() - 1);
    let map = out.maps.get(k).with_context(|| format!("block {k} outside 0..{}", out.maps.len()))?;
    let (r, c) = a.query;
    if r >= map.height || c >= map.width {
        bail!("query {r},{c} outside the {}x{} grid", map.height, map.width);
    }
    let (raw, masked) = export_correspondence_pair(map, r * map.width + c)?;
    std::fs::create_dir_all(&a.out)?;
    write_gray(&raw, &a.out.join("raw.pgm"))?;
    write_gray(&masked, &a.out.join("masked.pgm"))?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let fe = match &a.extractor_weights {
        Some(p) => FeatureExtractor::from_file(p)?,
        None => FeatureExtractor::seeded(a.extractor_seed),
    };
    let (gen, ex, gt) = match (&a.ckpt, &a.data) {
        (Some(ck), Some(dir)) => {
            let g = checkpoint::load_generator(ck)?;
            let data = read_triplets(dir)?;
            let gen = data.iter().map(|t| translate(&g, &t.x_a, &t.y_b)).collect::<exemplar_core::Result<Vec<_>>>()?;
            let (ex, gt) = data.into_iter().map(|t| (t.y_b, t.x_b)).unzip();
            (gen, ex, gt)
        }
        _ => {
            let read = |ps: &[PathBuf]| ps.iter().map(|p| read_image(p)).collect::<exemplar_core::Result<Vec<_>>>();
            (read(&a.generated)?, read(&a.exemplar)?, read(&a.truth)?)
        }
    };
    let m = eval_metrics(&fe, &gen, &ex, &gt)?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", m.csv_row());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let checks = run_gradient_suite(a.seed)?;
    let failed = checks.iter().filter(|c| !c.passed()).count();
    for c in &checks {
        println!("{} {:.3e} {}", if c.passed() { "ok  " } else { "FAIL" }, c.max_rel_err, c.name);
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks above {GRAD_TOLERANCE:e}", checks.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    let res = match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate_cmd(a),
        Command::ExportAttn(a) => export_attn(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
