//! `rndiv`: data generation, training, sampling, evaluation and plot-data
//! emission for the star and sprite benchmarks.
//!
//! Exit codes: 0 on success, 1 on usage or I/O errors, 2 when training hits
//! a non-finite loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rndiv::harness::{
    self, emit_plot_data, evaluate_sprites, evaluate_synthetic, Benchmark, Checkpoint, EvalOptions, RunOutputs,
    Samples, TrainConfig, TrainData,
};
use rndiv::losses::{RegNorm, Variant};
use rndiv::models::DiscriminatorSpec;
use rndiv::rng::{stream, Purpose};
use rndiv::sprites::{encode_ppm, make_sprite_dataset, SpriteDataset};
use rndiv::synthetic::{make_star_dataset, StarDataset};

#[derive(Parser, Debug)]
#[command(name = "rndiv", version, about = "Diversified conditional generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a benchmark dataset.
    #[command(name = "generate-data", subcommand)]
    GenerateData(DataCommand),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Compute the metric report of a checkpoint on a test set.
    Evaluate(EvaluateArgs),
    /// Write per-sample scatter-plot rows.
    #[command(name = "emit-plot-data")]
    EmitPlotData(PlotArgs),
}

#[derive(Subcommand, Debug)]
enum DataCommand {
    /// Star benchmark as `cx,cy,tx,ty` CSV.
    Synthetic {
        #[arg(long, default_value_t = 400)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sprite benchmark as PPM images plus `index.csv`.
    Sprites {
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON file with every `TrainConfig` field; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, value_parser = parse_benchmark)]
    benchmark: Option<Benchmark>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// `mse` or `l2`.
    #[arg(long, value_parser = parse_reg_norm)]
    reg_norm: Option<RegNorm>,
    #[arg(long)]
    samples_per_condition: Option<usize>,
    #[arg(long)]
    conditions_per_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training data (CSV for synthetic, directory for sprites).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    data_size: Option<usize>,
    #[arg(long)]
    log_every: Option<u64>,
    /// Drop the pyramid branches of the image discriminator.
    #[arg(long)]
    no_fpd: bool,
    /// Keep the center latent out of the diversity matrix.
    #[arg(long)]
    exclude_center: bool,
    /// Continue from this checkpoint; `--steps` is the new total.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Directory receiving `checkpoint.json`, `metrics.csv`, `timing.csv`
    /// and `config.json`.
    #[arg(long)]
    out_dir: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Conditions: star CSV or sprite directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file (synthetic) or directory of PPM images (sprites).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append a 2D PCA projection of each sprite sample.
    #[arg(long)]
    pca: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_benchmark(s: &str) -> Result<Benchmark, String> {
    s.parse().map_err(|e: rndiv::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: rndiv::Error| e.to_string())
}

fn parse_reg_norm(s: &str) -> Result<RegNorm, String> {
    match s {
        "mse" => Ok(RegNorm::Mse),
        "l2" => Ok(RegNorm::L2),
        _ => Err(format!("unknown norm `{s}` (mse|l2)")),
    }
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&a.config, a.benchmark) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(b)) => TrainConfig::preset(b),
        (None, None) => TrainConfig::synthetic(),
    };
    if let (Some(_), Some(b)) = (&a.config, a.benchmark) {
        if b != cfg.benchmark {
            bail!("--benchmark {b:?} contradicts the config file");
        }
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = a.$field.clone() { cfg.$field = v; })*};
    }
    set!(variant, lambda1, lambda2, lambda3, alpha, reg_norm, samples_per_condition, conditions_per_batch);
    set!(lr, beta1, beta2, steps, seed, data_seed, data_size, log_every);
    if let Some(d) = &a.data {
        cfg.data_path = Some(d.clone());
    }
    if a.no_fpd {
        let input_shape = cfg.discriminator.input_shape.clone();
        let hidden = cfg.discriminator.hidden.clone();
        cfg.discriminator = DiscriminatorSpec {
            input_shape,
            hidden,
            ..DiscriminatorSpec::conv_default()
        };
    }
    if a.exclude_center {
        cfg.center_in_diversity = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    if a.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        if ck.step >= cfg.steps {
            bail!("checkpoint is already at step {}; raise --steps", ck.step);
        }
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    std::fs::write(a.out_dir.join("config.json"), cfg.to_json())
        .with_context(|| format!("writing {}", a.out_dir.join("config.json").display()))?;
    let ck = a.out_dir.join("checkpoint.json");
    let metrics = a.out_dir.join("metrics.csv");
    let timing = a.out_dir.join("timing.csv");
    let out = RunOutputs {
        checkpoint: &ck,
        metrics: &metrics,
        timing: Some(&timing),
    };
    let t = harness::train(cfg, resume.as_ref(), &out)?;
    eprintln!("trained to step {}; checkpoint at {}", t.step, ck.display());
    Ok(())
}

/// Test conditions in the form the generator consumes.
fn load_conditions(benchmark: Benchmark, data: &Path) -> Result<(rndiv::Tensor, Option<StarDataset>, Option<SpriteDataset>)> {
    Ok(match benchmark {
        Benchmark::Synthetic => {
            let d = StarDataset::read_csv(data)?;
            (d.unit_conditions(), Some(d), None)
        }
        Benchmark::Sprites => {
            let d = SpriteDataset::read_dir(data)?;
            (TrainData::from_sprites(&d)?.conditions().clone(), None, Some(d))
        }
    })
}

fn draw(checkpoint: &Path, data: &Path, n: usize, seed: u64) -> Result<Samples> {
    let ck = Checkpoint::load(checkpoint)?;
    let (generator, _) = ck.build_models()?;
    let (conds, _, _) = load_conditions(ck.config.benchmark, data)?;
    Ok(harness::sample(&generator, &conds, n, &mut stream(seed, Purpose::Sample, 0))?)
}

fn sample(a: SampleArgs) -> Result<()> {
    let samples = draw(&a.checkpoint, &a.data, a.n, a.seed)?;
    match &samples {
        Samples::Points(_) => {
            emit_plot_data(&samples, &a.out, false)?;
        }
        Samples::Images(per) => {
            std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            for (c, imgs) in per.iter().enumerate() {
                for i in 0..imgs.rows() {
                    let img = imgs.select_rows(&[i]);
                    let img = img.reshape(imgs.shape()[1..].to_vec())?;
                    let path = a.out.join(format!("c{c:05}_s{i:03}.ppm"));
                    std::fs::write(&path, encode_ppm(&img)?).with_context(|| format!("writing {}", path.display()))?;
                }
            }
        }
    }
    eprintln!("wrote {} samples to {}", samples.total(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (generator, _) = ck.build_models()?;
    let opts = EvalOptions {
        samples: a.samples,
        rounds: a.rounds,
        seed: a.seed,
    };
    let label = ck.config.variant.as_str();
    let report = match ck.config.benchmark {
        Benchmark::Synthetic => evaluate_synthetic(&generator, &StarDataset::read_csv(&a.data)?, &opts, label)?,
        Benchmark::Sprites => evaluate_sprites(&generator, &SpriteDataset::read_dir(&a.data)?, &opts, label)?,
    };
    let mut json = serde_json::to_value(&report)?;
    let obj = json.as_object_mut().expect("report is an object");
    obj.insert("variant".into(), label.into());
    obj.insert("alpha".into(), ck.config.alpha.into());
    obj.insert("step".into(), ck.step.into());
    let text = serde_json::to_string_pretty(&json)?;
    std::fs::write(&a.out, format!("{text}\n")).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{text}");
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let samples = draw(&a.checkpoint, &a.data, a.n, a.seed)?;
    let rows = emit_plot_data(&samples, &a.out, a.pca)?;
    eprintln!("wrote {rows} rows to {}", a.out.display());
    Ok(())
}

fn generate(cmd: DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Synthetic { m, seed, out } => make_star_dataset(m, seed)?.write_csv(&out)?,
        DataCommand::Sprites { n, seed, out } => make_sprite_dataset(n, seed)?.write_dir(&out)?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => generate(c),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::EmitPlotData(a) => plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = matches!(e.downcast_ref::<rndiv::Error>(), Some(rndiv::Error::NonFinite { .. }));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}
