//! Training orchestration: configuration, batching, the joint
//! discriminator/generator update, checkpoints, sampling, evaluation and
//! plot-data emission.
//!
//! All randomness is drawn from purpose-split streams keyed by the run seed
//! and the step (see [`crate::rng`]), so a run is a pure function of its
//! configuration and can be resumed from any checkpoint without drift.

mod checkpoint;
mod config;
mod evaluate;

pub use checkpoint::{Checkpoint, RngState, TensorRecord};
pub use config::{Benchmark, TrainConfig};
pub use evaluate::{
    emit_plot_data, evaluate_sprites, evaluate_synthetic, plot_csv, sample, sprite_feature_basis, EvalOptions,
    Samples, SPRITE_FEATURES,
};

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::{
    center_reg_loss, hinge_d_loss, hinge_g_loss, msgan_term, ndiv_loss, total_objective, Variant,
};
use crate::models::{composite_output, Discriminator, Generator, LatentSampler, CENTER_ROW};
use crate::rng::{stream, Purpose};
use crate::sprites::{self, SpriteDataset};
use crate::synthetic::StarDataset;
use crate::tensor::{Graph, Tensor, Var};

/// Conditions and targets in network units.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainData {
    /// Points rescaled to `[-1, 1]^2`.
    Synthetic { conditions: Tensor, targets: Tensor },
    /// Foreground-only condition images and full target images.
    Sprites { conditions: Tensor, targets: Tensor, hues: Vec<usize> },
}

impl TrainData {
    pub fn from_star(d: &StarDataset) -> Self {
        TrainData::Synthetic {
            conditions: d.unit_conditions(),
            targets: d.unit_targets(),
        }
    }

    pub fn from_sprites(d: &SpriteDataset) -> Result<Self> {
        let conds = (0..sprites::NUM_HUES).map(sprites::condition_image).collect::<Result<Vec<_>>>()?;
        let picked: Vec<&Tensor> = d.hues.iter().map(|&h| &conds[h]).collect();
        let per = Tensor::stack_rows(&picked)?;
        let conditions = per.reshape([d.len(), sprites::CHANNELS, sprites::SIZE, sprites::SIZE])?;
        Ok(TrainData::Sprites {
            conditions,
            targets: d.images.clone(),
            hues: d.hues.clone(),
        })
    }

    /// The configured training set, read from `data_path` or generated.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        match (cfg.benchmark, &cfg.data_path) {
            (Benchmark::Synthetic, Some(p)) => Ok(Self::from_star(&StarDataset::read_csv(p)?)),
            (Benchmark::Synthetic, None) => Ok(Self::from_star(&crate::synthetic::make_star_dataset(
                cfg.data_size,
                cfg.data_seed,
            )?)),
            (Benchmark::Sprites, Some(p)) => Self::from_sprites(&SpriteDataset::read_dir(p)?),
            (Benchmark::Sprites, None) => {
                Self::from_sprites(&sprites::make_sprite_dataset(cfg.data_size, cfg.data_seed)?)
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TrainData::Synthetic { conditions, .. } | TrainData::Sprites { conditions, .. } => conditions.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn benchmark(&self) -> Benchmark {
        match self {
            TrainData::Synthetic { .. } => Benchmark::Synthetic,
            TrainData::Sprites { .. } => Benchmark::Sprites,
        }
    }

    pub fn conditions(&self) -> &Tensor {
        match self {
            TrainData::Synthetic { conditions, .. } | TrainData::Sprites { conditions, .. } => conditions,
        }
    }

    pub fn targets(&self) -> &Tensor {
        match self {
            TrainData::Synthetic { targets, .. } | TrainData::Sprites { targets, .. } => targets,
        }
    }
}

/// One step's worth of conditions, targets and latent draws.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalBatch {
    pub indices: Vec<usize>,
    /// `[B, ...]`.
    pub conditions: Tensor,
    /// `[B, ...]`.
    pub targets: Tensor,
    /// One `[N, L]` draw per condition; row [`CENTER_ROW`] is the center.
    pub latents: Vec<Tensor>,
    pub center_row: usize,
}

impl ConditionalBatch {
    pub fn samples_per_condition(&self) -> usize {
        self.latents[0].rows()
    }

    /// Each condition repeated `N` times, `[B * N, ...]`.
    pub fn expanded_conditions(&self) -> Tensor {
        let n = self.samples_per_condition();
        let idx: Vec<usize> = (0..self.indices.len()).flat_map(|b| std::iter::repeat_n(b, n)).collect();
        self.conditions.select_rows(&idx)
    }

    /// All latents stacked, `[B * N, L]`.
    pub fn stacked_latents(&self) -> Tensor {
        let refs: Vec<&Tensor> = self.latents.iter().collect();
        Tensor::stack_rows(&refs).expect("latents share a width")
    }
}

/// Losses logged for one step. Inactive terms are 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_div: f64,
    pub loss_adv_g: f64,
    pub loss_d: f64,
    pub loss_reg: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,loss_div,loss_adv_g,loss_d,loss_reg";
pub const TIMING_HEADER: &str = "step,wall_ms";

impl MetricsRow {
    /// Deterministic CSV line (no timing).
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss_div, self.loss_adv_g, self.loss_d, self.loss_reg)
    }
}

/// In-memory metrics and timing logs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{}", r.csv_line()).unwrap();
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = format!("{TIMING_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{:.3}", r.step, r.wall_ms).unwrap();
        }
        out
    }
}

/// Generator, discriminator and data of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    /// Completed steps.
    pub step: u64,
    pub data: TrainData,
    mask: Option<Tensor>,
    sampler: LatentSampler,
    shuffle_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        if data.benchmark() != config.benchmark {
            return Err(Error::invalid("training data does not match the configured benchmark"));
        }
        if data.len() < config.conditions_per_batch {
            return Err(Error::invalid(format!(
                "{} training conditions but {} per batch",
                data.len(),
                config.conditions_per_batch
            )));
        }
        let generator = Generator::build(&config.generator, &mut stream(config.seed, Purpose::Init, 0))?;
        let discriminator = Discriminator::build(&config.discriminator, &mut stream(config.seed, Purpose::Init, 1))?;
        let mask = (config.benchmark == Benchmark::Sprites).then(sprites::foreground_mask);
        let sampler = LatentSampler::new(config.generator.latent_dim);
        Ok(Self {
            config,
            generator,
            discriminator,
            step: 0,
            data,
            mask,
            sampler,
            shuffle_cache: None,
        })
    }

    /// Rebuilds a trainer from a checkpoint and the training data.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: TrainData) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone(), data)?;
        ckpt.restore(&mut t.generator, &mut t.discriminator)?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.step, &self.generator, &self.discriminator)
    }

    /// Condition indices used by step `step` (0-based): consecutive slices
    /// of a per-epoch permutation of the training set.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let m = self.data.len() as u64;
        let b = self.config.conditions_per_batch as u64;
        (0..b)
            .map(|j| {
                let pos = step * b + j;
                let epoch = pos / m;
                let perm = match &self.shuffle_cache {
                    Some((e, p)) if *e == epoch => p,
                    _ => {
                        let mut p: Vec<usize> = (0..m as usize).collect();
                        p.shuffle(&mut stream(self.config.seed, Purpose::Shuffle, epoch));
                        &self.shuffle_cache.insert((epoch, p)).1
                    }
                };
                perm[(pos % m) as usize]
            })
            .collect()
    }

    pub fn make_batch(&mut self, step: u64) -> Result<ConditionalBatch> {
        let indices = self.batch_indices(step);
        let mut rng = stream(self.config.seed, Purpose::Latent, step);
        let latents = indices
            .iter()
            .map(|_| self.sampler.sample_with_center(self.config.samples_per_condition, &mut rng).map(|(z, _)| z))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConditionalBatch {
            conditions: self.data.conditions().select_rows(&indices),
            targets: self.data.targets().select_rows(&indices),
            indices,
            latents,
            center_row: CENTER_ROW,
        })
    }

    fn check_finite(&self, what: &'static str, value: f64) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite {
                what,
                step: self.step + 1,
                value,
            })
        }
    }

    /// Generator output as seen by the discriminator: composited with the
    /// foreground for images, unchanged for points.
    fn presented(&self, g: &mut Graph, raw: Var, conditions: &Tensor) -> Result<Var> {
        match &self.mask {
            Some(mask) => {
                let n = conditions.rows();
                let masks = Tensor::stack_rows(&vec![mask; n])?.reshape(conditions.shape().to_vec())?;
                composite_output(g, raw, conditions, &masks)
            }
            None => Ok(raw),
        }
    }

    fn scores(
        &mut self,
        g: &mut Graph,
        bound: &[Var],
        conditions: &Tensor,
        candidate: Var,
        iters: usize,
    ) -> Result<Var> {
        let c = match self.config.benchmark {
            Benchmark::Synthetic => Some(conditions),
            Benchmark::Sprites => None,
        };
        self.discriminator.forward(g, bound, c, candidate, iters)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self) -> Result<MetricsRow> {
        self.train_step_observed(|_, _| {})
    }

    /// [`train_step`](Self::train_step) with a hook that sees both networks
    /// between the discriminator and generator updates.
    pub fn train_step_observed(&mut self, mut between: impl FnMut(&Generator, &Discriminator)) -> Result<MetricsRow> {
        let started = Instant::now();
        let step = self.step;
        let batch = self.make_batch(step)?;
        let cond_rep = batch.expanded_conditions();

        // The generator forward is shared: the discriminator update sees its
        // value as a constant, the generator update differentiates through it.
        let mut gg = Graph::new();
        let g_vars = self.generator.params().bind(&mut gg);
        let raw = self.generator.forward(&mut gg, &g_vars, &cond_rep, &batch.stacked_latents())?;
        let fake = self.presented(&mut gg, raw, &cond_rep)?;

        let loss_d = self.discriminator_update(&batch, &cond_rep, gg.value(fake))?;
        between(&self.generator, &self.discriminator);

        let terms = self.generator_terms(&mut gg, &batch, &cond_rep, raw, fake)?;
        let total = total_objective(&mut gg, terms.div, terms.adv, terms.reg, &self.config.weights())?;
        let row = MetricsRow {
            step: step + 1,
            loss_div: self.check_finite("diversity loss", gg.value(terms.div).item())?,
            loss_adv_g: self.check_finite("generator adversarial loss", gg.value(terms.adv).item())?,
            loss_d,
            loss_reg: self.check_finite("regularization loss", gg.value(terms.reg).item())?,
            wall_ms: 0.0,
        };
        self.check_finite("total generator loss", gg.value(total).item())?;
        gg.backward(total)?;
        let gp = self.generator.params_mut();
        gp.zero_grads();
        gp.collect_grads(&gg, &g_vars);
        gp.adam_step(&self.config.adam())?;

        self.step += 1;
        Ok(MetricsRow {
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            ..row
        })
    }

    /// Hinge update of the discriminator on real targets and the given fake
    /// outputs. Returns the loss before the update.
    fn discriminator_update(&mut self, batch: &ConditionalBatch, cond_rep: &Tensor, fake: &Tensor) -> Result<f64> {
        let b = batch.indices.len();
        let mut gd = Graph::new();
        let d_vars = self.discriminator.params().bind(&mut gd);
        let x = gd.constant(Tensor::stack_rows(&[&batch.targets, fake])?);
        let cond_both = Tensor::stack_rows(&[&batch.conditions, cond_rep])?;
        let iters = self.config.power_iters;
        let s = self.scores(&mut gd, &d_vars, &cond_both, x, iters)?;
        let real = gd.select_rows(s, &(0..b).collect::<Vec<_>>())?;
        let fk = gd.select_rows(s, &(b..b + fake.rows()).collect::<Vec<_>>())?;
        let loss = hinge_d_loss(&mut gd, real, fk)?;
        let v = self.check_finite("discriminator loss", gd.value(loss).item())?;
        gd.backward(loss)?;
        let d = self.discriminator.params_mut();
        d.zero_grads();
        d.collect_grads(&gd, &d_vars);
        d.adam_step(&self.config.adam())?;
        Ok(v)
    }

    /// Diversity, adversarial and regularization terms of the generator
    /// objective. Terms switched off by the variant are constant zeros.
    fn generator_terms(
        &mut self,
        gg: &mut Graph,
        batch: &ConditionalBatch,
        cond_rep: &Tensor,
        raw: Var,
        fake: Var,
    ) -> Result<GeneratorTerms> {
        let b = batch.indices.len();
        let n = batch.samples_per_condition();
        let (l1, _, l3) = self.config.weights().effective();
        let d_frozen = self.discriminator.params().bind_frozen(gg);
        let s = self.scores(gg, &d_frozen, cond_rep, fake, 0)?;
        let adv = hinge_g_loss(gg, s);
        let zero = gg.constant(Tensor::scalar(0.0));

        let div = if l1 > 0.0 {
            let mut terms = Vec::with_capacity(b);
            for (c, z) in batch.latents.iter().enumerate() {
                let local: Vec<usize> = (0..n)
                    .filter(|&i| self.config.center_in_diversity || i != batch.center_row)
                    .collect();
                let rows: Vec<usize> = local.iter().map(|i| c * n + i).collect();
                if self.config.variant == Variant::Msgan {
                    for pair in local.chunks_exact(2) {
                        let o1 = gg.select_rows(raw, &[c * n + pair[0]])?;
                        let o2 = gg.select_rows(raw, &[c * n + pair[1]])?;
                        let cap = self.config.msgan_cap;
                        terms.push(msgan_term(gg, z.row(pair[0]), z.row(pair[1]), o1, o2, cap)?);
                    }
                } else {
                    let out = gg.select_rows(raw, &rows)?;
                    terms.push(ndiv_loss(gg, &z.select_rows(&local), out, self.config.alpha)?);
                }
            }
            mean_of(gg, &terms)?
        } else {
            zero
        };

        let reg = if l3 > 0.0 {
            let centers: Vec<usize> = (0..b).map(|c| c * n + batch.center_row).collect();
            let out = gg.select_rows(fake, &centers)?;
            let target = gg.constant(batch.targets.clone());
            center_reg_loss(gg, out, target, self.config.reg_norm)?
        } else {
            zero
        };
        Ok(GeneratorTerms { div, adv, reg })
    }

    /// Runs until `config.steps` steps have completed, logging every
    /// `log_every` steps and at the final step.
    pub fn run(&mut self, log: &mut MetricsLog) -> Result<()> {
        self.run_until(self.config.steps, log)
    }

    pub fn run_until(&mut self, last_step: u64, log: &mut MetricsLog) -> Result<()> {
        let mut wall = 0.0;
        while self.step < last_step {
            let row = self.train_step()?;
            wall += row.wall_ms;
            if row.step % self.config.log_every == 0 || row.step == last_step {
                log.rows.push(MetricsRow { wall_ms: wall, ..row });
                wall = 0.0;
            }
        }
        Ok(())
    }
}

struct GeneratorTerms {
    div: Var,
    adv: Var,
    reg: Var,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or_else(|| Error::invalid("no diversity terms"))?;
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Output files of a training run.
pub struct RunOutputs<'a> {
    pub checkpoint: &'a Path,
    pub metrics: &'a Path,
    /// Wall-clock sidecar; kept apart so the metrics file is reproducible.
    pub timing: Option<&'a Path>,
}

/// Trains from scratch (or from `resume`) and writes the artifacts.
pub fn train(cfg: TrainConfig, resume: Option<&Checkpoint>, out: &RunOutputs) -> Result<Trainer> {
    let data = TrainData::load(&cfg)?;
    let mut trainer = match resume {
        Some(ck) => {
            let mut t = Trainer::from_checkpoint(ck, data)?;
            t.config.steps = cfg.steps;
            t
        }
        None => Trainer::new(cfg, data)?,
    };
    let mut log = MetricsLog::default();
    trainer.run(&mut log)?;
    write_text(out.metrics, &log.metrics_csv())?;
    if let Some(p) = out.timing {
        write_text(p, &log.timing_csv())?;
    }
    trainer.checkpoint().save(out.checkpoint)?;
    Ok(trainer)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
