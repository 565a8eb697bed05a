use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{
    classify_batch, count_modes, coverage_from_labels, frechet_gaussian, mean_pairwise_distance, pca_project_2d,
    MetricsReport, Pca,
};
use crate::models::{composite_output, Generator, LatentSampler};
use crate::rng::{stream, Purpose};
use crate::sprites::{self, SpriteDataset};
use crate::synthetic::{from_unit, StarDataset};
use crate::tensor::{Graph, Tensor};

/// Generated outputs grouped by condition.
#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    /// `[n, 2]` per condition, data units.
    Points(Vec<Tensor>),
    /// `[n, 3, 32, 32]` per condition, composited with the foreground.
    Images(Vec<Tensor>),
}

impl Samples {
    pub fn total(&self) -> usize {
        match self {
            Samples::Points(v) | Samples::Images(v) => v.iter().map(Tensor::rows).sum(),
        }
    }

    pub fn per_condition(&self) -> &[Tensor] {
        match self {
            Samples::Points(v) | Samples::Images(v) => v,
        }
    }
}

/// `n` outputs for every row of `conditions` (network units for points,
/// foreground-only images for sprites) from fresh uniform latents.
pub fn sample<R: Rng + ?Sized>(generator: &Generator, conditions: &Tensor, n: usize, rng: &mut R) -> Result<Samples> {
    if n == 0 {
        return Err(Error::invalid("sample needs n >= 1"));
    }
    let spec = generator.spec();
    if conditions.shape()[1..] != spec.condition_shape[..] {
        return Err(Error::shape("sample conditions", conditions.shape(), &spec.condition_shape));
    }
    let sampler = LatentSampler::new(spec.latent_dim);
    let is_image = spec.condition_shape.len() == 3;
    let mask = is_image.then(sprites::foreground_mask);
    let mut out = Vec::with_capacity(conditions.rows());
    for c in 0..conditions.rows() {
        let cond = conditions.select_rows(&vec![c; n]);
        let z = sampler.sample(n, rng);
        let mut g = Graph::new();
        let vars = generator.params().bind_frozen(&mut g);
        let raw = generator.forward(&mut g, &vars, &cond, &z)?;
        match &mask {
            Some(m) => {
                let masks = Tensor::stack_rows(&vec![m; n])?.reshape(cond.shape().to_vec())?;
                let comp = composite_output(&mut g, raw, &cond, &masks)?;
                out.push(g.value(comp).clone());
            }
            None => out.push(g.value(raw).map(from_unit)),
        }
    }
    Ok(if is_image { Samples::Images(out) } else { Samples::Points(out) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub samples: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: 10,
            rounds: 10,
            seed: 0,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn flatten(stack: &Tensor) -> Tensor {
    Tensor::from_parts(vec![stack.rows(), stack.row_len()], stack.data().to_vec())
}

/// Fréchet distance, pairwise diversity and mode count against a test set,
/// each averaged over `rounds` independent sampling rounds.
pub fn evaluate_synthetic(
    generator: &Generator,
    test: &StarDataset,
    opts: &EvalOptions,
    label: &str,
) -> Result<MetricsReport> {
    if opts.rounds == 0 {
        return Err(Error::invalid("evaluate needs rounds >= 1"));
    }
    let conditions = test.unit_conditions();
    let (mut fds, mut pws, mut modes) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..opts.rounds {
        let s = sample(generator, &conditions, opts.samples, &mut stream(opts.seed, Purpose::Sample, r as u64))?;
        let per = s.per_condition();
        let refs: Vec<&Tensor> = per.iter().collect();
        let all = Tensor::stack_rows(&refs)?;
        fds.push(frechet_gaussian(&all, &test.targets)?);
        pws.push(mean_pairwise_distance(per)?);
        modes.push(count_modes(&all)?);
    }
    let mean_modes = modes.iter().sum::<usize>() as f64 / modes.len() as f64;
    Ok(MetricsReport {
        label: label.to_string(),
        frechet: mean(&fds),
        pairwise: mean(&pws),
        modes: Some(mean_modes.round() as usize),
        mode_coverage: None,
        frechet_rounds: fds,
        pairwise_rounds: pws,
        modes_rounds: modes,
        mode_coverage_rounds: Vec::new(),
        foreground_preserved: None,
    })
}

/// Number of principal directions used for sprite features.
pub const SPRITE_FEATURES: usize = 8;

/// PCA basis over the 36 clean renders, used to embed sprites before the
/// Fréchet distance.
pub fn sprite_feature_basis() -> Result<Pca> {
    let renders = sprites::all_renders()?;
    let refs: Vec<&Tensor> = renders.iter().collect();
    let stack = Tensor::stack_rows(&refs)?;
    Pca::fit(&stack.reshape([renders.len(), stack.len() / renders.len()])?, SPRITE_FEATURES)
}

/// Feature-space Fréchet distance, pixel pairwise diversity, mode coverage
/// and foreground preservation over every test condition.
pub fn evaluate_sprites(
    generator: &Generator,
    test: &SpriteDataset,
    opts: &EvalOptions,
    label: &str,
) -> Result<MetricsReport> {
    if opts.rounds == 0 || opts.samples < 2 {
        return Err(Error::invalid("sprite evaluation needs rounds >= 1 and samples >= 2"));
    }
    let basis = sprite_feature_basis()?;
    let truth = basis.transform(&flatten(&test.images))?;
    let conditions = super::TrainData::from_sprites(test)?.conditions().clone();
    let mask = sprites::foreground_mask();
    let known: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] == 1.0).collect();
    let (mut fds, mut pws, mut covs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut preserved, mut total) = (0usize, 0usize);
    for r in 0..opts.rounds {
        let s = sample(generator, &conditions, opts.samples, &mut stream(opts.seed, Purpose::Sample, r as u64))?;
        let per = s.per_condition();
        let mut labels = Vec::with_capacity(per.len());
        let mut flat_per = Vec::with_capacity(per.len());
        for (c, imgs) in per.iter().enumerate() {
            labels.push(classify_batch(imgs, &mask)?);
            let fg = conditions.row(c);
            for i in 0..imgs.rows() {
                let img = imgs.row(i);
                total += 1;
                preserved += known.iter().all(|&k| img[k].to_bits() == fg[k].to_bits()) as usize;
            }
            flat_per.push(flatten(imgs));
        }
        let refs: Vec<&Tensor> = flat_per.iter().collect();
        let feats = basis.transform(&Tensor::stack_rows(&refs)?)?;
        fds.push(frechet_gaussian(&feats, &truth)?);
        pws.push(mean_pairwise_distance(&flat_per)?);
        covs.push(coverage_from_labels(&labels)?);
    }
    Ok(MetricsReport {
        label: label.to_string(),
        frechet: mean(&fds),
        pairwise: mean(&pws),
        modes: None,
        mode_coverage: Some(mean(&covs)),
        frechet_rounds: fds,
        pairwise_rounds: pws,
        modes_rounds: Vec::new(),
        mode_coverage_rounds: covs,
        foreground_preserved: Some(preserved as f64 / total as f64),
    })
}

/// Scatter-plot rows: `condition_id,sample_id,x,y` for points,
/// `condition_id,sample_id,mode` for sprites (plus `pc1,pc2` with `pca`).
pub fn plot_csv(samples: &Samples, pca: bool) -> Result<String> {
    let mut out = String::new();
    match samples {
        Samples::Points(per) => {
            out.push_str("condition_id,sample_id,x,y\n");
            for (c, s) in per.iter().enumerate() {
                for i in 0..s.rows() {
                    writeln!(out, "{c},{i},{},{}", s.at(&[i, 0]), s.at(&[i, 1])).unwrap();
                }
            }
        }
        Samples::Images(per) => {
            let mask = sprites::foreground_mask();
            let proj = if pca {
                let flat: Vec<Tensor> = per.iter().map(flatten).collect();
                let refs: Vec<&Tensor> = flat.iter().collect();
                Some(pca_project_2d(&Tensor::stack_rows(&refs)?)?)
            } else {
                None
            };
            out.push_str(if pca { "condition_id,sample_id,mode,pc1,pc2\n" } else { "condition_id,sample_id,mode\n" });
            let mut row = 0;
            for (c, imgs) in per.iter().enumerate() {
                for (i, m) in classify_batch(imgs, &mask)?.into_iter().enumerate() {
                    match &proj {
                        Some(p) => writeln!(out, "{c},{i},{m},{},{}", p.at(&[row, 0]), p.at(&[row, 1])).unwrap(),
                        None => writeln!(out, "{c},{i},{m}").unwrap(),
                    }
                    row += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Writes [`plot_csv`] to `path` and returns the number of data rows.
pub fn emit_plot_data(samples: &Samples, path: &Path, pca: bool) -> Result<usize> {
    super::write_text(path, &plot_csv(samples, pca)?)?;
    Ok(samples.total())
}
