//! Generator and discriminator builders.
//!
//! Networks own their parameters in a [`ParamStore`]. A forward pass binds
//! those parameters onto a [`Graph`] with [`ParamStore::bind`] and passes the
//! returned handles to `forward`; after `backward`, gradients are copied back
//! with [`ParamStore::collect_grads`].

mod conv_disc;
mod layers;
mod mlp;
mod unet;

pub use conv_disc::ConvDiscriminator;
pub use mlp::{MlpDiscriminator, MlpGenerator};
pub use unet::UnetGenerator;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Mlp,
    Unet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// `[d]` for vector conditions, `[C, H, W]` for images.
    pub condition_shape: Vec<usize>,
    pub latent_dim: usize,
    /// Hidden widths (mlp) or encoder channel schedule (unet).
    pub hidden: Vec<usize>,
    /// Output width; mlp only; images keep the condition shape.
    pub output_dim: usize,
    pub slope: f64,
}

impl GeneratorSpec {
    pub fn mlp_default() -> Self {
        Self {
            kind: GeneratorKind::Mlp,
            condition_shape: vec![2],
            latent_dim: 2,
            hidden: vec![64, 64],
            output_dim: 2,
            slope: 0.2,
        }
    }

    pub fn unet_default() -> Self {
        Self {
            kind: GeneratorKind::Unet,
            condition_shape: vec![3, 32, 32],
            latent_dim: 8,
            hidden: vec![16, 32, 64],
            output_dim: 0,
            slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid(format!("generator spec needs latent-dim >= 1 and widths >= 1: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::invalid(format!("activation slope {} outside [0, 1)", self.slope)));
        }
        match self.kind {
            GeneratorKind::Mlp => {
                if self.condition_shape.len() != 1 || self.condition_shape[0] == 0 || self.output_dim == 0 {
                    return Err(Error::invalid("mlp generator needs a vector condition and output-dim >= 1"));
                }
            }
            GeneratorKind::Unet => {
                let [c, h, w] = self.condition_shape[..] else {
                    return Err(Error::invalid("unet generator needs a [C, H, W] condition"));
                };
                let depth = 1usize << self.hidden.len();
                if c == 0 || h != w || !h.is_power_of_two() || h < depth {
                    return Err(Error::invalid(format!(
                        "unet input must be square, power-of-two and at least {depth} wide, got {c}x{h}x{w}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorKind {
    /// Dense network over `concat(condition, candidate)`.
    Mlp,
    /// Convolutional trunk with a feature pyramid head.
    Fpd,
    /// The same trunk and head without pyramid branches.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub kind: DiscriminatorKind,
    /// `[condition_dim + candidate_dim]` (mlp) or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    /// Hidden widths (mlp) or stride-2 trunk channels (conv kinds).
    pub hidden: Vec<usize>,
    pub pyramid_grids: Vec<usize>,
    pub squeeze_channels: usize,
    pub spectral_norm: bool,
    pub slope: f64,
}

impl DiscriminatorSpec {
    pub fn mlp_default() -> Self {
        Self {
            kind: DiscriminatorKind::Mlp,
            input_shape: vec![4],
            hidden: vec![64, 64],
            pyramid_grids: Vec::new(),
            squeeze_channels: 0,
            spectral_norm: true,
            slope: 0.2,
        }
    }

    pub fn fpd_default() -> Self {
        Self {
            kind: DiscriminatorKind::Fpd,
            input_shape: vec![3, 32, 32],
            hidden: vec![16, 32],
            pyramid_grids: vec![1, 2, 4],
            squeeze_channels: 8,
            spectral_norm: true,
            slope: 0.2,
        }
    }

    /// Same trunk as [`fpd_default`](Self::fpd_default), no pyramid.
    pub fn conv_default() -> Self {
        Self {
            kind: DiscriminatorKind::Conv,
            pyramid_grids: Vec::new(),
            squeeze_channels: 0,
            ..Self::fpd_default()
        }
    }

    /// Spatial size of the trunk output for image kinds.
    pub fn feature_size(&self) -> usize {
        self.input_shape.get(1).copied().unwrap_or(0) >> self.hidden.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("discriminator widths must be >= 1"));
        }
        match self.kind {
            DiscriminatorKind::Mlp => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(Error::invalid("mlp discriminator needs a vector input"));
                }
            }
            DiscriminatorKind::Fpd | DiscriminatorKind::Conv => {
                let [_, h, w] = self.input_shape[..] else {
                    return Err(Error::invalid("image discriminator needs a [C, H, W] input"));
                };
                let f = self.feature_size();
                if h != w || f == 0 || f << self.hidden.len() != h {
                    return Err(Error::invalid(format!(
                        "input {h}x{w} does not reduce evenly through {} stride-2 layers",
                        self.hidden.len()
                    )));
                }
                if self.kind == DiscriminatorKind::Fpd {
                    if self.pyramid_grids.is_empty() || self.squeeze_channels == 0 {
                        return Err(Error::invalid("fpd needs pyramid grids and squeeze channels"));
                    }
                    if self.pyramid_grids.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::invalid("pyramid grids must be strictly increasing"));
                    }
                    if let Some(bad) = self.pyramid_grids.iter().find(|&&g| g == 0 || f % g != 0) {
                        return Err(Error::invalid(format!("pyramid grid {bad} does not divide feature size {f}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Uniform latent prior on `[0, 1)^dim` with center `(0.5, ..., 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSampler {
    pub dim: usize,
}

impl LatentSampler {
    pub const LOW: f64 = 0.0;
    pub const HIGH: f64 = 1.0;

    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn center(&self) -> Vec<f64> {
        vec![0.5 * (Self::LOW + Self::HIGH); self.dim]
    }

    /// `n` i.i.d. uniform rows.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let data = (0..n * self.dim).map(|_| rng.gen_range(Self::LOW..Self::HIGH)).collect();
        Tensor::from_parts(vec![n, self.dim], data)
    }

    /// `n` rows where row [`CENTER_ROW`] is the center and the remaining
    /// `n - 1` are uniform draws. Returns the latents and the center index.
    pub fn sample_with_center<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor, usize)> {
        if n == 0 {
            return Err(Error::invalid("sample_latents needs n >= 1"));
        }
        let mut data = self.center();
        data.extend((0..(n - 1) * self.dim).map(|_| rng.gen_range(Self::LOW..Self::HIGH)));
        Ok((Tensor::from_parts(vec![n, self.dim], data), CENTER_ROW))
    }
}

/// Index of the center latent within each condition's draw.
pub const CENTER_ROW: usize = 0;

/// `mask * foreground + (1 - mask) * raw`, with `mask` 1 on known pixels.
pub fn composite_output(g: &mut Graph, raw: Var, foreground: &Tensor, mask: &Tensor) -> Result<Var> {
    if g.shape(raw) != foreground.shape() || g.shape(raw) != mask.shape() {
        return Err(Error::shape("composite_output", g.shape(raw), mask.shape()));
    }
    let known: Vec<f64> = foreground.data().iter().zip(mask.data()).map(|(f, m)| f * m).collect();
    let keep = g.constant(mask.map(|m| 1.0 - m));
    let known = g.constant(Tensor::from_parts(mask.shape().to_vec(), known));
    let synth = g.mul(raw, keep)?;
    g.add(synth, known)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Mlp(MlpGenerator),
    Unet(UnetGenerator),
}

impl Generator {
    pub fn build<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            GeneratorKind::Mlp => Generator::Mlp(MlpGenerator::new(spec, rng)),
            GeneratorKind::Unet => Generator::Unet(UnetGenerator::new(spec, rng)),
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        match self {
            Generator::Mlp(m) => &m.spec,
            Generator::Unet(m) => &m.spec,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Generator::Mlp(m) => &m.params,
            Generator::Unet(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Generator::Mlp(m) => &mut m.params,
            Generator::Unet(m) => &mut m.params,
        }
    }

    /// Maps `conditions [B, ...]` and `latents [B, L]` to outputs.
    pub fn forward(&self, g: &mut Graph, bound: &[Var], conditions: &Tensor, latents: &Tensor) -> Result<Var> {
        if conditions.rows() != latents.rows() || latents.row_len() != self.spec().latent_dim {
            return Err(Error::shape("generator input", conditions.shape(), latents.shape()));
        }
        match self {
            Generator::Mlp(m) => m.forward(g, bound, conditions, latents),
            Generator::Unet(m) => m.forward(g, bound, conditions, latents),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Discriminator {
    Mlp(MlpDiscriminator),
    Conv(ConvDiscriminator),
}

impl Discriminator {
    pub fn build<R: Rng + ?Sized>(spec: &DiscriminatorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            DiscriminatorKind::Mlp => Discriminator::Mlp(MlpDiscriminator::new(spec, rng)),
            DiscriminatorKind::Fpd | DiscriminatorKind::Conv => Discriminator::Conv(ConvDiscriminator::new(spec, rng)),
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        match self {
            Discriminator::Mlp(m) => &m.spec,
            Discriminator::Conv(m) => &m.spec,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Discriminator::Mlp(m) => &m.params,
            Discriminator::Conv(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Discriminator::Mlp(m) => &mut m.params,
            Discriminator::Conv(m) => &mut m.params,
        }
    }

    /// Scores `[B, 1]`. The mlp kind requires `conditions`; image kinds
    /// score the candidate alone. `power_iters` advances the spectral
    /// normalization state (0 reuses it unchanged).
    pub fn forward(
        &mut self,
        g: &mut Graph,
        bound: &[Var],
        conditions: Option<&Tensor>,
        candidate: Var,
        power_iters: usize,
    ) -> Result<Var> {
        match self {
            Discriminator::Mlp(m) => {
                let c = conditions.ok_or_else(|| Error::invalid("mlp discriminator needs conditions"))?;
                m.forward(g, bound, c, candidate, power_iters)
            }
            Discriminator::Conv(m) => m.forward(g, bound, candidate, power_iters),
        }
    }
}
