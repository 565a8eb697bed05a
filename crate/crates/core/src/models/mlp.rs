use rand::Rng;

use super::layers::Layer;
use super::{DiscriminatorSpec, GeneratorSpec};
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// `concat(condition, latent)` through leaky-relu hidden layers to a linear
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGenerator {
    pub spec: GeneratorSpec,
    pub params: ParamStore,
    layers: Vec<Layer>,
}

impl MlpGenerator {
    pub(super) fn new<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut widths = vec![spec.condition_shape[0] + spec.latent_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.output_dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::dense(&mut params, &format!("g.fc{i}"), w[0], w[1], false, rng))
            .collect();
        Self {
            spec: spec.clone(),
            params,
            layers,
        }
    }

    pub(super) fn forward(&self, g: &mut Graph, bound: &[Var], conditions: &Tensor, latents: &Tensor) -> Result<Var> {
        let n = conditions.rows();
        let (cd, ld) = (conditions.row_len(), latents.row_len());
        let mut input = Vec::with_capacity(n * (cd + ld));
        for i in 0..n {
            input.extend_from_slice(conditions.row(i));
            input.extend_from_slice(latents.row(i));
        }
        let mut x = g.constant(Tensor::new([n, cd + ld], input)?);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.dense_forward(g, bound[layer.weight], bound, x)?;
            if i + 1 < self.layers.len() {
                x = g.leaky_relu(x, self.spec.slope);
            }
        }
        Ok(x)
    }
}

/// Scores `concat(condition, candidate)` with optionally spectrally
/// normalized dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDiscriminator {
    pub spec: DiscriminatorSpec,
    pub params: ParamStore,
    layers: Vec<Layer>,
}

impl MlpDiscriminator {
    pub(super) fn new<R: Rng + ?Sized>(spec: &DiscriminatorSpec, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let mut widths = vec![spec.input_shape[0]];
        widths.extend(&spec.hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::dense(&mut params, &format!("d.fc{i}"), w[0], w[1], spec.spectral_norm, rng))
            .collect();
        Self {
            spec: spec.clone(),
            params,
            layers,
        }
    }

    pub(super) fn forward(
        &mut self,
        g: &mut Graph,
        bound: &[Var],
        conditions: &Tensor,
        candidate: Var,
        iters: usize,
    ) -> Result<Var> {
        let c = g.constant(conditions.clone());
        let mut x = g.concat_cols(&[c, candidate])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.weight_var(g, &mut self.params, bound, iters)?;
            x = layer.dense_forward(g, w, bound, x)?;
            if i < last {
                x = g.leaky_relu(x, self.spec.slope);
            }
        }
        Ok(x)
    }
}
