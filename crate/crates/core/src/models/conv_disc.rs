use rand::Rng;

use super::layers::Layer;
use super::{DiscriminatorKind, DiscriminatorSpec};
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Var};

/// Image discriminator: a stride-2 conv trunk, an optional feature pyramid,
/// a 3x3 fusion conv and a 1x1 scoring conv averaged over space.
///
/// Each pyramid branch average-pools the trunk feature to a `g x g` grid,
/// squeezes channels with a 1x1 conv, and is upsampled back to the trunk
/// resolution before being concatenated with the trunk feature.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDiscriminator {
    pub spec: DiscriminatorSpec,
    pub params: ParamStore,
    trunk: Vec<Layer>,
    branches: Vec<(usize, Layer)>,
    fuse: Layer,
    score: Layer,
}

impl ConvDiscriminator {
    pub(super) fn new<R: Rng + ?Sized>(spec: &DiscriminatorSpec, rng: &mut R) -> Self {
        let sn = spec.spectral_norm;
        let mut params = ParamStore::new();
        let mut c_in = spec.input_shape[0];
        let mut trunk = Vec::new();
        for (i, &c) in spec.hidden.iter().enumerate() {
            trunk.push(Layer::conv(&mut params, &format!("d.trunk{i}"), c_in, c, 4, sn, rng));
            c_in = c;
        }
        let feat = c_in;
        let mut branches = Vec::new();
        if spec.kind == DiscriminatorKind::Fpd {
            for &grid in &spec.pyramid_grids {
                let l = Layer::conv(&mut params, &format!("d.pyr{grid}"), feat, spec.squeeze_channels, 1, sn, rng);
                branches.push((grid, l));
            }
        }
        let fused_in = feat + branches.len() * spec.squeeze_channels;
        let fuse = Layer::conv(&mut params, "d.fuse", fused_in, feat, 3, sn, rng);
        let score = Layer::conv(&mut params, "d.score", feat, 1, 1, sn, rng);
        Self {
            spec: spec.clone(),
            params,
            trunk,
            branches,
            fuse,
            score,
        }
    }

    /// Channels entering the fusion conv.
    pub fn fused_channels(&self) -> usize {
        self.spec.hidden.last().copied().unwrap_or(0) + self.branches.len() * self.spec.squeeze_channels
    }

    pub(super) fn forward(&mut self, g: &mut Graph, bound: &[Var], image: Var, iters: usize) -> Result<Var> {
        let slope = self.spec.slope;
        let mut x = image;
        for layer in &self.trunk {
            let w = layer.weight_var(g, &mut self.params, bound, iters)?;
            x = layer.conv_forward(g, w, bound, x, 2, 1)?;
            x = g.leaky_relu(x, slope);
        }
        let size = g.shape(x)[g.shape(x).len() - 1];
        let mut parts = vec![x];
        for (grid, layer) in &self.branches {
            let pooled = g.adaptive_avg_pool2d(x, *grid)?;
            let w = layer.weight_var(g, &mut self.params, bound, iters)?;
            let squeezed = layer.conv_forward(g, w, bound, pooled, 1, 0)?;
            let squeezed = g.leaky_relu(squeezed, slope);
            parts.push(g.upsample_nearest2d(squeezed, size / grid)?);
        }
        let cat = g.concat_channels(&parts)?;
        let w = self.fuse.weight_var(g, &mut self.params, bound, iters)?;
        let h = self.fuse.conv_forward(g, w, bound, cat, 1, 1)?;
        let h = g.leaky_relu(h, slope);
        let w = self.score.weight_var(g, &mut self.params, bound, iters)?;
        let s = self.score.conv_forward(g, w, bound, h, 1, 0)?;
        let s = g.adaptive_avg_pool2d(s, 1)?;
        let batch = g.value(s).len();
        g.reshape(s, [batch, 1])
    }
}
