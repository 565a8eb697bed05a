use rand::Rng;

use super::layers::Layer;
use super::GeneratorSpec;
use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Encoder-decoder with a skip connection at every spatial scale.
///
/// Encoder: stride-2 4x4 convs, each followed by leaky-relu and instance
/// norm. The latent is tiled over the bottleneck and concatenated on the
/// channel axis. Decoder: nearest x2 upsample and a 3x3 conv per scale
/// (leaky-relu, instance norm), then concatenation with the matching encoder
/// feature (the input image at full resolution). A final 3x3 conv with tanh
/// yields images in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnetGenerator {
    pub spec: GeneratorSpec,
    pub params: ParamStore,
    encoder: Vec<Layer>,
    bottleneck: Layer,
    decoder: Vec<Layer>,
    head: Layer,
}

impl UnetGenerator {
    pub(super) fn new<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let image_c = spec.condition_shape[0];
        let ch = &spec.hidden;
        let depth = ch.len();

        let mut encoder = Vec::with_capacity(depth);
        let mut c_in = image_c;
        for (i, &c) in ch.iter().enumerate() {
            encoder.push(Layer::conv(&mut params, &format!("g.enc{i}"), c_in, c, 4, false, rng));
            c_in = c;
        }
        let deepest = ch[depth - 1];
        let bottleneck = Layer::conv(&mut params, "g.mid", deepest + spec.latent_dim, deepest, 3, false, rng);

        // Decoder level j restores the resolution of skip j, where skip 0 is
        // the input image and skip j > 0 is encoder output j - 1.
        let mut decoder = Vec::with_capacity(depth);
        let mut cur = deepest;
        for j in (0..depth).rev() {
            let out = if j == 0 { ch[0] } else { ch[j - 1] };
            let skip = if j == 0 { image_c } else { ch[j - 1] };
            decoder.push(Layer::conv(&mut params, &format!("g.dec{j}"), cur, out, 3, false, rng));
            cur = out + skip;
        }
        let head = Layer::conv(&mut params, "g.out", cur, image_c, 3, false, rng);
        Self {
            spec: spec.clone(),
            params,
            encoder,
            bottleneck,
            decoder,
            head,
        }
    }

    /// Spatial size of every encoder output, shallowest first.
    pub fn encoder_sizes(&self) -> Vec<usize> {
        let size = self.spec.condition_shape[1];
        (1..=self.encoder.len()).map(|i| size >> i).collect()
    }

    pub(super) fn forward(&self, g: &mut Graph, bound: &[Var], conditions: &Tensor, latents: &Tensor) -> Result<Var> {
        let slope = self.spec.slope;
        let input = g.constant(conditions.clone());
        let mut skips = vec![input];
        let mut x = input;
        for layer in &self.encoder {
            x = layer.conv_forward(g, bound[layer.weight], bound, x, 2, 1)?;
            x = g.leaky_relu(x, slope);
            x = g.instance_norm2d(x, NORM_EPS)?;
            skips.push(x);
        }
        skips.pop();

        let s = g.shape(x)[3];
        let z = g.constant(latents.clone());
        let z = g.broadcast_spatial(z, s, s)?;
        x = g.concat_channels(&[x, z])?;
        x = self.bottleneck.conv_forward(g, bound[self.bottleneck.weight], bound, x, 1, 1)?;
        x = g.leaky_relu(x, slope);

        for layer in &self.decoder {
            x = g.upsample_nearest2d(x, 2)?;
            x = layer.conv_forward(g, bound[layer.weight], bound, x, 1, 1)?;
            x = g.leaky_relu(x, slope);
            x = g.instance_norm2d(x, NORM_EPS)?;
            let skip = skips.pop().expect("one skip per decoder level");
            x = g.concat_channels(&[x, skip])?;
        }
        x = self.head.conv_forward(g, bound[self.head.weight], bound, x, 1, 1)?;
        Ok(g.tanh(x))
    }
}
