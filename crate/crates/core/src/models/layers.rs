use rand::Rng;

use crate::error::Result;
use crate::tensor::{spectral_normalize_var, Graph, ParamStore, Parameter, Tensor, Var};

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
fn uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Indices of a weight/bias pair inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Layer {
    pub weight: usize,
    pub bias: usize,
    pub spectral: bool,
}

impl Layer {
    /// Dense weight `[fan_in, fan_out]` applied as `x W + b`.
    pub fn dense<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let w = uniform(&[fan_in, fan_out], fan_in, rng);
        let b = uniform(&[fan_out], fan_in, rng);
        Self::register(store, name, w, b, spectral, rng)
    }

    /// Convolution weight `[c_out, c_in, k, k]`.
    pub fn conv<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = uniform(&[c_out, c_in, k, k], fan_in, rng);
        let b = uniform(&[c_out], fan_in, rng);
        Self::register(store, name, w, b, spectral, rng)
    }

    fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w: Tensor,
        b: Tensor,
        spectral: bool,
        rng: &mut R,
    ) -> Self {
        let mut wp = Parameter::new(format!("{name}.weight"), w);
        if spectral {
            wp = wp.with_spectral(rng);
        }
        let weight = store.push(wp);
        let bias = store.push(Parameter::new(format!("{name}.bias"), b));
        Self { weight, bias, spectral }
    }

    /// Bound weight, spectrally normalized when the layer asks for it.
    pub fn weight_var(&self, g: &mut Graph, store: &mut ParamStore, bound: &[Var], iters: usize) -> Result<Var> {
        let w = bound[self.weight];
        if self.spectral {
            spectral_normalize_var(g, store.get_mut(self.weight), w, iters)
        } else {
            Ok(w)
        }
    }

    pub fn dense_forward(&self, g: &mut Graph, w: Var, bound: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, w)?;
        g.add_bias(y, bound[self.bias])
    }

    pub fn conv_forward(&self, g: &mut Graph, w: Var, bound: &[Var], x: Var, stride: usize, pad: usize) -> Result<Var> {
        g.conv2d(x, w, Some(bound[self.bias]), stride, pad)
    }
}
