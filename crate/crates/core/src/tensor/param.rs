//! Trainable parameters: Adam state and spectral-normalization state.

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor for the estimated top singular value.
pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step: u64,
    /// Left singular vector estimate, unit norm, length `rows()`.
    pub spectral_u: Option<Vec<f64>>,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            step: 0,
            spectral_u: None,
            grad: None,
        }
    }

    /// Enables spectral normalization with a random unit start vector.
    pub fn with_spectral<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        let (rows, _) = self.matrix_dims();
        let mut u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if normalize_in_place(&mut u) == 0.0 {
            u = vec![0.0; rows];
            u[0] = 1.0;
        }
        self.spectral_u = Some(u);
        self
    }

    /// `(rows, cols)` of the matrix view: leading dimension by the rest.
    pub fn matrix_dims(&self) -> (usize, usize) {
        (self.value.rows(), self.value.row_len())
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// One bias-corrected Adam update. Consumes the gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        let grad = self.grad.take().ok_or_else(|| Error::MissingGradient(self.name.clone()))?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let m = self.adam_m.data_mut();
        let v = self.adam_v.data_mut();
        for (((p, g), mi), vi) in self.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }

    /// Current estimate `u^T W v` with `v = normalize(W^T u)`, without
    /// advancing the power iteration.
    pub fn sigma_estimate(&self) -> Option<f64> {
        let u = self.spectral_u.as_ref()?;
        let (rows, cols) = self.matrix_dims();
        let mut v = mat_t_vec(self.value.data(), rows, cols, u);
        normalize_in_place(&mut v);
        let wv = mat_vec(self.value.data(), rows, cols, &v);
        Some(dot(u, &wv))
    }

    /// Advances the stored power iteration `iters` times and returns
    /// `(u, v, sigma)` for the current weight.
    fn power_iterate(&mut self, iters: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let (rows, cols) = self.matrix_dims();
        let w = self.value.data();
        let u = self
            .spectral_u
            .as_mut()
            .ok_or_else(|| Error::invalid(format!("parameter `{}` has no spectral state", self.name)))?;
        let mut v = vec![0.0; cols];
        for _ in 0..iters {
            v = mat_t_vec(w, rows, cols, u);
            normalize_in_place(&mut v);
            let mut nu = mat_vec(w, rows, cols, &v);
            if normalize_in_place(&mut nu) > 0.0 {
                *u = nu;
            }
        }
        if iters == 0 {
            v = mat_t_vec(w, rows, cols, u);
            normalize_in_place(&mut v);
        }
        let sigma = dot(u, &mat_vec(w, rows, cols, &v));
        Ok((u.clone(), v, sigma))
    }
}

/// Returns `W / sigma_hat`, where `sigma_hat` is the power-iteration
/// estimate of the top singular value of `p` viewed as a matrix. The stored
/// `u` vector advances by `iters` steps.
pub fn spectral_normalize(p: &mut Parameter, iters: usize) -> Result<Tensor> {
    if iters == 0 {
        return Err(Error::invalid("spectral_normalize needs at least one iteration"));
    }
    let (_, _, sigma) = p.power_iterate(iters)?;
    let s = sigma.max(SIGMA_FLOOR);
    Ok(p.value.map(|x| x / s))
}

/// Graph version of [`spectral_normalize`]: `w` must be the bound variable
/// for `p`. Gradient flows through both the weight and `sigma_hat`, with the
/// singular vectors held constant. `iters == 0` reuses the stored `u`.
pub fn spectral_normalize_var(g: &mut Graph, p: &mut Parameter, w: Var, iters: usize) -> Result<Var> {
    let (u, v, sigma) = p.power_iterate(iters)?;
    let sigma_var = if sigma > SIGMA_FLOOR {
        g.spectral_sigma(w, u, v)?
    } else {
        g.constant(Tensor::scalar(SIGMA_FLOOR))
    };
    g.div_scalar(w, sigma_var)
}

/// An ordered collection of named parameters belonging to one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Parameter) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Records every parameter on `g` as a constant, for passes that
    /// differentiate through the network without updating it.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    /// Copies gradients from a finished backward pass into the parameters.
    pub fn collect_grads(&mut self, g: &Graph, vars: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            match g.grad(*v) {
                Some(t) => p.accumulate_grad(t),
                None => p.accumulate_grad(&Tensor::zeros(p.value.shape().to_vec())),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.params.iter_mut().try_for_each(|p| p.adam_step(cfg))
    }

    /// FNV-1a over the bit patterns of every value, for cheap change detection.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for x in p.value.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_in_place(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows).map(|i| dot(&w[i * cols..(i + 1) * cols], v)).collect()
}

fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, ui) in u.iter().enumerate().take(rows) {
        for (o, wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += ui * wij;
        }
    }
    out
}
