//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)`
    /// over every checked coordinate.
    pub rel_err: f64,
    pub max_abs_grad: f64,
    pub checked: usize,
}

/// Which coordinates of which input to perturb.
#[derive(Clone, Debug)]
pub enum Coords {
    All,
    /// `(input index, flat element index)` pairs.
    Some(Vec<(usize, usize)>),
}

/// Compares the tape gradient of `f` with respect to every input against
/// central differences with step `h`. Inputs are bound as gradient-tracking
/// leaves; `f` must return a scalar and must be a pure function of them.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, coords: Coords, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let coords = match coords {
        Coords::All => inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect(),
        Coords::Some(c) => c,
    };

    let mut eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut work = inputs.to_vec();
    let (mut max_diff, mut scale) = (0.0f64, 0.0f64);
    for &(i, j) in &coords {
        let x0 = work[i].data()[j];
        work[i].data_mut()[j] = x0 + h;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = x0 - h;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i].data()[j];
        max_diff = max_diff.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    let rel_err = if scale > 0.0 { max_diff / scale } else { max_diff };
    Ok(GradCheck {
        rel_err,
        max_abs_grad: scale,
        checked: coords.len(),
    })
}
