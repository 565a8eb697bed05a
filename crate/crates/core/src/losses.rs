//! Training objectives: normalized diversification, hinge adversarial
//! losses, the center-latent regularizer, the mode-seeking ratio term and
//! their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Added to every distance normalizer and ratio denominator.
pub const DIST_EPS: f64 = 1e-8;

/// Which diversity machinery a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain conditional hinge GAN.
    #[serde(rename = "none")]
    None,
    /// Normalized diversification only.
    #[serde(rename = "ndiv")]
    Ndiv,
    /// Normalized diversification plus the center-latent regularizer.
    #[serde(rename = "ndiv+reg")]
    NdivReg,
    /// Mode-seeking ratio term in place of the diversity loss.
    #[serde(rename = "msgan")]
    Msgan,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::None, Variant::Ndiv, Variant::Msgan, Variant::NdivReg];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Ndiv => "ndiv",
            Variant::NdivReg => "ndiv+reg",
            Variant::Msgan => "msgan",
        }
    }

    pub fn uses_ndiv(self) -> bool {
        matches!(self, Variant::Ndiv | Variant::NdivReg)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}` (none|ndiv|ndiv+reg|msgan)")))
    }
}

/// How the center-latent reconstruction is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegNorm {
    /// Mean squared error per element.
    #[default]
    Mse,
    /// Unsquared Euclidean norm of the difference.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub variant: Variant,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1.0,
            lambda3: 5.0,
            alpha: 0.8,
            variant: Variant::NdivReg,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid(format!("objective weights must be >= 0, got {lambdas:?}")));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// `(diversity, adversarial, regularization)` weights after the variant
    /// switches terms off.
    pub fn effective(&self) -> (f64, f64, f64) {
        match self.variant {
            Variant::None => (0.0, self.lambda2, 0.0),
            Variant::Ndiv | Variant::Msgan => (self.lambda1, self.lambda2, 0.0),
            Variant::NdivReg => (self.lambda1, self.lambda2, self.lambda3),
        }
    }
}

/// Raw and row-normalized distance matrices for one latent/output set.
#[derive(Clone, Copy, Debug)]
pub struct PairwiseMatrices {
    pub raw_dz: Var,
    pub raw_dx: Var,
    pub dz: Var,
    pub dx: Var,
}

/// Euclidean distances between the rows of `points [N, d]`.
pub fn pairwise_euclidean(g: &mut Graph, points: Var) -> Result<Var> {
    let n = g.value(points).rows();
    if g.shape(points).len() != 2 || n < 2 {
        return Err(Error::invalid(format!(
            "pairwise_euclidean needs [N >= 2, d], got {:?}",
            g.shape(points)
        )));
    }
    g.pairwise_distances(points)
}

/// Divides each row by its sum plus [`DIST_EPS`]. The denominator is
/// detached, so gradient reaches the numerators only.
pub fn normalize_rows_frozen(g: &mut Graph, raw: Var) -> Result<Var> {
    let sums = g.row_sums(raw)?;
    let frozen = g.detach(sums);
    let denom = g.add_scalar(frozen, DIST_EPS);
    g.div_rows(raw, denom)
}

pub fn pairwise_matrices(g: &mut Graph, latents: Var, outputs: Var) -> Result<PairwiseMatrices> {
    let (nz, nx) = (g.value(latents).rows(), g.value(outputs).rows());
    if nz != nx {
        return Err(Error::invalid(format!("latent count {nz} != output count {nx}")));
    }
    let raw_dz = pairwise_euclidean(g, latents)?;
    let raw_dx = pairwise_euclidean(g, outputs)?;
    let dz = normalize_rows_frozen(g, raw_dz)?;
    let dx = normalize_rows_frozen(g, raw_dx)?;
    Ok(PairwiseMatrices { raw_dz, raw_dx, dz, dx })
}

/// Hinge on normalized distances: mean over off-diagonal pairs of
/// `max(0, alpha * Dz_ij - Dx_ij)`. `outputs` may have any trailing shape;
/// each leading-dimension row is one sample.
pub fn ndiv_loss(g: &mut Graph, latents: &Tensor, outputs: Var, alpha: f64) -> Result<Var> {
    let n = latents.rows();
    if g.value(outputs).rows() != n {
        return Err(Error::invalid(format!(
            "ndiv_loss: {n} latents but {} outputs",
            g.value(outputs).rows()
        )));
    }
    let flat = g.value(outputs).row_len();
    let outputs = g.reshape(outputs, [n, flat])?;
    let z = g.constant(latents.clone());
    let m = pairwise_matrices(g, z, outputs)?;
    let target = g.scale(m.dz, alpha);
    let gap = g.sub(target, m.dx)?;
    let hinge = g.relu(gap);
    let total = g.sum(hinge);
    Ok(g.scale(total, 1.0 / (n * n - n) as f64))
}

/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d_loss(g: &mut Graph, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let neg = g.scale(real_scores, -1.0);
    let r = g.add_scalar(neg, 1.0);
    let r = g.relu(r);
    let r = g.mean(r);
    let f = g.add_scalar(fake_scores, 1.0);
    let f = g.relu(f);
    let f = g.mean(f);
    g.add(r, f)
}

/// `-mean(fake)`.
pub fn hinge_g_loss(g: &mut Graph, fake_scores: Var) -> Var {
    let m = g.mean(fake_scores);
    g.scale(m, -1.0)
}

/// Reconstruction of the output decoded from the latent center.
pub fn center_reg_loss(g: &mut Graph, center_output: Var, target: Var, norm: RegNorm) -> Result<Var> {
    let diff = g.sub(center_output, target)?;
    Ok(match norm {
        RegNorm::Mse => {
            let sq = g.mul(diff, diff)?;
            g.mean(sq)
        }
        RegNorm::L2 => g.l2_norm(diff),
    })
}

/// `-min(|out1 - out2| / (|z1 - z2| + eps), cap)`.
pub fn msgan_term(g: &mut Graph, z1: &[f64], z2: &[f64], out1: Var, out2: Var, cap: f64) -> Result<Var> {
    if z1.len() != z2.len() {
        return Err(Error::shape("msgan_term", &[z1.len()], &[z2.len()]));
    }
    let dz: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let diff = g.sub(out1, out2)?;
    let dist = g.l2_norm(diff);
    let ratio = g.scale(dist, 1.0 / (dz + DIST_EPS));
    let capped = g.clamp_max(ratio, cap);
    Ok(g.scale(capped, -1.0))
}

/// Weighted sum of the active terms. Terms whose effective weight is zero
/// are left out of the sum entirely.
pub fn total_objective(g: &mut Graph, div: Var, adv: Var, reg: Var, w: &ObjectiveWeights) -> Result<Var> {
    let (l1, l2, l3) = w.effective();
    let mut total: Option<Var> = None;
    for (term, weight) in [(div, l1), (adv, l2), (reg, l3)] {
        if weight == 0.0 {
            continue;
        }
        let t = g.scale(term, weight);
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::gradcheck::{check_gradients, Coords};

    fn brute_dist(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..a.len() {
            s += (a[k] - b[k]) * (a[k] - b[k]);
        }
        s.sqrt()
    }

    /// Plain double-loop evaluation of the normalized hinge.
    fn brute_ndiv(z: &[Vec<f64>], x: &[Vec<f64>], alpha: f64) -> f64 {
        let n = z.len();
        let mut dz = vec![vec![0.0; n]; n];
        let mut dx = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                dz[i][j] = brute_dist(&z[i], &z[j]);
                dx[i][j] = brute_dist(&x[i], &x[j]);
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            let sz: f64 = dz[i].iter().sum::<f64>() + DIST_EPS;
            let sx: f64 = dx[i].iter().sum::<f64>() + DIST_EPS;
            for j in 0..n {
                if i != j {
                    total += f64::max(0.0, alpha * dz[i][j] / sz - dx[i][j] / sx);
                }
            }
        }
        total / (n * n - n) as f64
    }

    fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
    }

    #[test]
    fn pairwise_euclidean_cases() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]));
        let d = pairwise_euclidean(&mut g, p).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 5.0, 5.0, 0.0]);

        let same = g.constant(Tensor::from_rows(&vec![vec![1.0, 2.0]; 3]));
        let d = pairwise_euclidean(&mut g, same).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));

        let one = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        assert!(pairwise_euclidean(&mut g, one).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = rows(&mut rng, 5, 3, 2.0);
        let p = g.constant(Tensor::from_rows(&pts));
        let d = pairwise_euclidean(&mut g, p).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((g.value(d).at(&[i, j]) - brute_dist(&pts[i], &pts[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_rows_cases() {
        let mut g = Graph::new();
        let raw = g.constant(Tensor::from_rows(&[vec![0.0, 2.0, 6.0]]));
        let n = normalize_rows_frozen(&mut g, raw).unwrap();
        let v = g.value(n).data();
        assert!((v[1] - 0.25).abs() < 1e-9 && (v[2] - 0.75).abs() < 1e-9 && v[0] == 0.0);

        let zeros = g.constant(Tensor::zeros([3, 3]));
        let n = normalize_rows_frozen(&mut g, zeros).unwrap();
        assert!(g.value(n).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_rows_gradient_uses_frozen_sums() {
        let raw = Tensor::from_rows(&[vec![0.0, 1.0, 2.5], vec![1.0, 0.0, 0.5], vec![2.5, 0.5, 0.0]]);
        let w = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7], vec![0.4, 0.9, -1.1]]);
        let mut g = Graph::new();
        let r = g.param(raw.clone());
        let n = normalize_rows_frozen(&mut g, r).unwrap();
        let wc = g.constant(w.clone());
        let p = g.mul(n, wc).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        let grad = g.grad(r).unwrap();
        for i in 0..3 {
            let sum = raw.row(i).iter().sum::<f64>() + DIST_EPS;
            for j in 0..3 {
                // Oracle: raw-matrix gradient (w) divided by the frozen row sum.
                let expect = w.at(&[i, j]) / sum;
                assert!((grad.at(&[i, j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ndiv_loss_examples() {
        let z = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]]);
        let mut g = Graph::new();
        // Outputs equal to the latents reproduce Dz exactly.
        let x = g.param(z.clone());
        let l = ndiv_loss(&mut g, &z, x, 1.0).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        g.backward(l).unwrap();
        assert!(g.grad(x).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));

        // Collapsed outputs: every row of Dz sums to one, so the loss is
        // N / (N^2 - N) = 3 / 6.
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&vec![vec![1.0, 1.0]; 3]));
        let l = ndiv_loss(&mut g, &z, x, 1.0).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-7);

        let short = g.param(Tensor::zeros([2, 2]));
        assert!(ndiv_loss(&mut g, &z, short, 1.0).is_err());
    }

    #[test]
    fn ndiv_loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let z = rows(&mut rng, 6, 2, 1.0);
            let x = rows(&mut rng, 6, 3, 5.0);
            let mut g = Graph::new();
            let xv = g.constant(Tensor::from_rows(&x));
            let l = ndiv_loss(&mut g, &Tensor::from_rows(&z), xv, 0.8).unwrap();
            assert!((g.value(l).item() - brute_ndiv(&z, &x, 0.8)).abs() < 1e-12);
        }
    }

    #[test]
    fn ndiv_gradient_matches_frozen_denominator_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rows(&mut rng, 5, 2, 1.0);
        let x0 = rows(&mut rng, 5, 2, 0.1);
        let n = z.len();
        let alpha = 0.8;
        let row_sum = |pts: &[Vec<f64>], i: usize| (0..n).map(|j| brute_dist(&pts[i], &pts[j])).sum::<f64>() + DIST_EPS;
        let frozen: Vec<f64> = (0..n).map(|i| row_sum(&x0, i)).collect();
        let zsum: Vec<f64> = (0..n).map(|i| row_sum(&z, i)).collect();
        // Output normalizers fixed at their unperturbed values.
        let loss_frozen = |x: &[Vec<f64>]| {
            let mut t = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let dz = brute_dist(&z[i], &z[j]) / zsum[i];
                        t += f64::max(0.0, alpha * dz - brute_dist(&x[i], &x[j]) / frozen[i]);
                    }
                }
            }
            t / (n * n - n) as f64
        };

        let mut g = Graph::new();
        let xv = g.param(Tensor::from_rows(&x0));
        let zl = g.param(Tensor::from_rows(&z));
        let l = ndiv_loss(&mut g, &Tensor::from_rows(&z), xv, alpha).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(zl).is_none(), "latents are sampled constants");
        let grad = g.grad(xv).unwrap();
        let h = 1e-6;
        for i in 0..n {
            for k in 0..2 {
                let (mut xp, mut xm) = (x0.clone(), x0.clone());
                xp[i][k] += h;
                xm[i][k] -= h;
                let numeric = (loss_frozen(&xp) - loss_frozen(&xm)) / (2.0 * h);
                assert!((grad.at(&[i, k]) - numeric).abs() < 1e-6, "{} vs {numeric}", grad.at(&[i, k]));
            }
        }
    }

    #[test]
    fn hinge_losses() {
        let eval_d = |real: &[f64], fake: &[f64]| {
            let mut g = Graph::new();
            let r = g.constant(Tensor::new([real.len()], real.to_vec()).unwrap());
            let f = g.constant(Tensor::new([fake.len()], fake.to_vec()).unwrap());
            let l = hinge_d_loss(&mut g, r, f).unwrap();
            g.value(l).item()
        };
        assert_eq!(eval_d(&[2.0], &[-2.0]), 0.0);
        assert_eq!(eval_d(&[0.0], &[0.0]), 2.0);
        assert_eq!(eval_d(&[0.5], &[-0.25]), 1.25);

        let eval_g = |fake: &[f64]| {
            let mut g = Graph::new();
            let f = g.constant(Tensor::new([fake.len()], fake.to_vec()).unwrap());
            let l = hinge_g_loss(&mut g, f);
            g.value(l).item()
        };
        assert_eq!(eval_g(&[0.7]), -0.7);
        assert_eq!(eval_g(&[0.0]), 0.0);
        assert_eq!(eval_g(&[1.0, -1.0]), 0.0);
    }

    #[test]
    fn center_reg_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let l = center_reg_loss(&mut g, a, a, RegNorm::Mse).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let b = g.constant(Tensor::new([2], vec![4.0, 6.0]).unwrap());
        let l = center_reg_loss(&mut g, b, a, RegNorm::Mse).unwrap();
        assert_eq!(g.value(l).item(), 12.5);
        let l = center_reg_loss(&mut g, b, a, RegNorm::L2).unwrap();
        assert_eq!(g.value(l).item(), 5.0);

        let mut g = Graph::new();
        let out = g.param(Tensor::new([2], vec![4.0, 6.0]).unwrap());
        let t = g.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let l = center_reg_loss(&mut g, out, t, RegNorm::Mse).unwrap();
        g.backward(l).unwrap();
        // 2 * diff / count
        assert_eq!(g.grad(out).unwrap().data(), &[3.0, 4.0]);

        let r = check_gradients(&[Tensor::new([3], vec![0.2, -1.0, 0.7]).unwrap()], 1e-6, Coords::All, |g, v| {
            let t = g.constant(Tensor::new([3], vec![1.0, 0.5, -0.5]).unwrap());
            center_reg_loss(g, v[0], t, RegNorm::Mse)
        })
        .unwrap();
        assert!(r.rel_err < 1e-8);
    }

    #[test]
    fn msgan_cases() {
        let mut g = Graph::new();
        let o = g.constant(Tensor::new([2], vec![1.0, 1.0]).unwrap());
        let t = msgan_term(&mut g, &[0.0, 0.0], &[1.0, 0.0], o, o, 50.0).unwrap();
        assert_eq!(g.value(t).item(), 0.0);

        let a = g.constant(Tensor::new([2], vec![0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new([2], vec![0.0, 4.0]).unwrap());
        let t = msgan_term(&mut g, &[0.0, 0.0], &[2.0, 0.0], a, b, 50.0).unwrap();
        assert!((g.value(t).item() + 2.0).abs() < 1e-7);

        let t = msgan_term(&mut g, &[0.0, 0.0], &[0.01, 0.0], a, b, 50.0).unwrap();
        assert_eq!(g.value(t).item(), -50.0);
    }

    #[test]
    fn total_objective_variants() {
        let eval = |variant: Variant, terms: (f64, f64, f64)| {
            let mut g = Graph::new();
            let d = g.constant(Tensor::scalar(terms.0));
            let a = g.constant(Tensor::scalar(terms.1));
            let r = g.constant(Tensor::scalar(terms.2));
            let w = ObjectiveWeights { variant, ..Default::default() };
            let t = total_objective(&mut g, d, a, r, &w).unwrap();
            g.value(t).item()
        };
        assert!((eval(Variant::NdivReg, (2.0, -0.5, 0.1)) - 0.2).abs() < 1e-12);
        assert_eq!(eval(Variant::None, (2.0, -0.5, 0.1)), -0.5);
        assert_eq!(eval(Variant::Ndiv, (2.0, -0.5, 1e6)), eval(Variant::Ndiv, (2.0, -0.5, -3.0)));
        assert!((eval(Variant::Ndiv, (2.0, -0.5, 7.0)) + 0.3).abs() < 1e-12);
    }

    #[test]
    fn weights_validation_and_names() {
        assert!(ObjectiveWeights::default().validate().is_ok());
        let bad = ObjectiveWeights { alpha: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let neg = ObjectiveWeights { lambda3: -1.0, ..Default::default() };
        assert!(neg.validate().is_err());
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
    }

    proptest! {
        #[test]
        fn ndiv_invariant_to_output_scale(seed in 0u64..500, c in 0.5f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::from_rows(&rows(&mut rng, 6, 2, 1.0));
            let x = Tensor::from_rows(&rows(&mut rng, 6, 3, 1.0));
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let v = g.constant(t);
                let l = ndiv_loss(&mut g, &z, v, 0.8).unwrap();
                g.value(l).item()
            };
            let base = eval(x.clone());
            prop_assert!((base - eval(x.map(|v| v * c))).abs() < 1e-9);
        }

        #[test]
        fn inactive_hinges_give_zero_gradient(seed in 0u64..500, alpha in 0.05f64..0.5) {
            // Outputs equal to latents give Dx == Dz, so alpha < 1 leaves every
            // hinge inactive.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::from_rows(&rows(&mut rng, 5, 2, 1.0));
            let mut g = Graph::new();
            let x = g.param(z.clone());
            let l = ndiv_loss(&mut g, &z, x, alpha).unwrap();
            g.backward(l).unwrap();
            prop_assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
        }

        #[test]
        fn hinge_d_nonnegative(real in prop::collection::vec(-3.0f64..3.0, 1..6), fake in prop::collection::vec(-3.0f64..3.0, 1..6)) {
            let mut g = Graph::new();
            let r = g.constant(Tensor::new([real.len()], real.clone()).unwrap());
            let f = g.constant(Tensor::new([fake.len()], fake.clone()).unwrap());
            let l = hinge_d_loss(&mut g, r, f).unwrap();
            let v = g.value(l).item();
            prop_assert!(v >= 0.0);
            let satisfied = real.iter().all(|&x| x >= 1.0) && fake.iter().all(|&x| x <= -1.0);
            prop_assert_eq!(v == 0.0, satisfied);
        }
    }
}
