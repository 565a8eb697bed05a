use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::sprites::{foreground_mask, render_sprite};

fn random(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::new([rows, cols], (0..rows * cols).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// FD^2 through nalgebra eigen decompositions.
fn nalgebra_frechet_sq(a: &Tensor, b: &Tensor) -> f64 {
    let stats = |x: &Tensor| {
        let (n, d) = (x.rows(), x.row_len());
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean = m.row_mean();
        let c = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        (mean, (c.transpose() * &c) / (n as f64 - 1.0))
    };
    let sqrtm = |s: &DMatrix<f64>| {
        let e = SymmetricEigen::new(s.clone());
        let root = e.eigenvalues.map(|l| l.max(0.0).sqrt());
        &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
    };
    let (m1, s1) = stats(a);
    let (m2, s2) = stats(b);
    let r1 = sqrtm(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt
}

#[test]
fn jacobi_matches_nalgebra() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=8 {
        let x = random(n + 3, n, &mut r);
        let (_, cov) = mean_and_covariance(&x).unwrap();
        let (vals, vecs) = symmetric_eigen(&cov, n).unwrap();
        let mut reference: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &cov)).eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in vals.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        // A v = lambda v for each returned pair.
        for k in 0..n {
            let v = &vecs[k * n..(k + 1) * n];
            for i in 0..n {
                let av: f64 = (0..n).map(|j| cov[i * n + j] * v[j]).sum();
                assert!((av - vals[k] * v[i]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn frechet_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let a = random(50, 3, &mut r);
    assert!(frechet_gaussian(&a, &a).unwrap() < 1e-9);

    // Near point masses 5 apart.
    let tiny = |cx: f64, cy: f64, r: &mut ChaCha8Rng| {
        Tensor::new(
            [40, 2],
            (0..40).flat_map(|_| [cx + r.gen_range(-1e-7..1e-7), cy + r.gen_range(-1e-7..1e-7)]).collect(),
        )
        .unwrap()
    };
    let fd = frechet_gaussian(&tiny(0.0, 0.0, &mut r), &tiny(3.0, 4.0, &mut r)).unwrap();
    assert!((fd - 5.0).abs() < 1e-6, "{fd}");

    assert!(frechet_gaussian(&random(2, 2, &mut r), &random(10, 2, &mut r)).is_err());
    assert!(frechet_gaussian(&random(10, 2, &mut r), &random(10, 3, &mut r)).is_err());
}

#[test]
fn frechet_commuting_closed_form() {
    // Samples whose unbiased mean/covariance are exactly (0,0), I and (1,0), 4I.
    let unit = |scale: f64, shift: f64| {
        let s = scale * (3.0f64 / 4.0).sqrt() * 2f64.sqrt();
        let pts = [[s, 0.0], [-s, 0.0], [0.0, s], [0.0, -s]];
        Tensor::new([4, 2], pts.iter().flat_map(|p| [p[0] + shift, p[1]]).collect()).unwrap()
    };
    let (a, b) = (unit(1.0, 0.0), unit(2.0, 1.0));
    let (_, ca) = mean_and_covariance(&a).unwrap();
    assert!((ca[0] - 1.0).abs() < 1e-12 && ca[1].abs() < 1e-12);
    let fd = frechet_gaussian(&a, &b).unwrap();
    assert!((fd - 3f64.sqrt()).abs() < 1e-9, "{fd}");
}

#[test]
fn frechet_matches_nalgebra_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for d in 2..=8 {
        let a = random(3 * d, d, &mut r);
        let b = random(2 * d + 1, d, &mut r).map(|v| 0.5 * v + 0.3);
        let ours = frechet_squared(&a, &b).unwrap();
        let theirs = nalgebra_frechet_sq(&a, &b);
        assert!((ours - theirs).abs() < 1e-9 * theirs.abs().max(1.0), "d={d}: {ours} vs {theirs}");
    }
}

#[test]
fn pairwise_examples() {
    let one = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
    assert_eq!(mean_pairwise_distance(&[one]).unwrap(), 5.0);
    let same = Tensor::full([5, 2], 1.5);
    assert_eq!(mean_pairwise_distance(&[same]).unwrap(), 0.0);
    assert!(mean_pairwise_distance(&[Tensor::zeros([1, 2])]).is_err());
    assert!(mean_pairwise_distance(&[]).is_err());
}

#[test]
fn pairwise_matches_triple_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let sets: Vec<Tensor> = (0..3).map(|_| random(6, 3, &mut r)).collect();
    let mut total = 0.0;
    for s in &sets {
        let mut acc = 0.0;
        let mut count = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if i < j {
                    let mut sq = 0.0;
                    for k in 0..3 {
                        sq += (s.at(&[i, k]) - s.at(&[j, k])).powi(2);
                    }
                    acc += sq.sqrt();
                    count += 1.0;
                }
            }
        }
        total += acc / count;
    }
    assert!((mean_pairwise_distance(&sets).unwrap() - total / 3.0).abs() < 1e-12);
}

#[test]
fn count_modes_examples() {
    let copies = Tensor::new([4000, 2], [1.2, 1.4].repeat(4000)).unwrap();
    assert_eq!(count_modes(&copies).unwrap(), 1);
    let two = Tensor::from_rows(&[vec![0.4, 0.6], vec![0.6, 0.4]]);
    assert_eq!(count_modes(&two).unwrap(), 2);
    assert_eq!(grid_cell(&[-0.5, 100.7]), (0, 100));
    assert_eq!(grid_cell(&[2.5, 3.5]), (3, 4));
    assert!(count_modes(&Tensor::zeros([3, 3])).is_err());
}

#[test]
fn count_modes_on_lattice() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<(i64, i64)> = (0..500).map(|_| (r.gen_range(0..=100), r.gen_range(0..=100))).collect();
    let distinct: std::collections::HashSet<_> = pts.iter().collect();
    let t = Tensor::new([500, 2], pts.iter().flat_map(|&(x, y)| [x as f64, y as f64]).collect()).unwrap();
    assert_eq!(count_modes(&t).unwrap(), distinct.len());
}

#[test]
fn coverage_examples() {
    assert_eq!(coverage_from_labels(&[vec![0, 0, 3], vec![1, 2, 2]]).unwrap(), 2.0);
    assert_eq!(coverage_from_labels(&[vec![4; 10]]).unwrap(), 1.0);
    assert_eq!(coverage_from_labels(&[(0..6).collect()]).unwrap(), 6.0);
    assert!(coverage_from_labels(&[vec![1]]).is_err());

    let mask = foreground_mask();
    let stack = |modes: &[usize]| {
        let imgs: Vec<Tensor> = modes.iter().map(|&m| render_sprite(1, m).unwrap()).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let flat = Tensor::stack_rows(&refs).unwrap();
        flat.reshape([modes.len(), 3, 32, 32]).unwrap()
    };
    let all = stack(&[0, 1, 2, 3, 4, 5]);
    assert_eq!(mode_coverage(&[all], &mask).unwrap(), 6.0);
    let same = stack(&[2, 2, 2]);
    assert_eq!(mode_coverage(&[same], &mask).unwrap(), 1.0);
}

#[test]
fn pca_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    // Collinear data.
    let line = Tensor::new([30, 3], (0..30).flat_map(|_| {
        let t: f64 = r.gen_range(-3.0..3.0);
        [t, 2.0 * t, -t]
    }).collect()).unwrap();
    let p = pca_project_2d(&line).unwrap();
    let second: Vec<f64> = (0..30).map(|i| p.at(&[i, 1])).collect();
    let mean = second.iter().sum::<f64>() / 30.0;
    assert!(second.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 29.0 < 1e-9);

    let ident = Tensor::full([10, 4], 2.5);
    assert!(pca_project_2d(&ident).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    assert!(pca_project_2d(&Tensor::zeros([2, 3])).is_err());
}

fn total_variance(p: &Tensor) -> f64 {
    let (_, cov) = mean_and_covariance(p).unwrap();
    let k = p.row_len();
    (0..k).map(|i| cov[i * k + i]).sum()
}

#[test]
fn pca_preserves_top_variance_both_routes() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for (n, d) in [(40, 5), (12, 30)] {
        let x = random(n, d, &mut r);
        let fit = Pca::fit(&x, 2).unwrap();
        let (_, cov) = mean_and_covariance(&x).unwrap();
        let mut reference: Vec<f64> =
            SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov)).eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        let p = fit.transform(&x).unwrap();
        assert!((total_variance(&p) - reference[0] - reference[1]).abs() < 1e-9, "n={n} d={d}");
        for dir in &fit.components {
            let lead = dir.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(lead > 0.0);
            assert!((dir.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_symmetric_and_translation_invariant(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random(12, 3, &mut r);
        let b = random(15, 3, &mut r).map(|v| 1.5 * v + 0.2);
        let ab = frechet_gaussian(&a, &b).unwrap();
        prop_assert!((ab - frechet_gaussian(&b, &a).unwrap()).abs() < 1e-9);
        let fd_shift = frechet_gaussian(&a.map(|v| v + shift), &b.map(|v| v + shift)).unwrap();
        prop_assert!((ab - fd_shift).abs() < 1e-9);
        prop_assert!(frechet_gaussian(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn count_modes_permutation_and_union(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mk = |r: &mut ChaCha8Rng, n| Tensor::new([n, 2], (0..2 * n).map(|_| r.gen_range(-5.0..105.0)).collect()).unwrap();
        let a = mk(&mut r, 30);
        let b = mk(&mut r, 20);
        let rev: Vec<usize> = (0..30).rev().collect();
        prop_assert_eq!(count_modes(&a).unwrap(), count_modes(&a.select_rows(&rev)).unwrap());
        let union = Tensor::stack_rows(&[&a, &b]).unwrap();
        prop_assert!(count_modes(&union).unwrap() >= count_modes(&a).unwrap().max(count_modes(&b).unwrap()));
    }

    #[test]
    fn pairwise_scales_linearly(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let sets: Vec<Tensor> = (0..3).map(|_| random(5, 2, &mut r)).collect();
        let scaled: Vec<Tensor> = sets.iter().map(|s| s.map(|v| c * v)).collect();
        let base = mean_pairwise_distance(&sets).unwrap();
        prop_assert!((mean_pairwise_distance(&scaled).unwrap() - c * base).abs() < 1e-9 * (1.0 + c * base));
    }
}
