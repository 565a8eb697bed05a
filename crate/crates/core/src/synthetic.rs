//! Two-dimensional star benchmark.
//!
//! Conditions are drawn uniformly from `[0, 100]^2` and mapped by a
//! discontinuous function onto a four-armed star inside the same square.
//! The arm index depends on a coarse grid cell of the condition, the
//! position along and across the arm on finer modular coordinates.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{format_err, Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const LOW: f64 = 0.0;
pub const HIGH: f64 = 100.0;
pub const CENTER: [f64; 2] = [50.0, 50.0];
pub const ARM_LENGTH: f64 = 45.0;
pub const ARM_WIDTH: f64 = 10.0;
pub const DEFAULT_M: usize = 400;

/// Data units per network unit. Networks see centred coordinates in
/// `[-25, 25]`: a spectrally normalized critic is 1-Lipschitz in its input,
/// so squeezing the square into `[-1, 1]` leaves it too flat to separate
/// nearby modes.
pub const UNIT_SCALE: f64 = 2.0;

/// Network-side coordinates: data units centred on the square.
pub fn to_unit(v: f64) -> f64 {
    (v - CENTER[0]) / UNIT_SCALE
}

pub fn from_unit(u: f64) -> f64 {
    u * UNIT_SCALE + CENTER[0]
}

/// Arm index in `0..4` for a condition.
pub fn arm_index(c: [f64; 2]) -> usize {
    let gx = (c[0] / 20.0).floor() as i64;
    let gy = (c[1] / 20.0).floor() as i64;
    (gx + 3 * gy).rem_euclid(4) as usize
}

pub fn star_map(c: [f64; 2]) -> Result<[f64; 2]> {
    if !c.iter().all(|v| (LOW..=HIGH).contains(v)) {
        return Err(Error::invalid(format!("condition {c:?} outside [0, 100]^2")));
    }
    let k = arm_index(c);
    let t = (c[0] + c[1]).rem_euclid(40.0) / 40.0;
    let w = (c[0] - c[1]).rem_euclid(20.0) / 20.0 - 0.5;
    let theta = FRAC_PI_4 + k as f64 * FRAC_PI_2;
    let (lx, ly) = (ARM_LENGTH * t.powf(1.5), ARM_WIDTH * w * (1.0 - t));
    let (s, co) = theta.sin_cos();
    let x = CENTER[0] + co * lx - s * ly;
    let y = CENTER[1] + s * lx + co * ly;
    Ok([x.clamp(LOW, HIGH), y.clamp(LOW, HIGH)])
}

pub fn sample_conditions(m: usize, seed: u64) -> Result<Tensor> {
    if m == 0 {
        return Err(Error::invalid("sample_conditions needs m >= 1"));
    }
    let mut rng = stream(seed, Purpose::Data, 0);
    let data = (0..2 * m).map(|_| rng.gen_range(LOW..=HIGH)).collect();
    Tensor::new([m, 2], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StarDataset {
    /// `[m, 2]`, data units.
    pub conditions: Tensor,
    /// `[m, 2]`, data units.
    pub targets: Tensor,
    pub seed: u64,
}

impl StarDataset {
    pub fn len(&self) -> usize {
        self.conditions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Conditions and targets rescaled to network units.
    pub fn unit_conditions(&self) -> Tensor {
        self.conditions.map(to_unit)
    }

    pub fn unit_targets(&self) -> Tensor {
        self.targets.map(to_unit)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cx,cy,tx,ty\n");
        for i in 0..self.len() {
            let (c, t) = (self.conditions.row(i), self.targets.row(i));
            writeln!(out, "{:.6},{:.6},{:.6},{:.6}", c[0], c[1], t[0], t[1]).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Reads a `cx,cy,tx,ty` file. The seed is unknown and set to 0.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("cx,cy,tx,ty") {
            return Err(format_err(path, "expected header `cx,cy,tx,ty`"));
        }
        let (mut cond, mut targ) = (Vec::new(), Vec::new());
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format_err(path, format!("line {}: {e}", n + 2)))?;
            if vals.len() != 4 || !vals.iter().all(|v| v.is_finite()) {
                return Err(format_err(path, format!("line {}: expected 4 finite fields", n + 2)));
            }
            cond.extend_from_slice(&vals[..2]);
            targ.extend_from_slice(&vals[2..]);
        }
        if cond.is_empty() {
            return Err(format_err(path, "no rows"));
        }
        let m = cond.len() / 2;
        Ok(Self {
            conditions: Tensor::new([m, 2], cond)?,
            targets: Tensor::new([m, 2], targ)?,
            seed: 0,
        })
    }
}

pub fn make_star_dataset(m: usize, seed: u64) -> Result<StarDataset> {
    let conditions = sample_conditions(m, seed)?;
    let mut targets = Vec::with_capacity(2 * m);
    for i in 0..m {
        let c = conditions.row(i);
        targets.extend(star_map([c[0], c[1]])?);
    }
    Ok(StarDataset {
        targets: Tensor::new([m, 2], targets)?,
        conditions,
        seed,
    })
}

/// Seed of the test split paired with a training seed.
pub fn test_seed(train_seed: u64) -> u64 {
    train_seed ^ 0x7e57_0000_0000_0000
}

/// Train and test sets of `m` points each from distinct seeds.
pub fn make_star_split(m: usize, seed: u64) -> Result<(StarDataset, StarDataset)> {
    Ok((make_star_dataset(m, seed)?, make_star_dataset(m, test_seed(seed))?))
}
