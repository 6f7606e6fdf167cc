//! SK disorder instances: GOE couplings, the inverse temperature, and the
//! spectral-gap event that the sampler's guarantees are conditioned on.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::substream;

/// Symmetric GOE matrix: off-diagonal variance 1/n, diagonal variance 2/n.
///
/// Entries are drawn row by row over the upper triangle from stream 0 of
/// `seed`, so the matrix for a given `(n, seed)` never changes.
pub fn sample_goe(n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(invalid("GOE dimension must be at least 1"));
    }
    let mut rng = substream(seed, 0);
    let off = (1.0 / n as f64).sqrt();
    let diag = (2.0 / n as f64).sqrt();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let z: f64 = rng.sample(StandardNormal);
            let v = if i == j { diag * z } else { off * z };
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok(a)
}

/// One disorder realization at a fixed inverse temperature.
#[derive(Debug, Clone)]
pub struct SkInstance {
    beta: f64,
    gamma: f64,
    seed: Option<u64>,
    couplings: DMatrix<f64>,
}

impl SkInstance {
    /// Wraps an explicit coupling matrix. `beta` must lie in `[0, 1/2)`.
    pub fn new(couplings: DMatrix<f64>, beta: f64, seed: Option<u64>) -> Result<Self> {
        let n = couplings.nrows();
        if n == 0 || couplings.ncols() != n {
            return Err(invalid("coupling matrix must be square and non-empty"));
        }
        if !(0.0..0.5).contains(&beta) {
            return Err(invalid(format!("beta = {beta} is outside [0, 1/2)")));
        }
        for i in 0..n {
            for j in 0..i {
                if couplings[(i, j)] != couplings[(j, i)] {
                    return Err(invalid(format!("coupling matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        if couplings.iter().any(|v| !v.is_finite()) {
            return Err(invalid("coupling matrix has non-finite entries"));
        }
        Ok(Self {
            beta,
            gamma: (1.0 - 2.0 * beta) / 2.0,
            seed,
            couplings,
        })
    }

    /// A fresh GOE instance for `(n, seed)`.
    pub fn generate(n: usize, beta: f64, seed: u64) -> Result<Self> {
        Self::new(sample_goe(n, seed)?, beta, Some(seed))
    }

    /// Same couplings at another inverse temperature.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.couplings.clone(), beta, self.seed)
    }

    pub fn n(&self) -> usize {
        self.couplings.nrows()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Spectral gap parameter `(1 - 2 beta) / 2`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn couplings(&self) -> &DMatrix<f64> {
        &self.couplings
    }

    /// Largest absolute eigenvalue of the coupling matrix.
    pub fn operator_norm(&self) -> Result<f64> {
        symmetric_operator_norm(&self.couplings)
    }

    /// Whether `beta * ||A||_op <= 1 - gamma`.
    pub fn check_spectral_event(&self) -> Result<bool> {
        Ok(spectral_event_holds(self.beta, self.gamma, self.operator_norm()?))
    }

    pub fn to_file_repr(&self) -> InstanceFile {
        let n = self.n();
        let mut upper = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                upper.push(self.couplings[(i, j)]);
            }
        }
        InstanceFile {
            format: INSTANCE_FORMAT.to_string(),
            n,
            beta: self.beta,
            seed: self.seed,
            upper,
        }
    }

    pub fn from_file_repr(file: &InstanceFile) -> Result<Self> {
        if file.format != INSTANCE_FORMAT {
            return Err(invalid(format!("unknown instance format {:?}", file.format)));
        }
        let n = file.n;
        if file.upper.len() != n * (n + 1) / 2 {
            return Err(invalid(format!(
                "instance with n = {n} needs {} upper-triangle entries, found {}",
                n * (n + 1) / 2,
                file.upper.len()
            )));
        }
        let mut a = DMatrix::zeros(n, n);
        let mut it = file.upper.iter();
        for i in 0..n {
            for j in i..n {
                let v = *it.next().unwrap();
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        Self::new(a, file.beta, file.seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.to_file_repr())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: InstanceFile = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_file_repr(&file)
    }
}

pub(crate) fn spectral_event_holds(beta: f64, gamma: f64, op_norm: f64) -> bool {
    beta * op_norm <= 1.0 - gamma
}

pub(crate) fn symmetric_operator_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenSolver);
    }
    let eig = m.symmetric_eigenvalues();
    Ok(eig.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())))
}

pub const INSTANCE_FORMAT: &str = "skloc-instance/1";

/// On-disk instance: the upper triangle of `A` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub format: String,
    pub n: usize,
    pub beta: f64,
    pub seed: Option<u64>,
    pub upper: Vec<f64>,
}
