//! Mirror descent in the dual coordinates `x = atanh(m)` for the TAP
//! stationarity equation `grad_m F_TAP(m, y) = 0`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::instance::SkInstance;
use crate::tap::{Magnetization, MAX_DUAL};

/// Window (in iterations) over which the contraction factor is measured.
pub const CONTRACTION_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Step size, at most 1/4.
    pub step: f64,
    /// Iteration cap; `None` picks `max(1000, ceil(40/gamma * ln(n/tol)))`.
    pub max_iters: Option<usize>,
    /// Sup-norm tolerance on the gradient residual.
    pub tol: f64,
    /// Initial dual point; `None` starts from `x = y`.
    #[serde(skip)]
    pub warm_start: Option<DVector<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step: 0.25,
            max_iters: None,
            tol: 1e-10,
            warm_start: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= 0.25) {
            return Err(invalid(format!("solver step {} is outside (0, 1/4]", self.step)));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("solver tolerance must be positive"));
        }
        Ok(())
    }

    pub fn iteration_cap(&self, inst: &SkInstance) -> usize {
        self.max_iters.unwrap_or_else(|| default_max_iters(inst.n(), inst.gamma(), self.tol))
    }
}

pub fn default_max_iters(n: usize, gamma: f64, tol: f64) -> usize {
    let bound = (40.0 / gamma * (n as f64 / tol).ln()).ceil();
    if bound.is_finite() && bound > 1000.0 {
        bound as usize
    } else {
        1000
    }
}

#[derive(Debug, Clone)]
pub struct SolverResult {
    pub m: Magnetization,
    pub iters: usize,
    /// `||grad F_TAP(m, y)||_inf` at the returned point.
    pub residual: f64,
    pub converged: bool,
    /// Geometric mean per-iteration ratio of `g^T diag(1 - m^2) g` over the
    /// last [`CONTRACTION_WINDOW`] iterations, when that many were run.
    pub contraction: Option<f64>,
}

/// Runs `x <- x - step * grad F_TAP(tanh x, y)` until the residual falls
/// below `tol` or the iteration cap is hit.
pub fn solve_tap(inst: &SkInstance, y: &DVector<f64>, cfg: &SolverConfig) -> Result<SolverResult> {
    let x0 = cfg.warm_start.clone().unwrap_or_else(|| y.clone());
    solve_from(inst, y, x0, cfg)
}

/// As [`solve_tap`] with an explicit starting point (overrides `warm_start`).
pub fn solve_from(inst: &SkInstance, y: &DVector<f64>, mut x: DVector<f64>, cfg: &SolverConfig) -> Result<SolverResult> {
    cfg.validate()?;
    let n = inst.n();
    if y.len() != n || x.len() != n {
        return Err(invalid("solver input dimensions do not match the instance"));
    }
    let mut m = DVector::zeros(n);
    let mut g = DVector::zeros(n);
    let out = mirror_descent(inst, y, &mut x, &mut m, &mut g, cfg, cfg.iteration_cap(inst))?;
    Ok(SolverResult {
        m: Magnetization::from_dual(x)?,
        iters: out.iters,
        residual: out.residual,
        converged: out.residual <= cfg.tol,
        contraction: out.contraction,
    })
}

pub(crate) struct DescentOutcome {
    pub iters: usize,
    pub residual: f64,
    pub contraction: Option<f64>,
}

/// In-place mirror descent on `x`; leaves `m = tanh(x)` and the final gradient in `g`.
pub(crate) fn mirror_descent(
    inst: &SkInstance,
    y: &DVector<f64>,
    x: &mut DVector<f64>,
    m: &mut DVector<f64>,
    g: &mut DVector<f64>,
    cfg: &SolverConfig,
    cap: usize,
) -> Result<DescentOutcome> {
    check_range(x)?;
    let n = x.len();
    let beta = inst.beta();
    let a = inst.couplings().as_slice();
    let (x, m, g, y) = (x.as_mut_slice(), m.as_mut_slice(), g.as_mut_slice(), y.as_slice());
    for (mi, xi) in m.iter_mut().zip(x.iter()) {
        *mi = xi.tanh();
    }
    let mut window = [0.0_f64; CONTRACTION_WINDOW + 1];
    let mut recorded = 0usize;
    let mut iters = 0;
    let residual = loop {
        let q: f64 = m.iter().map(|v| v * v).sum();
        let c = beta * beta * (1.0 - q / n as f64);
        let mut residual = 0.0_f64;
        let mut s = 0.0;
        for i in 0..n {
            // column i of the symmetric coupling matrix is row i
            let col = &a[i * n..(i + 1) * n];
            let am: f64 = col.iter().zip(m.iter()).map(|(aij, mj)| aij * mj).sum();
            let gi = -beta * am + c * m[i] + x[i] - y[i];
            g[i] = gi;
            residual = residual.max(gi.abs());
            s += gi * gi * (1.0 - m[i] * m[i]);
        }
        if !residual.is_finite() {
            return Err(Error::Overflow {
                index: g.iter().position(|v| !v.is_finite()).unwrap_or(0),
                value: residual,
            });
        }
        window[recorded % (CONTRACTION_WINDOW + 1)] = s;
        recorded += 1;
        if residual <= cfg.tol || iters >= cap {
            break residual;
        }
        for i in 0..n {
            let xi = x[i] - cfg.step * g[i];
            if !(xi.abs() <= MAX_DUAL) {
                return Err(Error::Overflow { index: i, value: xi });
            }
            x[i] = xi;
            m[i] = xi.tanh();
        }
        iters += 1;
    };
    let contraction = if recorded > CONTRACTION_WINDOW {
        let last = window[(recorded - 1) % (CONTRACTION_WINDOW + 1)];
        let first = window[recorded % (CONTRACTION_WINDOW + 1)];
        (first > 0.0).then(|| (last / first).powf(1.0 / CONTRACTION_WINDOW as f64))
    } else {
        None
    };
    Ok(DescentOutcome {
        iters,
        residual,
        contraction,
    })
}

fn check_range(x: &DVector<f64>) -> Result<()> {
    match x.iter().enumerate().find(|(_, v)| !(v.abs() <= MAX_DUAL)) {
        Some((index, &value)) => Err(Error::Overflow { index, value }),
        None => Ok(()),
    }
}
