//! Euler-Maruyama discretization of the algorithmic stochastic localization
//! process: the tilt SDE, a dual predictor for the TAP magnetization, a
//! mirror-descent corrector, and the Jarzynski log-weight.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::instance::SkInstance;
use crate::oracle::Oracle;
use crate::rng::{gaussian_vector, substream};
use crate::solver::{mirror_descent, SolverConfig};
use crate::tap::Magnetization;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub step: usize,
    pub t: f64,
    pub y: DVector<f64>,
    /// Dual coordinates, `m = tanh(x)`.
    pub x: DVector<f64>,
    pub m: DVector<f64>,
    /// Accumulated Jarzynski log-weight.
    pub w: f64,
}

impl TrajectoryState {
    pub fn initial(n: usize) -> Self {
        Self {
            step: 0,
            t: 0.0,
            y: DVector::zeros(n),
            x: DVector::zeros(n),
            m: DVector::zeros(n),
            w: 0.0,
        }
    }

    pub fn magnetization(&self) -> Result<Magnetization> {
        Magnetization::from_dual(self.x.clone())
    }

    /// `1 - max_i |m_i|`.
    pub fn min_gap(&self) -> f64 {
        let xmax = self.x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        2.0 / (1.0 + (2.0 * xmax).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Time horizon `T`.
    pub horizon: f64,
    /// Step size; `horizon / eta` must be an integer.
    pub eta: f64,
    pub solver: SolverConfig,
    pub noise_seed: u64,
}

impl DynamicsConfig {
    /// Config whose step is `horizon / ceil(horizon / eta_max)`.
    pub fn fitted(horizon: f64, eta_max: f64, solver: SolverConfig, noise_seed: u64) -> Result<Self> {
        if !(horizon >= 0.0 && eta_max > 0.0) {
            return Err(invalid("horizon must be non-negative and eta positive"));
        }
        let steps = (horizon / eta_max).ceil().max(1.0);
        Ok(Self {
            horizon,
            eta: if horizon == 0.0 { eta_max } else { horizon / steps },
            solver,
            noise_seed,
        })
    }

    pub fn steps(&self) -> Result<usize> {
        if !(self.eta > 0.0) || !(self.horizon >= 0.0) {
            return Err(invalid("eta must be positive and the horizon non-negative"));
        }
        let k = (self.horizon / self.eta).round();
        if (k * self.eta - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(invalid(format!(
                "horizon {} is not an integer multiple of eta {}",
                self.horizon, self.eta
            )));
        }
        Ok(k as usize)
    }
}

/// Step size from the discretization bound with `L = 2 / gamma`:
/// `min(eps^2 / (2 n T L^2), sqrt(3/2) eps / (sqrt(T) L sqrt(n)))`.
pub fn default_eta(n: usize, horizon: f64, gamma: f64, eps_disc: f64) -> f64 {
    let l = 2.0 / gamma;
    let n = n as f64;
    let a = eps_disc * eps_disc / (2.0 * n * horizon * l * l);
    let b = 1.5f64.sqrt() * eps_disc / (horizon.sqrt() * l * n.sqrt());
    a.min(b)
}

/// `ceil(2 log(2 e^2 / eps))`, after which the wedge holds the target.
pub fn default_horizon(eps_target: f64) -> f64 {
    (2.0 * (2.0 * std::f64::consts::E.powi(2) / eps_target).ln()).ceil()
}

/// Per-step bookkeeping reported alongside the new state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub solver_iters: usize,
    pub residual: f64,
}

/// Reusable buffers for stepping one instance.
pub struct Integrator<'a> {
    inst: &'a SkInstance,
    solver: SolverConfig,
    cap: usize,
    q: DMatrix<f64>,
    work: DMatrix<f64>,
    d: DVector<f64>,
    diag_q2: DVector<f64>,
    a: DVector<f64>,
    b: DVector<f64>,
    g: DVector<f64>,
    y_next: DVector<f64>,
    x_next: DVector<f64>,
    m_next: DVector<f64>,
}

impl<'a> Integrator<'a> {
    pub fn new(inst: &'a SkInstance, solver: SolverConfig) -> Result<Self> {
        solver.validate()?;
        let n = inst.n();
        Ok(Self {
            inst,
            cap: solver.iteration_cap(inst),
            solver,
            q: DMatrix::zeros(n, n),
            work: DMatrix::zeros(n, n),
            d: DVector::zeros(n),
            diag_q2: DVector::zeros(n),
            a: DVector::zeros(n),
            b: DVector::zeros(n),
            g: DVector::zeros(n),
            y_next: DVector::zeros(n),
            x_next: DVector::zeros(n),
            m_next: DVector::zeros(n),
        })
    }

    /// Writes `Q_hat(m)` into `self.q` and `D(m)` into `self.d`; returns
    /// `(Tr Q, Tr Q^2)`.
    fn resolvent(&mut self, x: &DVector<f64>, m: &DVector<f64>) -> Result<(f64, f64)> {
        let inst = self.inst;
        let n = inst.n();
        let beta = inst.beta();
        let shift = beta * beta * (1.0 - m.norm_squared() / n as f64);
        let r1 = -2.0 * beta * beta / n as f64;
        for (di, xi) in self.d.iter_mut().zip(x.iter()) {
            let c = xi.cosh();
            *di = c * c;
        }
        let a = inst.couplings();
        for j in 0..n {
            for i in j..n {
                let mut v = -beta * a[(i, j)] + r1 * m[i] * m[j];
                if i == j {
                    v += self.d[i] + shift;
                }
                self.q[(i, j)] = v;
            }
        }
        if !spd_inverse_lower(&mut self.q, &mut self.work) {
            let mag = Magnetization::from_dual(x.clone())?;
            let h = crate::tap::tap_hessian(inst, &mag)?;
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::EigenSolver);
            }
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: h.symmetric_eigenvalues().min(),
            });
        }
        let mut trace_q = 0.0;
        for i in 0..n {
            trace_q += self.q[(i, i)];
            self.diag_q2[i] = self.q.column(i).norm_squared();
        }
        Ok((trace_q, self.diag_q2.sum()))
    }

    /// One step of the scheme, in place.
    pub fn step(&mut self, state: &mut TrajectoryState, eta: f64, xi: &DVector<f64>) -> Result<StepInfo> {
        let n = self.inst.n();
        if xi.len() != n || state.y.len() != n {
            return Err(invalid("noise or state dimension does not match the instance"));
        }
        let abort = |reason: String, state: &TrajectoryState| Error::TrajectoryAborted {
            step: state.step,
            reason,
            state: Box::new(state.clone()),
        };
        let beta = self.inst.beta();
        let (trace_q, trace_q2) = self
            .resolvent(&state.x, &state.m)
            .map_err(|e| abort(e.to_string(), state))?;
        let m = &state.m;
        let sq = eta.sqrt();

        // a = Q m, b = Q^2 m, then a <- m - f(m)
        self.a.gemv(1.0, &self.q, m, 0.0);
        self.b.gemv(1.0, &self.q, &self.a, 0.0);
        let c = beta * beta / n as f64;
        for i in 0..n {
            let d2 = self.d[i] * self.d[i];
            let f = self.diag_q2[i] * d2 * m[i] - c * (trace_q2 * m[i] + 2.0 * self.b[i]);
            self.a[i] = m[i] - f;
        }
        // b = Q (m - f), g = Q xi
        self.b.gemv(1.0, &self.q, &self.a, 0.0);
        self.g.gemv(1.0, &self.q, xi, 0.0);
        for i in 0..n {
            let d = self.d[i];
            let drift = d * self.b[i] + self.diag_q2[i] * d * d * m[i];
            self.x_next[i] = state.x[i] + eta * drift + sq * d * self.g[i];
            self.y_next[i] = state.y[i] + eta * m[i] + sq * xi[i];
        }
        let w_next = state.w + 0.5 * eta * (trace_q + m.norm_squared());

        let outcome = mirror_descent(
            self.inst,
            &self.y_next,
            &mut self.x_next,
            &mut self.m_next,
            &mut self.g,
            &self.solver,
            self.cap,
        )
        .map_err(|e| abort(e.to_string(), state))?;
        if outcome.residual > self.solver.tol {
            return Err(abort(
                format!(
                    "corrector did not converge in {} iterations (residual {:.3e})",
                    outcome.iters, outcome.residual
                ),
                state,
            ));
        }
        if !w_next.is_finite() {
            return Err(abort("log-weight is not finite".into(), state));
        }
        if self.x_next.iter().any(|v| v.cosh().is_infinite()) {
            return Err(abort("magnetization reached the boundary of the cube".into(), state));
        }
        std::mem::swap(&mut state.y, &mut self.y_next);
        std::mem::swap(&mut state.x, &mut self.x_next);
        std::mem::swap(&mut state.m, &mut self.m_next);
        state.w = w_next;
        state.step += 1;
        state.t += eta;
        Ok(StepInfo {
            solver_iters: outcome.iters,
            residual: outcome.residual,
        })
    }
}

/// In-place SPD inverse: reads the lower triangle of `a`, writes the full
/// inverse back into `a`. Returns false if `a` is not positive definite.
fn spd_inverse_lower(a: &mut DMatrix<f64>, work: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    // Cholesky: lower triangle of a becomes L.
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = v / d;
        }
    }
    // work = L^{-1} (lower triangular).
    work.fill(0.0);
    for j in 0..n {
        work[(j, j)] = 1.0 / a[(j, j)];
        for i in (j + 1)..n {
            let mut s = 0.0;
            for k in j..i {
                s -= a[(i, k)] * work[(k, j)];
            }
            work[(i, j)] = s / a[(i, i)];
        }
    }
    // a = L^{-T} L^{-1}
    for j in 0..n {
        for i in j..n {
            let mut s = 0.0;
            for k in i..n {
                s += work[(k, i)] * work[(k, j)];
            }
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
    true
}

/// One step from a borrowed state; allocates its own workspace.
pub fn step(
    inst: &SkInstance,
    state: &TrajectoryState,
    eta: f64,
    xi: &DVector<f64>,
    solver: &SolverConfig,
) -> Result<(TrajectoryState, StepInfo)> {
    let mut next = state.clone();
    let info = Integrator::new(inst, solver.clone())?.step(&mut next, eta, xi)?;
    Ok((next, info))
}

/// The Gaussian increment used at step `k` of a trajectory with `noise_seed`.
pub fn step_noise(noise_seed: u64, k: usize, n: usize) -> DVector<f64> {
    gaussian_vector(&mut substream(noise_seed, k as u64), n)
}

/// Runs the scheme from `(y, x, m, w) = 0` to the horizon, calling
/// `observe` after every step.
pub fn run_trajectory_with(
    inst: &SkInstance,
    cfg: &DynamicsConfig,
    mut observe: impl FnMut(&TrajectoryState, &StepInfo),
) -> Result<TrajectoryState> {
    let steps = cfg.steps()?;
    let n = inst.n();
    let mut integrator = Integrator::new(inst, cfg.solver.clone())?;
    let mut state = TrajectoryState::initial(n);
    for k in 0..steps {
        let xi = step_noise(cfg.noise_seed, k, n);
        let info = integrator.step(&mut state, cfg.eta, &xi)?;
        observe(&state, &info);
    }
    state.t = cfg.horizon;
    Ok(state)
}

pub fn run_trajectory(inst: &SkInstance, cfg: &DynamicsConfig) -> Result<TrajectoryState> {
    run_trajectory_with(inst, cfg, |_, _| {})
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub w: f64,
    pub y_norm: f64,
    pub m_norm: f64,
    pub min_gap: f64,
    pub solver_iters: usize,
}

impl TrajectoryRow {
    pub fn from_state(state: &TrajectoryState, solver_iters: usize) -> Self {
        Self {
            step: state.step,
            t: state.t,
            w: state.w,
            y_norm: state.y.norm(),
            m_norm: state.m.norm(),
            min_gap: state.min_gap(),
            solver_iters,
        }
    }
}

/// Runs a trajectory and keeps one row per step (including the start).
pub fn record_trajectory(inst: &SkInstance, cfg: &DynamicsConfig) -> Result<(TrajectoryState, Vec<TrajectoryRow>)> {
    let mut rows = vec![TrajectoryRow::from_state(&TrajectoryState::initial(inst.n()), 0)];
    let end = run_trajectory_with(inst, cfg, |s, info| rows.push(TrajectoryRow::from_state(s, info.solver_iters)))?;
    Ok((end, rows))
}

pub fn write_trajectory_csv<W: Write>(mut out: W, rows: &[TrajectoryRow]) -> Result<()> {
    writeln!(out, "step,t,w,y_norm,m_norm,min_gap,solver_iters")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:e},{}",
            r.step, r.t, r.w, r.y_norm, r.m_norm, r.min_gap, r.solver_iters
        )?;
    }
    Ok(())
}

/// A point of the exact stochastic localization path.
#[derive(Debug, Clone)]
pub struct IdealPoint {
    pub t: f64,
    pub y: DVector<f64>,
    pub m: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Euler-Maruyama for `dy = <sigma>_y dt + dB` with the exact Gibbs mean,
/// driven by the same per-step noise as [`run_trajectory`].
pub fn ideal_sl_trajectory(inst: &SkInstance, cfg: &DynamicsConfig, oracle: &Oracle) -> Result<Vec<IdealPoint>> {
    let steps = cfg.steps()?;
    let n = inst.n();
    let mut y = DVector::zeros(n);
    let mut path = Vec::with_capacity(steps + 1);
    let sq = cfg.eta.sqrt();
    for k in 0..=steps {
        let s = oracle.summary(inst, &y, None)?;
        path.push(IdealPoint {
            t: k as f64 * cfg.eta,
            y: y.clone(),
            m: s.magnetization.clone(),
            covariance: s.covariance,
        });
        if k == steps {
            break;
        }
        let xi = step_noise(cfg.noise_seed, k, n);
        y += cfg.eta * s.magnetization + sq * xi;
    }
    Ok(path)
}

/// The endpoint of [`ideal_sl_trajectory`], computing the covariance only
/// at the horizon.
pub fn ideal_sl_terminal(inst: &SkInstance, cfg: &DynamicsConfig, oracle: &Oracle) -> Result<IdealPoint> {
    let steps = cfg.steps()?;
    let n = inst.n();
    let mut y = DVector::zeros(n);
    let sq = cfg.eta.sqrt();
    for k in 0..steps {
        let (_, m) = oracle.magnetization(inst, &y, None)?;
        let xi = step_noise(cfg.noise_seed, k, n);
        y += cfg.eta * m + sq * xi;
    }
    let s = oracle.summary(inst, &y, None)?;
    Ok(IdealPoint {
        t: steps as f64 * cfg.eta,
        y,
        m: s.magnetization,
        covariance: s.covariance,
    })
}
