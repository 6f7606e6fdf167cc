//! Monte-Carlo probes of the quantities the sampler's analysis controls:
//! covariance and magnetization error of the TAP estimates along exact
//! localization paths, diagonal control of the resolvent, wedge
//! concentration and the coupled distance between exact and algorithmic
//! dynamics.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::{ideal_sl_terminal, run_trajectory, DynamicsConfig};
use crate::error::{invalid, Result};
use crate::instance::SkInstance;
use crate::oracle::Oracle;
use crate::rng::{derive_seed, substream};
use crate::solver::{solve_tap, SolverConfig};
use crate::tap::{delta_diag, normalized_schatten2, tap_hessian, Magnetization};

/// Mean and standard error of a per-trial statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
    pub config_hash: String,
    pub values: Vec<f64>,
}

impl Statistic {
    pub fn from_values(name: &str, values: Vec<f64>, params: &impl Serialize) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("a statistic needs at least one trial"));
        }
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let stderr = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            name: name.to_string(),
            mean,
            stderr,
            trials: values.len(),
            config_hash: params_hash(name, params)?,
            values,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One line per trial: `trial,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# config_hash={}", self.config_hash)?;
        writeln!(out, "trial,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{i},{v:e}")?;
        }
        Ok(())
    }
}

fn params_hash(name: &str, params: &impl Serialize) -> Result<String> {
    let text = serde_json::to_string(&(name, params))?;
    Ok(format!("{:x}", Sha256::digest(text.as_bytes())))
}

/// Parameters shared by the path-based probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub n: usize,
    pub beta: f64,
    pub instance_seed: Option<u64>,
    pub t: f64,
    pub eta: f64,
    pub trajectories: usize,
    pub seed: u64,
}

impl PathParams {
    fn new(inst: &SkInstance, t: f64, eta: f64, trajectories: usize, seed: u64) -> Result<Self> {
        if trajectories == 0 {
            return Err(invalid("need at least one trajectory"));
        }
        Ok(Self {
            n: inst.n(),
            beta: inst.beta(),
            instance_seed: inst.seed(),
            t,
            eta,
            trajectories,
            seed,
        })
    }

    fn dynamics(&self, trajectory: usize, solver: &SolverConfig) -> Result<DynamicsConfig> {
        DynamicsConfig::fitted(self.t, self.eta, solver.clone(), derive_seed(self.seed, trajectory as u64))
    }
}

/// A GOE instance on the spectral event, from the first of
/// `derive_seed(seed, 0), derive_seed(seed, 1), ...` that satisfies it.
pub fn conditioned_instance(n: usize, beta: f64, seed: u64) -> Result<SkInstance> {
    for k in 0..1000 {
        let inst = SkInstance::generate(n, beta, derive_seed(seed, k))?;
        if inst.check_spectral_event()? {
            return Ok(inst);
        }
    }
    Err(invalid(format!("no instance on the spectral event for n = {n}, beta = {beta}")))
}

fn frobenius_error(inst: &SkInstance, m: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let h = tap_hessian(inst, &Magnetization::from_values(m.clone())?)?;
    let e = h * cov - DMatrix::identity(inst.n(), inst.n());
    Ok(e.norm_squared())
}

/// Per-trajectory values of `||Q_hat(m_t)^{-1} Q_exact - I||_F^2`, with `m_t`
/// and `Q_exact` the exact mean and covariance at the end of an Euler path
/// of exact localization to time `t`.
pub fn covariance_frobenius_values(
    inst: &SkInstance,
    t: f64,
    eta: f64,
    trajectories: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let p = PathParams::new(inst, t, eta, trajectories, seed)?;
    let oracle = Oracle::default();
    let solver = SolverConfig::default();
    (0..trajectories)
        .into_par_iter()
        .map(|k| {
            let end = ideal_sl_terminal(inst, &p.dynamics(k, &solver)?, &oracle)?;
            frobenius_error(inst, &end.m, &end.covariance)
        })
        .collect()
}

pub fn covariance_frobenius_stat(inst: &SkInstance, t: f64, eta: f64, trajectories: usize, seed: u64) -> Result<Statistic> {
    let values = covariance_frobenius_values(inst, t, eta, trajectories, seed)?;
    Statistic::from_values("covariance_frobenius", values, &PathParams::new(inst, t, eta, trajectories, seed)?)
}

/// Per-trajectory `||m_hat(y_t) - m_t||^2` along exact localization paths.
pub fn magnetization_error_values(
    inst: &SkInstance,
    t: f64,
    eta: f64,
    trajectories: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let p = PathParams::new(inst, t, eta, trajectories, seed)?;
    let oracle = Oracle::default();
    let solver = SolverConfig::default();
    (0..trajectories)
        .into_par_iter()
        .map(|k| {
            let end = ideal_sl_terminal(inst, &p.dynamics(k, &solver)?, &oracle)?;
            let tap = solve_tap(inst, &end.y, &solver)?;
            Ok((tap.m.values() - &end.m).norm_squared())
        })
        .collect()
}

pub fn magnetization_error_stat(inst: &SkInstance, t: f64, eta: f64, trajectories: usize, seed: u64) -> Result<Statistic> {
    let values = magnetization_error_values(inst, t, eta, trajectories, seed)?;
    Statistic::from_values("magnetization_error", values, &PathParams::new(inst, t, eta, trajectories, seed)?)
}

/// Per-trajectory `||y_hat_T - y_T||^2 + ||m_hat_T - m_T||^2` between the
/// algorithmic scheme and exact localization driven by the same noise.
pub fn coupled_wasserstein_values(
    inst: &SkInstance,
    horizon: f64,
    eta: f64,
    trajectories: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let p = PathParams::new(inst, horizon, eta, trajectories, seed)?;
    let oracle = Oracle::default();
    let solver = SolverConfig::default();
    (0..trajectories)
        .into_par_iter()
        .map(|k| {
            let cfg = p.dynamics(k, &solver)?;
            let exact = ideal_sl_terminal(inst, &cfg, &oracle)?;
            let alg = run_trajectory(inst, &cfg)?;
            Ok((&alg.y - &exact.y).norm_squared() + (&alg.m - &exact.m).norm_squared())
        })
        .collect()
}

pub fn coupled_wasserstein_stat(inst: &SkInstance, horizon: f64, eta: f64, trajectories: usize, seed: u64) -> Result<Statistic> {
    let values = coupled_wasserstein_values(inst, horizon, eta, trajectories, seed)?;
    Statistic::from_values("coupled_wasserstein", values, &PathParams::new(inst, horizon, eta, trajectories, seed)?)
}

/// Parameters for a probe repeated over independent disorders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    pub n: usize,
    pub beta: f64,
    pub t: f64,
    pub eta: f64,
    pub disorders: usize,
    pub trajectories: usize,
    pub seed: u64,
}

/// Pools the per-trajectory values of `probe` over `disorders` instances
/// drawn on the spectral event.
pub fn ensemble_stat(
    name: &str,
    p: &EnsembleParams,
    probe: impl Fn(&SkInstance, f64, f64, usize, u64) -> Result<Vec<f64>> + Sync,
) -> Result<Statistic> {
    if p.disorders == 0 {
        return Err(invalid("need at least one disorder"));
    }
    let per: Vec<Vec<f64>> = (0..p.disorders)
        .into_par_iter()
        .map(|d| {
            let dseed = derive_seed(p.seed, d as u64);
            let inst = conditioned_instance(p.n, p.beta, dseed)?;
            probe(&inst, p.t, p.eta, p.trajectories, derive_seed(dseed, 1))
        })
        .collect::<Result<_>>()?;
    Statistic::from_values(name, per.concat(), p)
}

/// Sign disagreement of `y_T = T x0 + B_T` with `x0`, against `Phi(-sqrt T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WedgeReport {
    pub horizon: f64,
    pub coordinates: usize,
    pub disagreements: usize,
    pub rate: f64,
    pub predicted: f64,
    pub relative_error: f64,
    pub config_hash: String,
}

impl WedgeReport {
    pub fn within(&self, rel: f64) -> bool {
        self.relative_error <= rel
    }
}

/// `trials` independent draws of an `n`-coordinate tilt at time `horizon`,
/// each around its own random sign vector `x0`.
pub fn wedge_concentration_stat(horizon: f64, n: usize, trials: usize, seed: u64) -> Result<WedgeReport> {
    if !(horizon >= 0.0) || n == 0 || trials == 0 {
        return Err(invalid("wedge probe needs T >= 0 and a positive number of coordinates"));
    }
    let sd = horizon.sqrt();
    let disagreements: usize = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, k as u64);
            let x0: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let z = crate::rng::gaussian_vector(&mut rng, n);
            x0.iter()
                .zip(z.iter())
                .filter(|(&x, &zi)| {
                    let y = horizon * x + sd * zi;
                    // sign(0) = +1
                    (if y < 0.0 { -1.0 } else { 1.0 }) != x
                })
                .count()
        })
        .sum();
    let coordinates = n * trials;
    let rate = disagreements as f64 / coordinates as f64;
    let predicted = if horizon == 0.0 {
        0.5
    } else {
        Normal::new(0.0, 1.0).expect("unit normal").cdf(-sd)
    };
    Ok(WedgeReport {
        horizon,
        coordinates,
        disagreements,
        rate,
        predicted,
        relative_error: (rate - predicted).abs() / predicted,
        config_hash: params_hash("wedge_concentration", &(horizon, n, trials, seed))?,
    })
}

/// Normalized Schatten-2 norm of `delta_diag` at one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaDiagPoint {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

/// `delta_diag` norms at magnetizations with i.i.d. uniform coordinates on
/// `[-m_scale, m_scale]`, over instances on the spectral event.
pub fn delta_diag_scaling(ns: &[usize], beta: f64, m_scale: f64, trials: usize, seed: u64) -> Result<Vec<DeltaDiagPoint>> {
    if !(0.0..1.0).contains(&m_scale) || trials == 0 {
        return Err(invalid("m_scale must lie in [0, 1) and trials be positive"));
    }
    ns.iter()
        .map(|&n| {
            let values = (0..trials)
                .map(|k| {
                    let s = derive_seed(derive_seed(seed, n as u64), k as u64);
                    let inst = conditioned_instance(n, beta, s)?;
                    let mut rng = substream(s, 1);
                    let m = DVector::from_fn(n, |_, _| m_scale * (2.0 * rng.gen::<f64>() - 1.0));
                    let m = Magnetization::from_values(m)?;
                    Ok(normalized_schatten2(&delta_diag(&inst, &m)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let st = Statistic::from_values("delta_diag", values, &(n, beta, m_scale, trials, seed))?;
            Ok(DeltaDiagPoint {
                n,
                mean: st.mean,
                stderr: st.stderr,
                trials,
            })
        })
        .collect()
}

/// Ratios of successive means, `mean(n_k) / mean(n_{k+1})`.
pub fn successive_ratios(points: &[DeltaDiagPoint]) -> Vec<f64> {
    points.windows(2).map(|w| w[0].mean / w[1].mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistic_mean_and_stderr() {
        let s = Statistic::from_values("x", vec![1.0, 2.0, 3.0, 4.0], &1).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.trials, 4);
        assert_ne!(s.config_hash, Statistic::from_values("x", vec![1.0], &2).unwrap().config_hash);
        assert!(Statistic::from_values("x", vec![], &1).is_err());
    }

    #[test]
    fn beta_zero_covariance_is_exact() {
        let inst = SkInstance::generate(6, 0.0, 1).unwrap();
        let s = covariance_frobenius_stat(&inst, 1.0, 0.1, 4, 2).unwrap();
        assert!(s.mean < 1e-20, "{}", s.mean);
    }

    #[test]
    fn zero_time_is_deterministic() {
        let inst = SkInstance::generate(6, 0.3, 1).unwrap();
        let a = covariance_frobenius_values(&inst, 0.0, 0.1, 3, 2).unwrap();
        let b = covariance_frobenius_values(&inst, 0.0, 0.1, 3, 9).unwrap();
        assert!(a.iter().chain(&b).all(|&v| v == a[0]));
        let e = Oracle::default().summary(&inst, &DVector::zeros(6), None).unwrap();
        assert_eq!(a[0], frobenius_error(&inst, &e.magnetization, &e.covariance).unwrap());
    }

    #[test]
    fn magnetization_error_vanishes_at_beta_zero() {
        let inst = SkInstance::generate(6, 0.0, 3).unwrap();
        let s = magnetization_error_stat(&inst, 1.0, 0.1, 4, 5).unwrap();
        assert!(s.mean < 1e-18, "{}", s.mean);
    }

    #[test]
    fn coupled_distance_vanishes_at_beta_zero() {
        let inst = SkInstance::generate(5, 0.0, 3).unwrap();
        let s = coupled_wasserstein_stat(&inst, 1.0, 0.05, 4, 5).unwrap();
        assert!(s.mean < 1e-16, "{}", s.mean);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let inst = SkInstance::generate(6, 0.3, 1).unwrap();
        let a = magnetization_error_stat(&inst, 0.5, 0.1, 3, 8).unwrap();
        let b = magnetization_error_stat(&inst, 0.5, 0.1, 3, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wedge_rates() {
        let r0 = wedge_concentration_stat(0.0, 100, 100, 1).unwrap();
        assert_eq!(r0.predicted, 0.5);
        assert!(r0.within(0.1));
        let r4 = wedge_concentration_stat(4.0, 1000, 100, 1).unwrap();
        assert!((r4.predicted - 0.022750131948179).abs() < 1e-10);
        assert!(r4.within(0.1), "{r4:?}");
        let r9 = wedge_concentration_stat(9.0, 1000, 100, 1).unwrap();
        assert!((r9.predicted - 1.349898031630e-3).abs() < 1e-10);
    }

    #[test]
    fn conditioned_instances_satisfy_the_event() {
        let inst = conditioned_instance(30, 0.3, 4).unwrap();
        assert!(inst.check_spectral_event().unwrap());
    }
}
