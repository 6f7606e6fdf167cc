//! Simulated annealing over an inverse-temperature ladder for the
//! wedge-restricted partition function, and the density ratio built on it.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::instance::SkInstance;
use crate::oracle::{log_add_exp, restricted_product_log_z, Oracle, Wedge};
use crate::rng::{derive_seed, substream, tags};
use crate::tap::{tap_log_partition, Magnetization};
use crate::walk::{walk_step, Target, WalkState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealConfig {
    /// Number of ladder points `M + 1`; `None` means `4n + 1`.
    pub ladder_len: Option<usize>,
    /// Chains (one sample each) per rung.
    pub samples_per_rung: usize,
    pub repeats: usize,
    /// Walk steps per chain at every rung.
    pub walk_steps: usize,
    /// Extra steps at the first rung, from the wedge center.
    pub burn_in_steps: usize,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            ladder_len: None,
            samples_per_rung: 64,
            repeats: 3,
            walk_steps: 20,
            burn_in_steps: 100,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_rung == 0 || self.repeats == 0 {
            return Err(invalid("annealing needs at least one sample and one repeat"));
        }
        if self.ladder_len == Some(0) {
            return Err(invalid("ladder must have at least one point"));
        }
        Ok(())
    }

    pub fn ladder(&self, n: usize, beta: f64) -> Vec<f64> {
        ladder(self.ladder_len.unwrap_or(4 * n + 1), beta)
    }
}

/// `beta_l = (l - 1) beta / (len - 1)` for `l = 1..=len`.
pub fn ladder(len: usize, beta: f64) -> Vec<f64> {
    if len <= 1 || beta == 0.0 {
        return vec![beta];
    }
    let m = (len - 1) as f64;
    (0..len).map(|l| l as f64 * beta / m).collect()
}

/// Median, averaging the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Per-rung statistics of one repeat.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatTrace {
    /// `log Z_hat_l` for `l = 1..=M+1`.
    pub log_z: Vec<f64>,
    /// `log Y_hat_l` for `l = 1..=M`.
    pub log_y: Vec<f64>,
    /// Empirical `Var(g) / mean(g)^2` per rung.
    pub var_ratio: Vec<f64>,
    pub min_log_g: Vec<f64>,
    pub max_log_g: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RungDiagnostics {
    pub beta: f64,
    pub median_log_z: f64,
    pub median_log_y: f64,
    pub max_var_ratio: f64,
    pub min_log_g: f64,
    pub max_log_g: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnealEstimate {
    pub log_z: f64,
    pub base_log_z: f64,
    pub per_repeat: Vec<f64>,
    pub rungs: Vec<RungDiagnostics>,
    pub wall_time_secs: f64,
}

impl AnnealEstimate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One telescoping pass. `quad(l, beta_l)` returns `<s, A s>` for the
/// samples drawn at rung `l`.
fn telescope(base: f64, ladder: &[f64], mut quad: impl FnMut(usize, f64) -> Result<Vec<f64>>) -> Result<RepeatTrace> {
    let m = ladder.len() - 1;
    let mut trace = RepeatTrace {
        log_z: vec![base],
        log_y: Vec::with_capacity(m),
        var_ratio: Vec::with_capacity(m),
        min_log_g: Vec::with_capacity(m),
        max_log_g: Vec::with_capacity(m),
    };
    for l in 0..m {
        let dbeta = ladder[l + 1] - ladder[l];
        let log_g: Vec<f64> = quad(l, ladder[l])?.into_iter().map(|q| 0.5 * dbeta * q).collect();
        let max = log_g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = log_g.iter().cloned().fold(f64::INFINITY, f64::min);
        let k = log_g.len() as f64;
        let shifted: Vec<f64> = log_g.iter().map(|v| (v - max).exp()).collect();
        let mean = shifted.iter().sum::<f64>() / k;
        let var = shifted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
        let log_y = max + mean.ln();
        trace.log_y.push(log_y);
        trace.var_ratio.push(var / (mean * mean));
        trace.min_log_g.push(min);
        trace.max_log_g.push(max);
        trace.log_z.push(trace.log_z[l] + log_y);
    }
    Ok(trace)
}

fn combine(base: f64, ladder: &[f64], traces: Vec<RepeatTrace>, started: Instant) -> AnnealEstimate {
    let m = ladder.len() - 1;
    let rungs = (0..m)
        .map(|l| {
            let col = |f: &dyn Fn(&RepeatTrace) -> f64| traces.iter().map(f).collect::<Vec<f64>>();
            RungDiagnostics {
                beta: ladder[l],
                median_log_z: median(&col(&|t| t.log_z[l + 1])),
                median_log_y: median(&col(&|t| t.log_y[l])),
                max_var_ratio: col(&|t| t.var_ratio[l]).into_iter().fold(0.0, f64::max),
                min_log_g: col(&|t| t.min_log_g[l]).into_iter().fold(f64::INFINITY, f64::min),
                max_log_g: col(&|t| t.max_log_g[l]).into_iter().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let per_repeat: Vec<f64> = traces.iter().map(|t| *t.log_z.last().unwrap()).collect();
    AnnealEstimate {
        log_z: median(&per_repeat),
        base_log_z: base,
        per_repeat,
        rungs,
        wall_time_secs: started.elapsed().as_secs_f64(),
    }
}

/// Annealed estimate of `log sum_{sigma in wedge} exp(beta/2 <s, A s> + <y, s>)`
/// with polarized-walk chains.
pub fn estimate_log_z(
    inst: &SkInstance,
    y: &DVector<f64>,
    wedge: &Wedge,
    cfg: &AnnealConfig,
    seed: u64,
) -> Result<AnnealEstimate> {
    cfg.validate()?;
    let started = Instant::now();
    let base = restricted_product_log_z(y, wedge)?;
    let ladder = cfg.ladder(inst.n(), inst.beta());
    let target = Target::from_instance(inst, y)?;
    let root = derive_seed(seed, tags::ANNEAL);
    let traces = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let repeat_seed = derive_seed(root, r as u64);
            let mut chains: Vec<(WalkState, _)> = (0..cfg.samples_per_rung)
                .map(|c| Ok((WalkState::at_center(&target, wedge)?, substream(repeat_seed, c as u64))))
                .collect::<Result<_>>()?;
            telescope(base, &ladder, |l, beta| {
                let rung = target.at_beta(beta);
                let steps = cfg.walk_steps + if l == 0 { cfg.burn_in_steps } else { 0 };
                Ok(chains
                    .iter_mut()
                    .map(|(state, rng)| {
                        state.retarget(&rung);
                        for _ in 0..steps {
                            walk_step(&rung, state, rng);
                        }
                        state.quadratic_form()
                    })
                    .collect())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(base, &ladder, traces, started))
}

/// The same telescoping estimator with exact samples from the restricted
/// Gibbs law at every rung (small `n` only).
pub fn estimate_log_z_exact_samples(
    inst: &SkInstance,
    y: &DVector<f64>,
    wedge: &Wedge,
    cfg: &AnnealConfig,
    oracle: &Oracle,
    seed: u64,
) -> Result<AnnealEstimate> {
    cfg.validate()?;
    let started = Instant::now();
    let base = restricted_product_log_z(y, wedge)?;
    let ladder = cfg.ladder(inst.n(), inst.beta());
    let tables = ladder[..ladder.len() - 1]
        .iter()
        .map(|&b| oracle.table_at(inst, b, y, Some(wedge)))
        .collect::<Result<Vec<_>>>()?;
    let root = derive_seed(seed, tags::ANNEAL);
    let a = inst.couplings();
    let traces = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(root, r as u64);
            telescope(base, &ladder, |l, _| {
                Ok((0..cfg.samples_per_rung)
                    .map(|_| {
                        let s = tables[l].sample(&mut rng).to_f64();
                        s.dot(&(a * &s))
                    })
                    .collect())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(base, &ladder, traces, started))
}

/// `log R2 = log Z_hat(y) - tap_log_partition(m_tap, y)`.
pub fn log_density_ratio(inst: &SkInstance, y: &DVector<f64>, m_tap: &Magnetization, log_z_hat: f64) -> Result<f64> {
    Ok(log_z_hat - tap_log_partition(inst, m_tap, y)?)
}

/// Annealed `Z_hat / exp(tap_log_partition(m_tap, y))`, exponentiated last.
pub fn density_ratio(
    inst: &SkInstance,
    y: &DVector<f64>,
    m_tap: &Magnetization,
    wedge: &Wedge,
    cfg: &AnnealConfig,
    seed: u64,
) -> Result<f64> {
    let est = estimate_log_z(inst, y, wedge, cfg, seed)?;
    Ok(log_density_ratio(inst, y, m_tap, est.log_z)?.exp())
}

/// Log-mean-exp of a sample of log values.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let total = values.iter().fold(f64::NEG_INFINITY, |acc, &v| log_add_exp(acc, v));
    total - (values.len() as f64).ln()
}

/// Random tilt helper used by tests and diagnostics: `y = t * sigma + sqrt(t) * z`.
pub fn planted_tilt<R: Rng + ?Sized>(sigma: &[f64], t: f64, rng: &mut R) -> DVector<f64> {
    let z = crate::rng::gaussian_vector(rng, sigma.len());
    DVector::from_fn(sigma.len(), |i, _| t * sigma[i] + t.sqrt() * z[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::SpinConfig;
    use crate::solver::{solve_tap, SolverConfig};

    fn cfg(n_samples: usize, repeats: usize) -> AnnealConfig {
        AnnealConfig {
            ladder_len: None,
            samples_per_rung: n_samples,
            repeats,
            walk_steps: 10,
            burn_in_steps: 100,
        }
    }

    #[test]
    fn ladder_shape() {
        let l = ladder(5, 0.4);
        assert_eq!(l, vec![0.0, 0.1, 0.2, 0.30000000000000004, 0.4]);
        assert_eq!(ladder(41, 0.0), vec![0.0]);
        assert_eq!(AnnealConfig { ladder_len: None, ..cfg(1, 1) }.ladder(10, 0.3).len(), 41);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn beta_zero_returns_base() {
        let inst = SkInstance::generate(6, 0.0, 1).unwrap();
        let y = DVector::from_fn(6, |i, _| 0.3 * i as f64 - 0.8);
        let wedge = Wedge::new(SpinConfig::sign_of(y.as_slice()), 2).unwrap();
        let est = estimate_log_z(&inst, &y, &wedge, &cfg(5, 3), 1).unwrap();
        assert_eq!(est.log_z, restricted_product_log_z(&y, &wedge).unwrap());
        assert!(est.rungs.is_empty());
    }

    #[test]
    fn walk_estimate_close_to_exact() {
        let inst = SkInstance::generate(8, 0.3, 2).unwrap();
        let y = DVector::from_fn(8, |i, _| (i as f64 * 1.3).cos());
        let wedge = Wedge::new(SpinConfig::sign_of(y.as_slice()), 3).unwrap();
        let est = estimate_log_z(&inst, &y, &wedge, &cfg(400, 5), 7).unwrap();
        let exact = Oracle::default().log_partition(&inst, &y, Some(&wedge)).unwrap();
        assert!((est.log_z - exact).abs() < 0.1, "{} vs {exact}", est.log_z);
        assert!(est.rungs.iter().all(|r| r.median_log_z.is_finite()));
        assert!(est.to_json().unwrap().contains("median_log_y"));
    }

    #[test]
    fn exact_sample_telescoping_is_unbiased() {
        let inst = SkInstance::generate(6, 0.4, 3).unwrap();
        let y = DVector::from_fn(6, |i, _| 0.5 * (i as f64).sin());
        let wedge = Wedge::new(SpinConfig::sign_of(y.as_slice()), 6).unwrap();
        let c = AnnealConfig {
            ladder_len: Some(9),
            ..cfg(4000, 3)
        };
        let est = estimate_log_z_exact_samples(&inst, &y, &wedge, &c, &Oracle::default(), 1).unwrap();
        let exact = Oracle::default().log_partition(&inst, &y, None).unwrap();
        assert!((est.log_z - exact).abs() < 0.02);
    }

    #[test]
    fn density_ratio_is_one_at_beta_zero_without_restriction() {
        let inst = SkInstance::generate(5, 0.0, 4).unwrap();
        let y = DVector::from_fn(5, |i, _| 0.4 * i as f64 - 1.0);
        let wedge = Wedge::new(SpinConfig::sign_of(y.as_slice()), 5).unwrap();
        let m = solve_tap(&inst, &y, &SolverConfig::default()).unwrap().m;
        let r = density_ratio(&inst, &y, &m, &wedge, &cfg(2, 1), 1).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "{r}");
    }

    #[test]
    fn log_ratio_cancels_constants() {
        let inst = SkInstance::generate(4, 0.2, 5).unwrap();
        let y = DVector::from_fn(4, |i, _| 0.2 * i as f64);
        let m = solve_tap(&inst, &y, &SolverConfig::default()).unwrap().m;
        let a = log_density_ratio(&inst, &y, &m, 1.5).unwrap();
        let b = log_density_ratio(&inst, &y, &m, 1.5 + 7.0).unwrap();
        assert!((b - a - 7.0).abs() < 1e-12);
    }

    #[test]
    fn log_mean_exp_values() {
        assert!((log_mean_exp(&[0.0, 0.0]) - 0.0).abs() < 1e-15);
        assert!((log_mean_exp(&[1000.0, 1000.0 + 2f64.ln()]) - (1000.0 + 1.5f64.ln())).abs() < 1e-12);
    }
}
