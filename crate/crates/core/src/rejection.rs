//! Approximate rejection sampling with an unknown normalizing constant: a
//! quantile of calibration weights sets the scale `R0`, then proposals are
//! accepted with probability `min(1, weight / (C3 R0))`.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RejectionConfig {
    /// Quantile parameter `C1 >= 1`; `None` estimates it from the draws.
    pub c1: Option<f64>,
    /// Tail parameter `C2 >= 1`; `None` uses `C1`.
    pub c2: Option<f64>,
    /// Calibration draws; `None` uses the minimum required count.
    pub calibration_draws: Option<usize>,
    /// Failure probability `delta'` of the calibration step.
    pub failure_prob: f64,
    /// Constant `C_cal` in `N_cal >= C_cal C1^2 ln(1/delta')`.
    pub c_cal: f64,
    /// Attempts per sample before reporting starvation.
    pub max_attempts: usize,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            c1: None,
            c2: None,
            calibration_draws: None,
            failure_prob: 0.05,
            c_cal: 64.0,
            max_attempts: 100_000,
        }
    }
}

/// Floor applied to the data-driven `C1`.
pub const AUTO_C1_FLOOR: f64 = 2.0;

impl RejectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2)] {
            if let Some(v) = v {
                if !(v >= 1.0) {
                    return Err(invalid(format!("{name} = {v} must be at least 1")));
                }
            }
        }
        if !(self.failure_prob > 0.0 && self.failure_prob < 1.0) {
            return Err(invalid("failure_prob must lie in (0, 1)"));
        }
        if !(self.c_cal > 0.0) || self.max_attempts == 0 {
            return Err(invalid("c_cal and max_attempts must be positive"));
        }
        Ok(())
    }

    /// `ceil(C_cal C1^2 ln(1/delta'))`.
    pub fn required_draws(&self, c1: f64) -> usize {
        (self.c_cal * c1 * c1 * (1.0 / self.failure_prob).ln()).ceil() as usize
    }

    /// Draws to take before `C1` is known.
    pub fn initial_draws(&self) -> usize {
        let c1 = self.c1.unwrap_or(AUTO_C1_FLOOR);
        self.calibration_draws.unwrap_or(0).max(self.required_draws(c1))
    }
}

/// A weighted proposal: terminal tilt, TAP magnetization and log weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub y: DVector<f64>,
    pub m: DVector<f64>,
    pub log_weight: f64,
}

/// Lower-nearest order statistic: element `floor(p (N - 1))` of the sorted values.
pub fn lower_quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("quantile of an empty list"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(invalid("quantile input contains NaN"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((p.clamp(0.0, 1.0) * (v.len() - 1) as f64).floor() as usize).min(v.len() - 1);
    Ok(v[idx])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Quantile level `1 - 1/(6 C1)`.
    pub p: f64,
    pub log_r0: f64,
    pub draws: usize,
}

impl Calibration {
    /// `log(C3 R0)`.
    pub fn log_threshold(&self) -> f64 {
        self.c3.ln() + self.log_r0
    }

    /// Acceptance probability of a proposal with this log weight.
    pub fn acceptance_probability(&self, log_weight: f64) -> f64 {
        (log_weight - self.log_threshold()).min(0.0).exp()
    }
}

/// `C1 = max(2, q_0.995 / median)` over the calibration weights.
pub fn auto_c1(log_weights: &[f64]) -> Result<f64> {
    let hi = lower_quantile(log_weights, 0.995)?;
    let mid = lower_quantile(log_weights, 0.5)?;
    Ok((hi - mid).exp().max(AUTO_C1_FLOOR))
}

/// Resolves `C1`, `C2`, `C3 = 8 C2` and `R0` from calibration log weights.
pub fn calibrate_log_weights(log_weights: &[f64], cfg: &RejectionConfig) -> Result<Calibration> {
    cfg.validate()?;
    if let Some(v) = log_weights.iter().find(|v| !v.is_finite()) {
        return Err(invalid(format!("calibration log weight {v} is not finite")));
    }
    let c1 = match cfg.c1 {
        Some(c) => c,
        None => auto_c1(log_weights)?,
    };
    let c2 = cfg.c2.unwrap_or(c1);
    let need = cfg.required_draws(c1).max(cfg.calibration_draws.unwrap_or(0));
    if log_weights.len() < need {
        return Err(invalid(format!(
            "calibration needs {need} draws for C1 = {c1:.3}, got {}",
            log_weights.len()
        )));
    }
    let p = 1.0 - 1.0 / (6.0 * c1);
    Ok(Calibration {
        c1,
        c2,
        c3: 8.0 * c2,
        p,
        log_r0: lower_quantile(log_weights, p)?,
        draws: log_weights.len(),
    })
}

pub fn calibrate(draws: &[WeightedSample], cfg: &RejectionConfig) -> Result<Calibration> {
    let lw: Vec<f64> = draws.iter().map(|d| d.log_weight).collect();
    calibrate_log_weights(&lw, cfg)
}

/// Draws calibration log weights from `draw(i)` until the count meets the
/// requirement implied by the current `C1`, then calibrates.
pub fn calibrate_adaptive(mut draw: impl FnMut(usize) -> Result<f64>, cfg: &RejectionConfig) -> Result<(Calibration, Vec<f64>)> {
    cfg.validate()?;
    let mut lw = Vec::new();
    let mut need = cfg.initial_draws();
    loop {
        while lw.len() < need {
            lw.push(draw(lw.len())?);
        }
        let c1 = match cfg.c1 {
            Some(c) => c,
            None => auto_c1(&lw)?,
        };
        let more = cfg.required_draws(c1).max(cfg.calibration_draws.unwrap_or(0));
        if more <= lw.len() {
            return Ok((calibrate_log_weights(&lw, cfg)?, lw));
        }
        need = more;
    }
}

/// Running counts and a log-spaced weight histogram.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceTelemetry {
    pub attempts: usize,
    pub accepts: usize,
    /// Counts per unit bin of `log_weight - log R0`, from `HIST_MIN`.
    pub weight_histogram: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
}

pub const HIST_MIN: f64 = -10.0;
pub const HIST_BINS: usize = 20;

impl AcceptanceTelemetry {
    pub fn new() -> Self {
        Self {
            weight_histogram: vec![0; HIST_BINS],
            ..Self::default()
        }
    }

    pub fn record(&mut self, log_weight: f64, log_r0: f64) {
        if self.weight_histogram.len() != HIST_BINS {
            self.weight_histogram = vec![0; HIST_BINS];
        }
        let b = (log_weight - log_r0 - HIST_MIN).floor();
        if b < 0.0 || b.is_nan() {
            self.underflow += 1;
        } else if b as usize >= HIST_BINS {
            self.overflow += 1;
        } else {
            self.weight_histogram[b as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &AcceptanceTelemetry) {
        if self.weight_histogram.len() != HIST_BINS {
            self.weight_histogram = vec![0; HIST_BINS];
        }
        self.attempts += other.attempts;
        self.accepts += other.accepts;
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        for (a, b) in self.weight_histogram.iter_mut().zip(&other.weight_histogram) {
            *a += b;
        }
    }

    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepts as f64 / self.attempts as f64
        }
    }
}

/// Draws from `source(attempt)` until one is accepted.
pub fn accept_loop<T, R: Rng + ?Sized>(
    mut source: impl FnMut(usize) -> Result<T>,
    log_weight: impl Fn(&T) -> f64,
    calibration: &Calibration,
    rng: &mut R,
    max_attempts: usize,
    telemetry: &mut AcceptanceTelemetry,
) -> Result<T> {
    let threshold = calibration.log_threshold();
    let start_attempts = telemetry.attempts;
    let start_accepts = telemetry.accepts;
    for attempt in 0..max_attempts {
        let x = source(attempt)?;
        let lw = log_weight(&x);
        telemetry.attempts += 1;
        telemetry.record(lw, calibration.log_r0);
        let u: f64 = rng.gen();
        if u.ln() <= lw - threshold {
            telemetry.accepts += 1;
            return Ok(x);
        }
    }
    let attempts = telemetry.attempts - start_attempts;
    let accepts = telemetry.accepts - start_accepts;
    Err(Error::AcceptanceStarvation {
        attempts,
        accepts,
        rate: accepts as f64 / attempts.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand_distr::{Distribution, StandardNormal};

    fn fixed(c1: f64, c2: f64) -> RejectionConfig {
        RejectionConfig {
            c1: Some(c1),
            c2: Some(c2),
            calibration_draws: Some(1),
            c_cal: 1e-9,
            ..RejectionConfig::default()
        }
    }

    #[test]
    fn quantile_conventions() {
        let v: Vec<f64> = (1..=6).map(|i| i as f64).collect();
        assert_eq!(lower_quantile(&v, 1.0 - 1.0 / 6.0).unwrap(), 5.0);
        let logs: Vec<f64> = v.iter().map(|x| x.ln()).collect();
        let cal = calibrate_log_weights(&logs, &fixed(1.0, 1.0)).unwrap();
        assert!((cal.log_r0.exp() - 5.0).abs() < 1e-12);
        assert_eq!(cal.c3, 8.0);
        let same = vec![3f64.ln(); 10];
        assert!((calibrate_log_weights(&same, &fixed(2.0, 1.0)).unwrap().log_r0.exp() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn required_draws_and_shortfall() {
        let cfg = RejectionConfig::default();
        assert_eq!(cfg.required_draws(2.0), (64.0 * 4.0 * 20f64.ln()).ceil() as usize);
        let err = calibrate_log_weights(&[0.0; 10], &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn auto_constants() {
        let cfg = RejectionConfig::default();
        let lw = vec![0.0; cfg.required_draws(2.0)];
        let cal = calibrate_log_weights(&lw, &cfg).unwrap();
        assert_eq!(cal.c1, 2.0);
        assert_eq!(cal.c2, 2.0);
        assert_eq!(cal.c3, 16.0);
    }

    #[test]
    fn weight_at_threshold_always_accepts() {
        let cal = calibrate_log_weights(&[0.0], &fixed(1.0, 1.0)).unwrap();
        let mut rng = substream(1, 0);
        let mut tel = AcceptanceTelemetry::new();
        for _ in 0..1000 {
            let lw = cal.log_threshold();
            accept_loop(|_| Ok(lw), |&w| w, &cal, &mut rng, 1, &mut tel).unwrap();
        }
        assert_eq!(tel.attempts, 1000);
        assert_eq!(cal.acceptance_probability(cal.log_threshold() + 5.0), 1.0);
    }

    #[test]
    fn half_weight_needs_two_attempts_on_average() {
        let cal = calibrate_log_weights(&[0.0], &fixed(1.0, 1.0)).unwrap();
        let lw = cal.log_threshold() - 2f64.ln();
        let mut rng = substream(2, 0);
        let mut tel = AcceptanceTelemetry::new();
        let runs = 100_000;
        for _ in 0..runs {
            accept_loop(|_| Ok(lw), |&w| w, &cal, &mut rng, 1000, &mut tel).unwrap();
        }
        let mean = tel.attempts as f64 / runs as f64;
        assert!((1.9..=2.1).contains(&mean), "{mean}");
    }

    #[test]
    fn starvation_is_reported() {
        let cal = calibrate_log_weights(&[0.0], &fixed(1.0, 1.0)).unwrap();
        let mut tel = AcceptanceTelemetry::new();
        let err = accept_loop(|_| Ok(-1e6), |&w| w, &cal, &mut substream(3, 0), 50, &mut tel).unwrap_err();
        match err {
            Error::AcceptanceStarvation { attempts, accepts, .. } => assert_eq!((attempts, accepts), (50, 0)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn exact_weights_recover_target_gaussian() {
        // Q = N(0, 1), P = N(1, 1), dP/dQ(x) = exp(x - 1/2).
        let mut rng = substream(4, 0);
        let lw = |x: &f64| x - 0.5;
        let cfg = RejectionConfig::default();
        let (cal, _) = calibrate_adaptive(|_| Ok(lw(&StandardNormal.sample(&mut rng))), &cfg).unwrap();
        let mut tel = AcceptanceTelemetry::new();
        let mut src = substream(4, 1);
        let mut u = substream(4, 2);
        let bins = 40;
        let (lo, hi) = (-3.0, 5.0);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins + 2];
        let total = 100_000;
        for _ in 0..total {
            let x: f64 = accept_loop(|_| Ok(StandardNormal.sample(&mut src)), lw, &cal, &mut u, 100_000, &mut tel).unwrap();
            let b = if x < lo { 0 } else if x >= hi { bins + 1 } else { 1 + ((x - lo) / width) as usize };
            counts[b] += 1;
        }
        let phi = |z: f64| 0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2);
        let mut tv = 0.0;
        for (b, &count) in counts.iter().enumerate() {
            let (a, c) = match b {
                0 => (f64::NEG_INFINITY, lo),
                b if b == bins + 1 => (hi, f64::INFINITY),
                b => (lo + (b - 1) as f64 * width, lo + b as f64 * width),
            };
            let p = phi(c - 1.0) - phi(a - 1.0);
            tv += (count as f64 / total as f64 - p).abs();
        }
        assert!(0.5 * tv <= 0.02, "tv {}", 0.5 * tv);
        assert!(tel.rate() >= 1.0 / (192.0 * cal.c1 * cal.c2));
    }

    #[test]
    fn larger_threshold_never_raises_acceptance() {
        let a = calibrate_log_weights(&[0.0], &fixed(1.0, 1.0)).unwrap();
        let b = calibrate_log_weights(&[0.0], &fixed(1.0, 3.0)).unwrap();
        for lw in [-5.0, -1.0, 0.0, 1.0, 3.0, 10.0] {
            assert!(b.acceptance_probability(lw) <= a.acceptance_probability(lw));
        }
    }

    #[test]
    fn histogram_bins() {
        let mut t = AcceptanceTelemetry::new();
        t.record(0.5, 0.0);
        t.record(-20.0, 0.0);
        t.record(20.0, 0.0);
        assert_eq!(t.weight_histogram[10], 1);
        assert_eq!((t.underflow, t.overflow), (1, 1));
    }
}
