//! The polarized down-up walk on subsets of flipped coordinates, restricted
//! to a Hamming wedge around a center `x0`.
//!
//! A subset `S` stands for `x0` with the coordinates in `S` negated. One step
//! is a down move (drop a uniform coordinate if it is in `S`, otherwise stay)
//! followed by an up move that stays with weight `(n - |T|) mu(T)` or adds a
//! coordinate `i` with weight `mu(T + i)`, additions beyond radius `k` having
//! weight zero. The chain is reversible for the wedge-restricted Gibbs law.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::instance::SkInstance;
use crate::oracle::{SpinConfig, Wedge};
use crate::rng::substream;

/// Flips between full recomputations of the cached field.
pub const REFRESH_INTERVAL: usize = 4096;
/// Cache drift beyond which a warning is logged.
pub const DRIFT_TOLERANCE: f64 = 1e-6;

/// Unnormalized target `exp(beta/2 <s, A s> + <y, s>)`.
#[derive(Debug, Clone)]
pub struct Target<'a> {
    couplings: &'a DMatrix<f64>,
    diag: Vec<f64>,
    beta: f64,
    field: &'a [f64],
}

impl<'a> Target<'a> {
    pub fn new(couplings: &'a DMatrix<f64>, beta: f64, field: &'a [f64]) -> Result<Self> {
        let n = couplings.nrows();
        if couplings.ncols() != n || field.len() != n {
            return Err(invalid("target dimensions do not agree"));
        }
        Ok(Self {
            couplings,
            diag: (0..n).map(|i| couplings[(i, i)]).collect(),
            beta,
            field,
        })
    }

    pub fn from_instance(inst: &'a SkInstance, y: &'a DVector<f64>) -> Result<Self> {
        Self::new(inst.couplings(), inst.beta(), y.as_slice())
    }

    /// The same couplings and field at another inverse temperature.
    pub fn at_beta(&self, beta: f64) -> Self {
        Self {
            beta,
            ..self.clone()
        }
    }

    pub fn n(&self) -> usize {
        self.field.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn log_weight(&self, sigma: &[f64]) -> f64 {
        crate::oracle::energy_and_field(self.couplings, self.beta, self.field, sigma).0
    }
}

/// A chain position: the flipped set, the spins, the local field `A sigma`
/// and the log weight of the current configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkState {
    center: Vec<f64>,
    radius: usize,
    sigma: Vec<f64>,
    flipped: Vec<bool>,
    size: usize,
    local_field: Vec<f64>,
    logw: f64,
    flips_since_refresh: usize,
}

impl WalkState {
    pub fn new(target: &Target, wedge: &Wedge, start: &SpinConfig) -> Result<Self> {
        let n = target.n();
        if wedge.n() != n || start.len() != n {
            return Err(invalid("walk dimensions do not agree"));
        }
        if !wedge.contains(start) {
            return Err(Error::OutsideWedge(start.to_string()));
        }
        let center: Vec<f64> = wedge.center().spins().iter().map(|&s| s as f64).collect();
        let sigma: Vec<f64> = start.spins().iter().map(|&s| s as f64).collect();
        let flipped: Vec<bool> = sigma.iter().zip(&center).map(|(a, b)| a != b).collect();
        let (logw, local_field) =
            crate::oracle::energy_and_field(target.couplings, target.beta, target.field, &sigma);
        Ok(Self {
            size: flipped.iter().filter(|&&f| f).count(),
            center,
            radius: wedge.radius(),
            sigma,
            flipped,
            local_field,
            logw,
            flips_since_refresh: 0,
        })
    }

    /// State at the wedge center.
    pub fn at_center(target: &Target, wedge: &Wedge) -> Result<Self> {
        Self::new(target, wedge, wedge.center())
    }

    pub fn n(&self) -> usize {
        self.sigma.len()
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn config(&self) -> SpinConfig {
        SpinConfig::new(self.sigma.iter().map(|&s| if s > 0.0 { 1 } else { -1 }).collect())
            .expect("spins are ±1")
    }

    pub fn spins(&self) -> &[f64] {
        &self.sigma
    }

    pub fn flipped_set(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.flipped[i]).collect()
    }

    /// Bit mask of the flipped set.
    pub fn flipped_mask(&self) -> u64 {
        self.flipped_set().iter().fold(0, |acc, &i| acc | 1 << i)
    }

    pub fn flipped_count(&self) -> usize {
        self.size
    }

    /// Cached `beta/2 <s, A s> + <y, s>`.
    pub fn log_weight(&self) -> f64 {
        self.logw
    }

    /// `<s, A s>` from the cached field.
    pub fn quadratic_form(&self) -> f64 {
        self.sigma.iter().zip(&self.local_field).map(|(s, h)| s * h).sum()
    }

    /// Change in log weight from flipping coordinate `i`.
    #[inline]
    fn flip_delta(&self, target: &Target, i: usize) -> f64 {
        let s = self.sigma[i];
        target.beta * (-2.0 * s * self.local_field[i] + 2.0 * target.diag[i]) - 2.0 * s * target.field[i]
    }

    fn flip(&mut self, target: &Target, i: usize) {
        let s = self.sigma[i];
        self.logw += self.flip_delta(target, i);
        let col = target.couplings.column(i);
        for (h, &a) in self.local_field.iter_mut().zip(col.iter()) {
            *h -= 2.0 * s * a;
        }
        self.sigma[i] = -s;
        if self.flipped[i] {
            self.flipped[i] = false;
            self.size -= 1;
        } else {
            self.flipped[i] = true;
            self.size += 1;
        }
        self.flips_since_refresh += 1;
    }

    /// Recomputes the field and log weight from scratch; returns the drift.
    pub fn refresh(&mut self, target: &Target) -> f64 {
        let (logw, field) = crate::oracle::energy_and_field(target.couplings, target.beta, target.field, &self.sigma);
        let drift = self
            .local_field
            .iter()
            .zip(&field)
            .fold((self.logw - logw).abs(), |acc, (a, b)| acc.max((a - b).abs()));
        self.logw = logw;
        self.local_field = field;
        self.flips_since_refresh = 0;
        drift
    }

    /// Rebinds the cached log weight to a target at another temperature.
    pub fn retarget(&mut self, target: &Target) {
        let lin: f64 = self.sigma.iter().zip(target.field).map(|(s, y)| s * y).sum();
        self.logw = 0.5 * target.beta * self.quadratic_form() + lin;
    }

    fn maybe_refresh(&mut self, target: &Target) {
        if self.flips_since_refresh >= REFRESH_INTERVAL {
            let drift = self.refresh(target);
            if drift > DRIFT_TOLERANCE {
                log::warn!("{}", Error::CacheDrift { drift });
            }
        }
    }

    /// Log weights (relative to `mu(T)`) of the up moves from this state:
    /// `(None, log(n - |T|))` for staying, `(Some(i), delta_i)` for adding `i`.
    pub fn up_moves(&self, target: &Target) -> Vec<(Option<usize>, f64)> {
        let mut out = Vec::with_capacity(self.n() + 1);
        self.for_each_up_move(target, |mv, lw| out.push((mv, lw)));
        out
    }

    fn for_each_up_move(&self, target: &Target, mut f: impl FnMut(Option<usize>, f64)) {
        let n = self.n();
        if self.size < n {
            f(None, ((n - self.size) as f64).ln());
        }
        if self.size < self.radius {
            for i in 0..n {
                if !self.flipped[i] {
                    f(Some(i), self.flip_delta(target, i));
                }
            }
        }
    }
}

/// Probability that the down move takes flipped set `s` to `t`
/// (given as sorted index lists).
pub fn down_probability(n: usize, s: &[usize], t: &[usize]) -> f64 {
    if s == t {
        (n - s.len()) as f64 / n as f64
    } else if t.len() + 1 == s.len() && t.iter().all(|i| s.contains(i)) {
        1.0 / n as f64
    } else {
        0.0
    }
}

/// Normalized up-move probabilities from `state`.
pub fn up_distribution(target: &Target, state: &WalkState) -> Vec<(Option<usize>, f64)> {
    let moves = state.up_moves(target);
    let max = moves.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = moves.iter().map(|m| (m.1 - max).exp()).sum();
    moves.into_iter().map(|(mv, lw)| (mv, (lw - max).exp() / total)).collect()
}

/// One down-up step.
pub fn walk_step<R: Rng + ?Sized>(target: &Target, state: &mut WalkState, rng: &mut R) {
    let n = state.n();
    let j = rng.gen_range(0..n);
    if state.flipped[j] {
        state.flip(target, j);
    }
    // Up move by inverse CDF over max-shifted weights.
    let mut max = f64::NEG_INFINITY;
    state.for_each_up_move(target, |_, lw| max = max.max(lw));
    let mut total = 0.0;
    state.for_each_up_move(target, |_, lw| total += (lw - max).exp());
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut chosen = None;
    let mut last = None;
    state.for_each_up_move(target, |mv, lw| {
        if chosen.is_none() {
            acc += (lw - max).exp();
            last = Some(mv);
            if u < acc {
                chosen = Some(mv);
            }
        }
    });
    if let Some(i) = chosen.or(last).flatten() {
        state.flip(target, i);
    }
    state.maybe_refresh(target);
}

/// `steps` walk steps from `start`, seeded.
pub fn run_walk(
    inst: &SkInstance,
    y: &DVector<f64>,
    wedge: &Wedge,
    start: &SpinConfig,
    steps: usize,
    seed: u64,
) -> Result<SpinConfig> {
    let target = Target::from_instance(inst, y)?;
    let mut state = WalkState::new(&target, wedge, start)?;
    let mut rng = substream(seed, 0);
    for _ in 0..steps {
        walk_step(&target, &mut state, &mut rng);
    }
    Ok(state.config())
}

/// `ceil(c_walk * n * ln(4n / eps^2))`.
pub fn default_walk_steps(n: usize, c_walk: f64, eps: f64) -> usize {
    let n = n as f64;
    (c_walk * n * (4.0 * n / (eps * eps)).ln()).ceil().max(1.0) as usize
}

/// `ceil(eps_wedge * n)`, clamped to `n`.
pub fn default_wedge_radius(n: usize, eps_wedge: f64) -> usize {
    ((eps_wedge * n as f64).ceil() as usize).min(n)
}

/// All flipped sets of size at most `k`, in order of size then lexicographic.
pub fn wedge_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn extend(n: usize, size: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            extend(n, size, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for size in 0..=k.min(n) {
        extend(n, size, 0, &mut Vec::new(), &mut out);
    }
    out
}

/// The explicit kernel over the wedge, with the restricted Gibbs law.
#[derive(Debug, Clone)]
pub struct WalkKernel {
    pub subsets: Vec<Vec<usize>>,
    /// Normalized restricted Gibbs probabilities, aligned with `subsets`.
    pub mu: Vec<f64>,
    pub down: DMatrix<f64>,
    pub up: DMatrix<f64>,
    pub transition: DMatrix<f64>,
}

pub const MAX_KERNEL_STATES: usize = 4096;

/// Builds `D`, `U` and `P = D U` from the same per-move probabilities the
/// sampler uses.
pub fn transition_kernel(target: &Target, wedge: &Wedge) -> Result<WalkKernel> {
    let n = target.n();
    let count = wedge.state_count();
    if count > MAX_KERNEL_STATES as u128 {
        return Err(Error::TooManyStates {
            count: count.min(usize::MAX as u128) as usize,
            cap: MAX_KERNEL_STATES,
        });
    }
    let subsets = wedge_subsets(n, wedge.radius());
    let index: HashMap<&[usize], usize> = subsets.iter().enumerate().map(|(i, s)| (s.as_slice(), i)).collect();
    let center = wedge.center();
    let states: Vec<WalkState> = subsets
        .iter()
        .map(|s| {
            let mut spins = center.spins().to_vec();
            for &i in s {
                spins[i] = -spins[i];
            }
            WalkState::new(target, wedge, &SpinConfig::new(spins)?)
        })
        .collect::<Result<_>>()?;
    let logw: Vec<f64> = states.iter().map(|s| s.log_weight()).collect();
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logw.iter().map(|l| (l - max).exp()).sum();
    let mu: Vec<f64> = logw.iter().map(|l| (l - max).exp() / total).collect();

    let m = subsets.len();
    let mut down = DMatrix::zeros(m, m);
    for (a, s) in subsets.iter().enumerate() {
        down[(a, a)] = down_probability(n, s, s);
        for drop in 0..s.len() {
            let mut t = s.clone();
            t.remove(drop);
            let b = index[t.as_slice()];
            down[(a, b)] = down_probability(n, s, &t);
        }
    }
    let mut up = DMatrix::zeros(m, m);
    for (a, t) in subsets.iter().enumerate() {
        if t.len() == n {
            up[(a, a)] = 1.0;
            continue;
        }
        for (mv, p) in up_distribution(target, &states[a]) {
            let b = match mv {
                None => a,
                Some(i) => {
                    let mut s = t.clone();
                    s.push(i);
                    s.sort_unstable();
                    index[s.as_slice()]
                }
            };
            up[(a, b)] += p;
        }
    }
    let transition = &down * &up;
    Ok(WalkKernel {
        subsets,
        mu,
        down,
        up,
        transition,
    })
}

/// Results of checking the explicit kernel against the restricted Gibbs law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationaryReport {
    pub states: usize,
    /// `max_S |sum_T P(S, T) - 1|`.
    pub row_sum_error: f64,
    /// `|mu P - mu|_1`.
    pub stationarity_error: f64,
    /// `max |mu(S) P(S, T) - mu(T) P(T, S)|`.
    pub reversibility_error: f64,
    /// `max |mu(S) D(S, T) - (mu D)(T) U(T, S)|`.
    pub adjointness_error: f64,
    /// Second-largest eigenvalue modulus of `P`.
    pub slem: f64,
}

impl StationaryReport {
    pub fn passes(&self) -> bool {
        self.row_sum_error <= 1e-12 && self.stationarity_error <= 1e-10 && self.reversibility_error <= 1e-10
    }
}

pub fn stationary_check(inst: &SkInstance, y: &DVector<f64>, wedge: &Wedge) -> Result<StationaryReport> {
    let target = Target::from_instance(inst, y)?;
    Ok(kernel_report(&transition_kernel(&target, wedge)?))
}

pub fn kernel_report(k: &WalkKernel) -> StationaryReport {
    let m = k.subsets.len();
    let p = &k.transition;
    let mu = DVector::from_vec(k.mu.clone());
    let row_sum_error = (0..m).map(|a| (p.row(a).sum() - 1.0).abs()).fold(0.0, f64::max);
    let mu_p = p.tr_mul(&mu);
    let stationarity_error = (&mu_p - &mu).lp_norm(1);
    let mu_d = k.down.tr_mul(&mu);
    let mut reversibility_error = 0.0_f64;
    let mut adjointness_error = 0.0_f64;
    for a in 0..m {
        for b in 0..m {
            reversibility_error = reversibility_error.max((mu[a] * p[(a, b)] - mu[b] * p[(b, a)]).abs());
            adjointness_error = adjointness_error.max((mu[a] * k.down[(a, b)] - mu_d[b] * k.up[(b, a)]).abs());
        }
    }
    // Reversibility makes diag(sqrt mu) P diag(1/sqrt mu) symmetric.
    let sq: Vec<f64> = k.mu.iter().map(|v| v.sqrt()).collect();
    let sym = DMatrix::from_fn(m, m, |a, b| {
        let v = sq[a] * p[(a, b)] / sq[b];
        let w = sq[b] * p[(b, a)] / sq[a];
        0.5 * (v + w)
    });
    let mut eig: Vec<f64> = sym.symmetric_eigenvalues().iter().map(|v| v.abs()).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    StationaryReport {
        states: m,
        row_sum_error,
        stationarity_error,
        reversibility_error,
        adjointness_error,
        slem: eig.get(1).copied().unwrap_or(0.0),
    }
}
