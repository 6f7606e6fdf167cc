//! Exact enumeration of the tilted SK Gibbs measure
//! `mu(sigma) ∝ exp(beta/2 <sigma, A sigma> + <y, sigma>)` over `{±1}^n`,
//! optionally restricted to a Hamming wedge. This is the ground truth the
//! rest of the crate is tested against.
//!
//! Enumeration walks each shard in Gray-code order, keeping the local field
//! `A sigma` so that every step costs O(n). Shard boundaries depend only on
//! `n`, so results do not depend on the thread count.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::instance::SkInstance;
use crate::rng::substream;

/// A point of the hypercube, stored as ±1 entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpinConfig(Vec<i8>);

impl SpinConfig {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if let Some(i) = spins.iter().position(|&s| s != 1 && s != -1) {
            return Err(invalid(format!("spin {i} is {} (must be ±1)", spins[i])));
        }
        Ok(Self(spins))
    }

    pub fn all_plus(n: usize) -> Self {
        Self(vec![1; n])
    }

    /// Componentwise sign of `y`, with `sign(0) = +1`.
    pub fn sign_of(y: &[f64]) -> Self {
        Self(y.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect())
    }

    /// Inverse of [`SpinConfig::index`]: bit `i` set means `sigma_i = -1`.
    pub fn from_index(index: u64, n: usize) -> Self {
        Self((0..n).map(|i| if index >> i & 1 == 1 { -1 } else { 1 }).collect())
    }

    pub fn index(&self) -> u64 {
        assert!(self.0.len() <= 64, "index encoding supports n <= 64");
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &s)| if s < 0 { acc | 1 << i } else { acc })
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn spins(&self) -> &[i8] {
        &self.0
    }

    pub fn to_f64(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.len(), self.0.iter().map(|&s| s as f64))
    }

    pub fn hamming(&self, other: &SpinConfig) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl std::fmt::Display for SpinConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &s in &self.0 {
            f.write_str(if s > 0 { "+" } else { "-" })?;
        }
        Ok(())
    }
}

/// Hamming ball `{sigma : d_H(sigma, center) <= radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wedge {
    center: SpinConfig,
    radius: usize,
}

impl Wedge {
    pub fn new(center: SpinConfig, radius: usize) -> Result<Self> {
        if radius > center.len() {
            return Err(invalid(format!(
                "wedge radius {radius} exceeds dimension {}",
                center.len()
            )));
        }
        Ok(Self { center, radius })
    }

    pub fn center(&self) -> &SpinConfig {
        &self.center
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn n(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, sigma: &SpinConfig) -> bool {
        sigma.len() == self.n() && sigma.hamming(&self.center) <= self.radius
    }

    /// Number of configurations in the ball.
    pub fn state_count(&self) -> u128 {
        let n = self.n() as u128;
        let mut c = 1u128;
        let mut total = 1u128;
        for i in 1..=self.radius as u128 {
            c = c * (n - i + 1) / i;
            total += c;
        }
        total
    }
}

/// Exact summary of a (restricted) tilted Gibbs measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactSummary {
    pub log_z: f64,
    pub magnetization: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

pub const DEFAULT_ORACLE_CAP: usize = 22;
const SHARD_LOW_BITS: usize = 12;

/// Brute-force enumerator, refusing dimensions above `cap`.
#[derive(Debug, Clone, Copy)]
pub struct Oracle {
    pub cap: usize,
}

impl Default for Oracle {
    fn default() -> Self {
        Self {
            cap: DEFAULT_ORACLE_CAP,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Moments {
    None,
    First,
    Second,
}

/// Log-sum-exp accumulator with a running maximum.
#[derive(Clone)]
struct Accumulator {
    max: f64,
    sum: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    n: usize,
}

impl Accumulator {
    fn new(n: usize, moments: Moments) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
            first: if moments != Moments::None { vec![0.0; n] } else { Vec::new() },
            second: if moments == Moments::Second { vec![0.0; n * n] } else { Vec::new() },
            n,
        }
    }

    fn rescale(&mut self, new_max: f64) {
        if self.max == f64::NEG_INFINITY {
            self.max = new_max;
            return;
        }
        let s = (self.max - new_max).exp();
        self.sum *= s;
        self.first.iter_mut().for_each(|v| *v *= s);
        self.second.iter_mut().for_each(|v| *v *= s);
        self.max = new_max;
    }

    #[inline]
    fn add(&mut self, log_w: f64, spins: &[f64]) {
        if log_w > self.max {
            self.rescale(log_w);
        }
        let w = (log_w - self.max).exp();
        self.sum += w;
        if !self.first.is_empty() {
            for (acc, &s) in self.first.iter_mut().zip(spins) {
                *acc += w * s;
            }
        }
        if !self.second.is_empty() {
            let n = self.n;
            for i in 0..n {
                let wi = w * spins[i];
                let row = &mut self.second[i * n..i * n + n];
                for j in (i + 1)..n {
                    row[j] += wi * spins[j];
                }
            }
        }
    }

    fn merge(mut self, mut other: Accumulator) -> Accumulator {
        if other.max == f64::NEG_INFINITY {
            return self;
        }
        if self.max == f64::NEG_INFINITY {
            return other;
        }
        if other.max > self.max {
            self.rescale(other.max);
        } else {
            other.rescale(self.max);
        }
        self.sum += other.sum;
        for (a, b) in self.first.iter_mut().zip(&other.first) {
            *a += b;
        }
        for (a, b) in self.second.iter_mut().zip(&other.second) {
            *a += b;
        }
        self
    }

    fn log_total(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// Energy `beta/2 <s, A s> + <y, s>` and local field `A s` from scratch.
pub(crate) fn energy_and_field(a: &DMatrix<f64>, beta: f64, y: &[f64], s: &[f64]) -> (f64, Vec<f64>) {
    let n = s.len();
    let mut field = vec![0.0; n];
    for (j, &sj) in s.iter().enumerate() {
        let col = a.column(j);
        for i in 0..n {
            field[i] += col[i] * sj;
        }
    }
    let quad: f64 = field.iter().zip(s).map(|(h, si)| h * si).sum();
    let lin: f64 = y.iter().zip(s).map(|(yi, si)| yi * si).sum();
    (0.5 * beta * quad + lin, field)
}

struct Enumeration<'a> {
    a: &'a DMatrix<f64>,
    beta: f64,
    y: &'a [f64],
    restriction: Option<&'a Wedge>,
}

impl Enumeration<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    /// Visits every admissible configuration of one shard with its log weight.
    fn walk_shard(&self, shard: u64, low_bits: usize, mut visit: impl FnMut(u64, f64, &[f64])) {
        let n = self.n();
        let a = self.a;
        let start = shard << low_bits;
        let mut s: Vec<f64> = (0..n).map(|i| if start >> i & 1 == 1 { -1.0 } else { 1.0 }).collect();
        let (mut e, mut field) = energy_and_field(a, self.beta, self.y, &s);
        let center: Option<Vec<f64>> = self
            .restriction
            .map(|w| w.center().spins().iter().map(|&v| v as f64).collect());
        let radius = self.restriction.map_or(n, |w| w.radius());
        let mut dist = center
            .as_ref()
            .map_or(0, |c| c.iter().zip(&s).filter(|(p, q)| p != q).count());
        let mut index = start;
        if dist <= radius {
            visit(index, e, &s);
        }
        for k in 1u64..(1u64 << low_bits) {
            let i = k.trailing_zeros() as usize;
            let si = s[i];
            e += self.beta * (-2.0 * si * field[i] + 2.0 * a[(i, i)]) - 2.0 * si * self.y[i];
            let col = a.column(i);
            for (f, &aji) in field.iter_mut().zip(col.iter()) {
                *f -= 2.0 * si * aji;
            }
            s[i] = -si;
            index ^= 1 << i;
            if let Some(c) = &center {
                if s[i] == c[i] {
                    dist -= 1;
                } else {
                    dist += 1;
                }
            }
            if dist <= radius {
                visit(index, e, &s);
            }
        }
    }

    fn shards(&self) -> (usize, u64) {
        let low = self.n().min(SHARD_LOW_BITS);
        (low, 1u64 << (self.n() - low))
    }

    fn accumulate(&self, moments: Moments) -> Accumulator {
        let n = self.n();
        let (low, shards) = self.shards();
        let parts: Vec<Accumulator> = (0..shards)
            .into_par_iter()
            .map(|shard| {
                let mut acc = Accumulator::new(n, moments);
                self.walk_shard(shard, low, |_, e, s| acc.add(e, s));
                acc
            })
            .collect();
        parts
            .into_iter()
            .fold(Accumulator::new(n, moments), Accumulator::merge)
    }
}

impl Oracle {
    pub fn new(cap: usize) -> Self {
        Self { cap }
    }

    fn check(&self, inst: &SkInstance, y: &DVector<f64>, restriction: Option<&Wedge>) -> Result<()> {
        let n = inst.n();
        if n > self.cap {
            return Err(Error::OracleCap { n, cap: self.cap });
        }
        if n > 62 {
            return Err(Error::OracleCap { n, cap: 62 });
        }
        if y.len() != n {
            return Err(invalid(format!("tilt has length {}, expected {n}", y.len())));
        }
        if let Some(w) = restriction {
            if w.n() != n {
                return Err(invalid("wedge dimension does not match the instance"));
            }
        }
        Ok(())
    }

    fn enumeration<'a>(
        inst: &'a SkInstance,
        beta: f64,
        y: &'a DVector<f64>,
        restriction: Option<&'a Wedge>,
    ) -> Enumeration<'a> {
        Enumeration {
            a: inst.couplings(),
            beta,
            y: y.as_slice(),
            restriction,
        }
    }

    /// `log Z` at the instance temperature.
    pub fn log_partition(&self, inst: &SkInstance, y: &DVector<f64>, restriction: Option<&Wedge>) -> Result<f64> {
        self.log_partition_at(inst, inst.beta(), y, restriction)
    }

    /// `log Z` with the couplings of `inst` scaled by an arbitrary `beta`.
    pub fn log_partition_at(
        &self,
        inst: &SkInstance,
        beta: f64,
        y: &DVector<f64>,
        restriction: Option<&Wedge>,
    ) -> Result<f64> {
        self.check(inst, y, restriction)?;
        Ok(Self::enumeration(inst, beta, y, restriction)
            .accumulate(Moments::None)
            .log_total())
    }

    /// `(log Z, <sigma>)`.
    pub fn magnetization(
        &self,
        inst: &SkInstance,
        y: &DVector<f64>,
        restriction: Option<&Wedge>,
    ) -> Result<(f64, DVector<f64>)> {
        self.check(inst, y, restriction)?;
        let acc = Self::enumeration(inst, inst.beta(), y, restriction).accumulate(Moments::First);
        let m = DVector::from_iterator(inst.n(), acc.first.iter().map(|v| v / acc.sum));
        Ok((acc.log_total(), m))
    }

    pub fn summary(&self, inst: &SkInstance, y: &DVector<f64>, restriction: Option<&Wedge>) -> Result<ExactSummary> {
        self.check(inst, y, restriction)?;
        let n = inst.n();
        let acc = Self::enumeration(inst, inst.beta(), y, restriction).accumulate(Moments::Second);
        let m = DVector::from_iterator(n, acc.first.iter().map(|v| v / acc.sum));
        let mut cov = DMatrix::zeros(n, n);
        for i in 0..n {
            cov[(i, i)] = 1.0 - m[i] * m[i];
            for j in (i + 1)..n {
                let c = acc.second[i * n + j] / acc.sum - m[i] * m[j];
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        Ok(ExactSummary {
            log_z: acc.log_total(),
            magnetization: m,
            covariance: cov,
        })
    }

    /// The full probability table over admissible configurations.
    pub fn table(&self, inst: &SkInstance, y: &DVector<f64>, restriction: Option<&Wedge>) -> Result<GibbsTable> {
        self.table_at(inst, inst.beta(), y, restriction)
    }

    pub fn table_at(
        &self,
        inst: &SkInstance,
        beta: f64,
        y: &DVector<f64>,
        restriction: Option<&Wedge>,
    ) -> Result<GibbsTable> {
        self.check(inst, y, restriction)?;
        let en = Self::enumeration(inst, beta, y, restriction);
        let (low, shards) = en.shards();
        let mut entries: Vec<(u64, f64)> = (0..shards)
            .into_par_iter()
            .flat_map_iter(|shard| {
                let mut out = Vec::new();
                en.walk_shard(shard, low, |idx, e, _| out.push((idx, e)));
                out
            })
            .collect();
        entries.sort_unstable_by_key(|&(idx, _)| idx);
        GibbsTable::from_log_weights(inst.n(), entries)
    }

    /// One exact draw by inverse CDF over the enumerated table.
    pub fn exact_sample(
        &self,
        inst: &SkInstance,
        y: &DVector<f64>,
        restriction: Option<&Wedge>,
        seed: u64,
    ) -> Result<SpinConfig> {
        let table = self.table(inst, y, restriction)?;
        Ok(table.sample(&mut substream(seed, 0)))
    }

    /// Total variation between an empirical histogram and the exact law.
    pub fn tv_distance(
        &self,
        hist: &Histogram,
        inst: &SkInstance,
        y: &DVector<f64>,
        restriction: Option<&Wedge>,
    ) -> Result<f64> {
        self.table(inst, y, restriction)?.tv_distance(hist)
    }
}

/// Normalized probabilities of every admissible configuration, sorted by index.
#[derive(Debug, Clone)]
pub struct GibbsTable {
    n: usize,
    indices: Vec<u64>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    log_z: f64,
}

impl GibbsTable {
    fn from_log_weights(n: usize, entries: Vec<(u64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("no admissible configurations"));
        }
        let max = entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = entries.iter().map(|e| (e.1 - max).exp()).sum();
        let probs: Vec<f64> = entries.iter().map(|e| (e.1 - max).exp() / sum).collect();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut c = 0.0;
        for p in &probs {
            c += p;
            cumulative.push(c);
        }
        Ok(Self {
            n,
            indices: entries.into_iter().map(|e| e.0).collect(),
            probs,
            cumulative,
            log_z: max + sum.ln(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.indices.iter().copied().zip(self.probs.iter().copied())
    }

    pub fn probability(&self, index: u64) -> f64 {
        self.indices
            .binary_search(&index)
            .map_or(0.0, |pos| self.probs[pos])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SpinConfig {
        let total = *self.cumulative.last().unwrap();
        let u: f64 = rng.gen::<f64>() * total;
        let pos = self.cumulative.partition_point(|&c| c <= u).min(self.len() - 1);
        SpinConfig::from_index(self.indices[pos], self.n)
    }

    pub fn tv_distance(&self, hist: &Histogram) -> Result<f64> {
        if hist.total() == 0 {
            return Err(Error::EmptyHistogram);
        }
        let total = hist.total() as f64;
        let mut tv = 0.0;
        let mut seen = 0u64;
        for (idx, p) in self.iter() {
            let c = hist.count(idx);
            seen += c;
            tv += (c as f64 / total - p).abs();
        }
        if seen != hist.total() {
            return Err(invalid("histogram has mass outside the admissible set"));
        }
        Ok(0.5 * tv)
    }
}

/// Counts of observed configurations, keyed by [`SpinConfig::index`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Histogram {
    counts: BTreeMap<u64, u64>,
    total: u64,
}

impl Histogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, sigma: &SpinConfig) {
        self.add_index(sigma.index());
    }

    pub fn add_index(&mut self, index: u64) {
        *self.counts.entry(index).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn count(&self, index: u64) -> u64 {
        self.counts.get(&index).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }
}

impl<'a> FromIterator<&'a SpinConfig> for Histogram {
    fn from_iter<I: IntoIterator<Item = &'a SpinConfig>>(iter: I) -> Self {
        let mut h = Histogram::new();
        for s in iter {
            h.add(s);
        }
        h
    }
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `log sum_{sigma in wedge} exp(<y, sigma>)` in O(n k).
///
/// Flipping a set `S` away from the center multiplies `exp(<y, x0>)` by
/// `prod_{i in S} exp(-2 y_i x0_i)`, so the sum is the degree-`<= k` part of
/// `prod_i (1 + r_i)`, built up as elementary symmetric polynomials in log space.
pub fn restricted_product_log_z(y: &DVector<f64>, wedge: &Wedge) -> Result<f64> {
    let n = wedge.n();
    if y.len() != n {
        return Err(invalid("tilt and wedge dimensions differ"));
    }
    let k = wedge.radius();
    let center = wedge.center().spins();
    let base: f64 = y.iter().zip(center).map(|(yi, &c)| yi * c as f64).sum();
    let mut elem = vec![f64::NEG_INFINITY; k + 1];
    elem[0] = 0.0;
    for i in 0..n {
        let log_r = -2.0 * y[i] * center[i] as f64;
        for j in (1..=k.min(i + 1)).rev() {
            elem[j] = log_add_exp(elem[j], elem[j - 1] + log_r);
        }
    }
    Ok(base + elem.into_iter().fold(f64::NEG_INFINITY, log_add_exp))
}

/// `log sum_{i <= k} C(n, i)`: the field-free wedge size.
pub fn binomial_wedge_log_count(n: usize, k: usize) -> f64 {
    let mut log_c = 0.0_f64;
    let mut acc = 0.0_f64;
    for i in 1..=k.min(n) {
        log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        acc = log_add_exp(acc, log_c);
    }
    acc
}
