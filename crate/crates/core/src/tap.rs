//! The TAP free energy of the SK model and the resolvent quantities built
//! from its Hessian.
//!
//! Sign convention: `F_TAP(m, y) = g(m) - <y, m>` with the convex potential
//! `g(m) = -(beta/2)<m, A m> - sum_i h(m_i) - (n beta^2 / 4)(1 - |m|^2/n)^2`.
//! Its minimizer over the cube solves `m = tanh(beta A m + y - beta^2 (1-q) m)`
//! and `-F_TAP` at the minimizer approximates `log Z(y)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::instance::SkInstance;

/// Largest dual coordinate the crate will work with.
pub const MAX_DUAL: f64 = 700.0;

/// A point of the open cube `(-1, 1)^n`, stored through its dual
/// coordinates `x = atanh(m)` so that `1 - m_i^2` keeps full relative
/// precision even when `m_i` rounds to ±1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Magnetization {
    x: DVector<f64>,
    m: DVector<f64>,
    gap: DVector<f64>,
}

impl Magnetization {
    /// From dual coordinates; `m = tanh(x)`.
    pub fn from_dual(x: DVector<f64>) -> Result<Self> {
        if let Some((index, &value)) = x
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || v.abs() > MAX_DUAL)
        {
            return Err(Error::Overflow { index, value });
        }
        let m = x.map(f64::tanh);
        let gap = x.map(|v| {
            let s = 1.0 / v.cosh();
            s * s
        });
        Ok(Self { x, m, gap })
    }

    /// From values in the open cube. Errors on any `|m_i| >= 1`.
    pub fn from_values(m: DVector<f64>) -> Result<Self> {
        if let Some((index, &value)) = m
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.abs() < 1.0))
        {
            return Err(Error::Domain { index, value });
        }
        let x = m.map(atanh);
        let gap = m.map(|v| (1.0 - v) * (1.0 + v));
        Ok(Self { x, m, gap })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            m: DVector::zeros(n),
            gap: DVector::from_element(n, 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn dual(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn into_dual(self) -> DVector<f64> {
        self.x
    }

    /// `1 - m_i^2`, the diagonal of `D(m)^{-1}`.
    pub fn one_minus_sq(&self) -> &DVector<f64> {
        &self.gap
    }

    /// The diagonal of `D(m) = diag(1 / (1 - m_i^2))`.
    pub fn d_diag(&self) -> DVector<f64> {
        self.x.map(|v| {
            let c = v.cosh();
            c * c
        })
    }

    /// `1 - max_i |m_i|`, computed without cancellation.
    pub fn min_gap(&self) -> f64 {
        let xmax = self.x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        2.0 / (1.0 + (2.0 * xmax).exp())
    }

    pub fn norm_sq(&self) -> f64 {
        self.m.norm_squared()
    }

    /// `sum_i h(m_i)`, evaluated from the dual coordinates.
    pub fn entropy(&self) -> f64 {
        self.x
            .iter()
            .zip(self.m.iter())
            .map(|(&x, &m)| {
                let ax = x.abs();
                ax + (-2.0 * ax).exp().ln_1p() - x * m
            })
            .sum()
    }
}

/// `atanh` via `log1p` for accuracy near ±1.
pub fn atanh(m: f64) -> f64 {
    0.5 * (2.0 * m / (1.0 - m)).ln_1p()
}

/// Binary entropy `h(m) = -(1+m)/2 log((1+m)/2) - (1-m)/2 log((1-m)/2)` (nats).
pub fn binary_entropy(m: f64) -> Result<f64> {
    if !(m.abs() <= 1.0) {
        return Err(Error::Domain { index: 0, value: m });
    }
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    Ok(term((1.0 + m) / 2.0) + term((1.0 - m) / 2.0))
}

fn check_dims(inst: &SkInstance, m: &Magnetization, y: Option<&DVector<f64>>) -> Result<()> {
    let n = inst.n();
    if m.len() != n {
        return Err(invalid(format!("magnetization has length {}, expected {n}", m.len())));
    }
    if let Some(y) = y {
        if y.len() != n {
            return Err(invalid(format!("tilt has length {}, expected {n}", y.len())));
        }
    }
    Ok(())
}

/// `1 - |m|^2 / n`.
fn overlap_gap(m: &Magnetization) -> f64 {
    1.0 - m.norm_sq() / m.len() as f64
}

/// `F_TAP(m, y)`.
pub fn tap_free_energy(inst: &SkInstance, m: &Magnetization, y: &DVector<f64>) -> Result<f64> {
    check_dims(inst, m, Some(y))?;
    let beta = inst.beta();
    let n = inst.n() as f64;
    let mv = m.values();
    let quad = mv.dot(&(inst.couplings() * mv));
    let r = overlap_gap(m);
    Ok(-0.5 * beta * quad - y.dot(mv) - m.entropy() - 0.25 * n * beta * beta * r * r)
}

/// `-F_TAP(m, y)`: at the TAP minimizer this approximates `log Z(y)`.
pub fn tap_log_partition(inst: &SkInstance, m: &Magnetization, y: &DVector<f64>) -> Result<f64> {
    tap_free_energy(inst, m, y).map(|v| -v)
}

/// `grad_m F_TAP = -beta A m - y + atanh(m) + beta^2 (1 - q) m`.
pub fn tap_gradient(inst: &SkInstance, m: &Magnetization, y: &DVector<f64>) -> Result<DVector<f64>> {
    check_dims(inst, m, Some(y))?;
    let mut g = DVector::zeros(inst.n());
    gradient_into(inst, m.values(), m.dual(), y, &mut g);
    Ok(g)
}

/// Allocation-free gradient used by the solver.
pub(crate) fn gradient_into(
    inst: &SkInstance,
    m: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    out: &mut DVector<f64>,
) {
    let beta = inst.beta();
    let n = m.len() as f64;
    let c = beta * beta * (1.0 - m.norm_squared() / n);
    out.gemv(-beta, inst.couplings(), m, 0.0);
    out.axpy(c, m, 1.0);
    *out += x;
    *out -= y;
}

/// The Hessian `-beta A + D(m) + beta^2 (1-q) I - (2 beta^2 / n) m m^T`.
pub fn tap_hessian(inst: &SkInstance, m: &Magnetization) -> Result<DMatrix<f64>> {
    check_dims(inst, m, None)?;
    let beta = inst.beta();
    let n = inst.n();
    let mv = m.values();
    let mut h = inst.couplings() * (-beta);
    let shift = beta * beta * overlap_gap(m);
    let d = m.d_diag();
    for i in 0..n {
        h[(i, i)] += d[i] + shift;
    }
    h.ger(-2.0 * beta * beta / n as f64, mv, mv, 1.0);
    Ok(h)
}

/// `Q_hat(m)`, the inverse TAP Hessian.
pub fn tap_resolvent(inst: &SkInstance, m: &Magnetization) -> Result<DMatrix<f64>> {
    let h = tap_hessian(inst, m)?;
    invert_spd(h)
}

fn invert_spd(h: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenSolver);
    }
    match Cholesky::new(h.clone()) {
        Some(chol) => {
            let mut q = chol.inverse();
            q.fill_lower_triangle_with_upper_triangle();
            Ok(q)
        }
        None => Err(Error::NotPositiveDefinite {
            min_eigenvalue: h.symmetric_eigenvalues().min(),
        }),
    }
}

/// `Q_hat(m)` together with the derived quantities the dynamics needs.
#[derive(Debug, Clone)]
pub struct Resolvent {
    pub q: DMatrix<f64>,
    /// Diagonal of `Q_hat^2`.
    pub diag_q2: DVector<f64>,
    pub trace_q: f64,
    pub trace_q2: f64,
}

impl Resolvent {
    pub fn new(inst: &SkInstance, m: &Magnetization) -> Result<Self> {
        let q = tap_resolvent(inst, m)?;
        let n = q.nrows();
        let diag_q2 = DVector::from_fn(n, |i, _| q.column(i).norm_squared());
        Ok(Self {
            trace_q: q.trace(),
            trace_q2: diag_q2.sum(),
            diag_q2,
            q,
        })
    }

    /// `f(m) = (E_D[Q^2] D^2 - (beta^2/n)(Tr Q^2 I + 2 Q^2)) m`.
    pub fn drift_correction(&self, inst: &SkInstance, m: &Magnetization) -> DVector<f64> {
        let beta = inst.beta();
        let n = m.len() as f64;
        let mv = m.values();
        let qm = &self.q * mv;
        let q2m = &self.q * &qm;
        let d = m.d_diag();
        let c = beta * beta / n;
        DVector::from_fn(m.len(), |i, _| {
            self.diag_q2[i] * d[i] * d[i] * mv[i] - c * (self.trace_q2 * mv[i] + 2.0 * q2m[i])
        })
    }

    /// `omega(m) = (Tr Q + |m|^2) / 2`.
    pub fn weight_integrand(&self, m: &Magnetization) -> f64 {
        0.5 * (self.trace_q + m.norm_sq())
    }

    /// Diagonal of `E_D[Q^2] D^2 - (1 + beta^2 tr_n Q^2) I`.
    pub fn delta_diag(&self, inst: &SkInstance, m: &Magnetization) -> DVector<f64> {
        let beta = inst.beta();
        let n = m.len() as f64;
        let shift = 1.0 + beta * beta * self.trace_q2 / n;
        let d = m.d_diag();
        DVector::from_fn(m.len(), |i, _| self.diag_q2[i] * d[i] * d[i] - shift)
    }
}

pub fn drift_correction(inst: &SkInstance, m: &Magnetization) -> Result<DVector<f64>> {
    Ok(Resolvent::new(inst, m)?.drift_correction(inst, m))
}

pub fn weight_integrand(inst: &SkInstance, m: &Magnetization) -> Result<f64> {
    Ok(Resolvent::new(inst, m)?.weight_integrand(m))
}

/// Diagonal entries of the drift-mismatch matrix `delta_diag(m)`.
pub fn delta_diag(inst: &SkInstance, m: &Magnetization) -> Result<DVector<f64>> {
    Ok(Resolvent::new(inst, m)?.delta_diag(inst, m))
}

/// `sqrt((1/n) sum_i d_i^2)` for a diagonal matrix with entries `d`.
pub fn normalized_schatten2(d: &DVector<f64>) -> f64 {
    (d.norm_squared() / d.len() as f64).sqrt()
}
