//! Taylor-coefficient containers, the truncated-series step, the truncation
//! error model and order/step selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{factorial, norm_inf, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaylorError {
    #[error("requested order {requested} exceeds available order {available}")]
    OrderOutOfRange { requested: usize, available: usize },
    #[error("coefficient dimension {found} does not match state dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("all derivative norms are non-finite")]
    NumericalBlowup,
    #[error("step size {h:e} s fell below h_min = {h_min:e} s")]
    StepUnderflow { h: f64, h_min: f64 },
    #[error("invalid controller settings: {0}")]
    InvalidController(String),
}

/// Normalized Taylor coefficients `c_k = x^(k)(t0) / k!` for `k = 0..=order`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorCoefficients<T> {
    t0: T,
    coeffs: Vec<Vec<T>>,
}

impl<T: Real> TaylorCoefficients<T> {
    pub fn new(t0: T, state: Vec<T>) -> Self {
        Self { t0, coeffs: vec![state] }
    }

    /// Builds from a full coefficient list. Panics if empty or ragged.
    pub fn from_coeffs(t0: T, coeffs: Vec<Vec<T>>) -> Self {
        assert!(!coeffs.is_empty(), "at least the order-0 coefficient is required");
        let d = coeffs[0].len();
        assert!(coeffs.iter().all(|c| c.len() == d), "ragged Taylor coefficients");
        Self { t0, coeffs }
    }

    pub fn t0(&self) -> T {
        self.t0
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.coeffs[0].len()
    }

    pub fn coeff(&self, k: usize) -> &[T] {
        &self.coeffs[k]
    }

    pub fn coeffs(&self) -> &[Vec<T>] {
        &self.coeffs
    }

    pub fn push(&mut self, c: Vec<T>) -> Result<(), TaylorError> {
        if c.len() != self.dim() {
            return Err(TaylorError::Dimension { expected: self.dim(), found: c.len() });
        }
        self.coeffs.push(c);
        Ok(())
    }

    /// `x^(k)` recovered from the normalized coefficient.
    pub fn derivative(&self, k: usize) -> Vec<T> {
        let f = factorial::<T>(k);
        self.coeffs[k].iter().map(|&c| c * f).collect()
    }

    /// Horner evaluation of `sum_{k <= up_to} c_k dt^k`.
    pub fn eval_poly(&self, dt: T, up_to: usize) -> Result<Vec<T>, TaylorError> {
        if up_to > self.order() {
            return Err(TaylorError::OrderOutOfRange { requested: up_to, available: self.order() });
        }
        let mut out = self.coeffs[up_to].clone();
        for k in (0..up_to).rev() {
            for (o, c) in out.iter_mut().zip(&self.coeffs[k]) {
                *o = *o * dt + *c;
            }
        }
        Ok(out)
    }

    /// Time derivative of the degree-`up_to` polynomial at `t0 + dt`.
    pub fn eval_poly_derivative(&self, dt: T, up_to: usize) -> Result<Vec<T>, TaylorError> {
        if up_to > self.order() {
            return Err(TaylorError::OrderOutOfRange { requested: up_to, available: self.order() });
        }
        let mut out = vec![T::zero(); self.dim()];
        for k in (1..=up_to).rev() {
            let kk = T::from_usize_lossy(k);
            for (o, c) in out.iter_mut().zip(&self.coeffs[k]) {
                *o = *o * dt + kk * *c;
            }
        }
        Ok(out)
    }

    /// The truncated Taylor step: state at `t0 + h_step` using orders `0..=q`.
    pub fn advance_state(&self, h_step: T, q: usize) -> Result<Vec<T>, TaylorError> {
        self.eval_poly(h_step, q)
    }

    /// `||x^(q)||_inf / q!`, i.e. the infinity norm of `c_q`.
    pub fn normalized_norm(&self, q: usize) -> T {
        norm_inf(&self.coeffs[q])
    }
}

/// Estimated local error of an order-`q` step:
/// `(norm_xq / q!)^((q+1)/q) * h_step^(q+1)`, with `norm_xq = ||x^(q)||_inf`.
pub fn truncation_error<T: Real>(q: usize, norm_xq: T, h_step: T) -> T {
    assert!(q >= 1, "truncation error needs q >= 1");
    if norm_xq.is_zero() {
        return T::zero();
    }
    let qf = T::from_usize_lossy(q);
    (norm_xq / factorial::<T>(q)).powf((qf + T::one()) / qf) * h_step.powi(q as i32 + 1)
}

/// Largest step whose order-`q` truncation error equals `tok`, given `c_norm = ||c_q||`.
fn step_for_tolerance<T: Real>(q: usize, c_norm: T, tok: T) -> T {
    if c_norm.is_zero() {
        return T::infinity();
    }
    let qf = T::from_usize_lossy(q);
    tok.powf(T::one() / (qf + T::one())) * c_norm.powf(-T::one() / qf)
}

/// Step-size and order control settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepController<T> {
    pub rel_tol: T,
    pub abs_tol: T,
    pub q_min: usize,
    pub q_max: usize,
    pub safety: T,
    pub h_min: T,
    pub h_max: T,
    /// Pins every step to this order (cascade computed only that far).
    pub forced_order: Option<usize>,
}

impl<T: Real> StepController<T> {
    pub fn new(rel_tol: T, abs_tol: T) -> Self {
        Self {
            rel_tol,
            abs_tol,
            q_min: 2,
            q_max: 5,
            safety: T::lit(0.8),
            h_min: T::lit(1e-15),
            h_max: T::infinity(),
            forced_order: None,
        }
    }

    pub fn with_orders(mut self, q_min: usize, q_max: usize) -> Self {
        self.q_min = q_min;
        self.q_max = q_max;
        self
    }

    pub fn with_forced_order(mut self, q: usize) -> Self {
        self.forced_order = Some(q);
        self
    }

    pub fn validate(&self) -> Result<(), TaylorError> {
        let bad = |m: &str| Err(TaylorError::InvalidController(m.to_string()));
        if !(self.rel_tol >= T::zero() && self.abs_tol >= T::zero()) || (self.rel_tol + self.abs_tol).is_zero() {
            return bad("tolerances must be non-negative and not both zero");
        }
        if self.q_min < 2 || self.q_min > self.q_max {
            return bad("require 2 <= q_min <= q_max");
        }
        if !(self.safety > T::zero() && self.safety <= T::one()) {
            return bad("safety must lie in (0, 1]");
        }
        if !(self.h_min > T::zero() && self.h_min <= self.h_max) {
            return bad("require 0 < h_min <= h_max");
        }
        if let Some(q) = self.forced_order {
            if q < 1 {
                return bad("forced order must be at least 1");
            }
        }
        Ok(())
    }

    /// Mixed per-step tolerance `abs_tol + rel_tol * ||x||_inf`.
    pub fn tolerance(&self, state_norm: T) -> T {
        self.abs_tol + self.rel_tol * state_norm
    }

    /// Orders searched by the selector.
    pub fn order_range(&self) -> (usize, usize) {
        match self.forced_order {
            Some(q) => (q, q),
            None => (self.q_min, self.q_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderChoice<T> {
    pub q: usize,
    pub h_step: T,
    /// Step before clipping to `h_cap`; infinite for polynomial trajectories.
    pub h_unclipped: T,
}

/// Picks the order maximizing advance per evaluation `h_q / cost(q)` over the
/// orders available in `tc` within the controller's range.
///
/// `h_q` inverts the truncation-error model at `tok`, scaled by the safety
/// factor and clipped to `h_cap`.
pub fn select_order_and_step<T: Real>(
    tc: &TaylorCoefficients<T>,
    ctrl: &StepController<T>,
    cost_per_order: impl Fn(usize) -> usize,
    h_cap: T,
    tok: T,
) -> Result<OrderChoice<T>, TaylorError> {
    let (q_lo, q_hi) = ctrl.order_range();
    if tc.order() < q_lo {
        return Err(TaylorError::OrderOutOfRange { requested: q_lo, available: tc.order() });
    }
    let q_hi = q_hi.min(tc.order());
    let cap = h_cap.min(ctrl.h_max);
    let mut best: Option<(OrderChoice<T>, T)> = None;
    for q in q_lo..=q_hi {
        let n = tc.normalized_norm(q);
        if !n.is_finite() {
            continue;
        }
        let raw = ctrl.safety * step_for_tolerance(q, n, tok);
        let mut h = raw.min(cap);
        // the model must hold at the returned step even after rounding
        while truncation_error(q, n * factorial::<T>(q), h) > tok && h > T::zero() {
            h *= T::one() - T::lit(4.0) * T::epsilon();
        }
        let merit = h / T::from_usize_lossy(cost_per_order(q).max(1));
        let better = match &best {
            None => true,
            Some((_, m)) => merit > *m,
        };
        if better {
            best = Some((OrderChoice { q, h_step: h, h_unclipped: raw }, merit));
        }
    }
    let (choice, _) = best.ok_or(TaylorError::NumericalBlowup)?;
    if choice.h_step < ctrl.h_min && choice.h_step < cap {
        return Err(TaylorError::StepUnderflow { h: choice.h_step.to_f64_lossy(), h_min: ctrl.h_min.to_f64_lossy() });
    }
    Ok(choice)
}

/// Step that order `q + 1` is expected to allow, extrapolating the next
/// coefficient norm geometrically from `||c_q||` (the same growth model the
/// truncation error uses).
pub fn predicted_next_step<T: Real>(q: usize, c_norm: T, tok: T, safety: T) -> T {
    if c_norm.is_zero() || !c_norm.is_finite() {
        return T::infinity();
    }
    let qf = T::from_usize_lossy(q);
    let next = c_norm.powf((qf + T::one()) / qf);
    safety * step_for_tolerance(q + 1, next, tok)
}

/// Step that order `target > q` is expected to allow, extrapolating from the
/// last two coefficient norms with the exponential model `c_k ~ C r^k / k!`,
/// which is exact for linear dynamics.
pub fn predicted_step_at<T: Real>(tc: &TaylorCoefficients<T>, q: usize, target: usize, tok: T, safety: T) -> T {
    let (cq, cp) = (tc.normalized_norm(q), tc.normalized_norm(q - 1));
    if cq.is_zero() || !cq.is_finite() {
        return T::infinity();
    }
    if cp.is_zero() {
        return predicted_next_step(q, cq, tok, safety);
    }
    let r = T::from_usize_lossy(q) * cq / cp;
    let mut c = cq;
    for k in q + 1..=target {
        c = c * r / T::from_usize_lossy(k);
    }
    safety * step_for_tolerance(target, c, tok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_poly_examples() {
        let tc = TaylorCoefficients::from_coeffs(0.0f64, vec![vec![1.0], vec![1.0], vec![0.5]]);
        assert!((tc.eval_poly(0.1, 2).unwrap()[0] - 1.105).abs() < 1e-15);
        assert_eq!(tc.eval_poly(0.0, 2).unwrap(), vec![1.0]);
        let geo = TaylorCoefficients::from_coeffs(0.0, vec![vec![1.0]; 5]);
        assert_eq!(geo.eval_poly(0.5, 4).unwrap(), vec![1.9375]);
        assert_eq!(
            geo.eval_poly(0.5, 5).unwrap_err(),
            TaylorError::OrderOutOfRange { requested: 5, available: 4 }
        );
    }

    #[test]
    fn poly_derivative_matches_difference() {
        let tc = TaylorCoefficients::from_coeffs(0.0f64, vec![vec![1.0], vec![-2.0], vec![0.5], vec![0.25]]);
        let d = tc.eval_poly_derivative(0.3, 3).unwrap()[0];
        assert!((d - (-2.0 + 2.0 * 0.5 * 0.3 + 3.0 * 0.25 * 0.09)).abs() < 1e-15);
    }

    #[test]
    fn advance_truncated_exponential() {
        let (lam, x0, h) = (-3.0f64, 2.0, 0.2);
        let mut coeffs = vec![vec![x0]];
        for k in 1..=6 {
            let prev = coeffs[k - 1][0];
            coeffs.push(vec![prev * lam / k as f64]);
        }
        let tc = TaylorCoefficients::from_coeffs(0.0, coeffs);
        let z = lam * h;
        let expect: f64 = x0 * (0..=6).map(|k| z.powi(k) / factorial::<f64>(k as usize)).sum::<f64>();
        assert!((tc.advance_state(h, 6).unwrap()[0] - expect).abs() < 1e-15);
        assert_eq!(tc.advance_state(0.0, 6).unwrap(), vec![x0]);
    }

    #[test]
    fn harmonic_oscillator_step() {
        // x'' = -x, x(0) = 1, x'(0) = 0 as a first-order system (x, v)
        let mut coeffs = vec![vec![1.0f64, 0.0]];
        for k in 1..=5 {
            let p = &coeffs[k - 1];
            let next = vec![p[1] / k as f64, -p[0] / k as f64];
            coeffs.push(next);
        }
        let tc = TaylorCoefficients::from_coeffs(0.0, coeffs);
        let x = tc.advance_state(0.01, 5).unwrap();
        assert!((x[0] - 0.01f64.cos()).abs() < 1e-11);
        assert!((x[1] + 0.01f64.sin()).abs() < 1e-11);
    }

    #[test]
    fn truncation_error_examples() {
        assert!((truncation_error(2, 2.0f64, 0.1) - 1e-3).abs() < 1e-18);
        assert_eq!(truncation_error(2, 0.0, 0.1), 0.0);
        assert!((truncation_error(3, 6.0f64, 0.01) - 1e-8).abs() < 1e-22);
    }

    fn ctrl() -> StepController<f64> {
        let mut c = StepController::new(0.0, 1e-3);
        c.safety = 1.0;
        c
    }

    #[test]
    fn linear_trajectory_takes_cap() {
        let tc = TaylorCoefficients::from_coeffs(0.0, vec![vec![1.0], vec![2.0], vec![0.0], vec![0.0], vec![0.0], vec![0.0]]);
        let c = select_order_and_step(&tc, &ctrl(), |q| 1 + 4 * (q - 1), 0.25, 1e-3).unwrap();
        assert_eq!(c.q, 2);
        assert_eq!(c.h_step, 0.25);
    }

    #[test]
    fn second_order_inversion() {
        let tc = TaylorCoefficients::from_coeffs(0.0, vec![vec![0.0], vec![0.0], vec![1.0]]);
        let c = select_order_and_step(&tc, &ctrl().with_orders(2, 2), |_| 1, f64::INFINITY, 1e-3).unwrap();
        assert_eq!(c.q, 2);
        assert!((c.h_step - 0.1).abs() < 1e-12);
        assert!(truncation_error(2, 2.0, c.h_step) <= 1e-3);
    }

    #[test]
    fn exponential_selection_is_self_consistent() {
        let coeffs: Vec<Vec<f64>> = (0..=5).map(|k| vec![1.0 / factorial::<f64>(k)]).collect();
        let tc = TaylorCoefficients::from_coeffs(0.0, coeffs);
        let tok = 1e-9;
        let mut c = StepController::new(0.0, tok);
        c.safety = 0.8;
        let choice = select_order_and_step(&tc, &c, |q| 1 + 4 * (q - 1), 10.0, tok).unwrap();
        let norm = tc.derivative(choice.q)[0].abs();
        assert!(truncation_error(choice.q, norm, choice.h_step) <= tok);
        assert!((2..=5).contains(&choice.q));
    }

    #[test]
    fn blowup_and_underflow() {
        let tc = TaylorCoefficients::from_coeffs(0.0, vec![vec![1.0], vec![1.0], vec![f64::NAN]]);
        let e = select_order_and_step(&tc, &ctrl().with_orders(2, 2), |_| 1, 1.0, 1e-3).unwrap_err();
        assert_eq!(e, TaylorError::NumericalBlowup);
        let tc = TaylorCoefficients::from_coeffs(0.0, vec![vec![1.0], vec![1.0], vec![1e40]]);
        let e = select_order_and_step(&tc, &ctrl().with_orders(2, 2), |_| 1, 1.0, 1e-3).unwrap_err();
        assert!(matches!(e, TaylorError::StepUnderflow { .. }));
    }

    #[test]
    fn controller_validation() {
        assert!(StepController::new(1e-6, 1e-9).validate().is_ok());
        assert!(StepController::new(1e-6, 1e-9).with_orders(1, 5).validate().is_err());
        assert!(StepController::new(1e-6, 1e-9).with_orders(4, 3).validate().is_err());
        let mut c = StepController::new(1e-6, 1e-9);
        c.safety = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn prediction_grows_with_tighter_tolerance() {
        let loose = predicted_next_step(2, 10.0f64, 1e-2, 1.0) / step_for_tolerance(2, 10.0, 1e-2);
        let tight = predicted_next_step(2, 10.0f64, 1e-8, 1.0) / step_for_tolerance(2, 10.0, 1e-8);
        assert!(tight > loose);
    }
}
