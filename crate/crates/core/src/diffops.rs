//! Central finite-difference operators on uniformly scaled node sets.
//!
//! A [`StencilOperator`] maps samples `u(t0 + c_j h)` to an estimate of the
//! scaled derivative `h^i u^(i)(t0)`. Weights are dimensionless and are
//! obtained from the Taylor-moment conditions
//! `sum_j w_j c_j^m / m! = delta(m, i)` for `m < nodes.len()`.

use thiserror::Error;

use crate::linalg::{Lu, Matrix};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffOpsError {
    #[error("invalid stencil: {0}")]
    InvalidStencil(String),
    #[error("derivative order {order} out of range for q_max = {q_max}")]
    OutOfRange { order: usize, q_max: usize },
    #[error("sample shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StencilOperator<T> {
    derivative_order: usize,
    nodes: Vec<T>,
    weights: Vec<T>,
    accuracy_order: usize,
}

/// How far past the solved moments the accuracy sweep looks.
const EXTRA_MOMENTS: usize = 6;

impl<T: Real> StencilOperator<T> {
    /// Zero-order sampling operator: one node at the origin with unit weight.
    pub fn identity() -> Self {
        Self { derivative_order: 0, nodes: vec![T::zero()], weights: vec![T::one()], accuracy_order: usize::MAX }
    }

    pub fn derivative_order(&self) -> usize {
        self.derivative_order
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Measured order `p`: the unscaled derivative error is `O(h^p)`.
    /// The identity operator reports `usize::MAX` (it is exact).
    pub fn accuracy_order(&self) -> usize {
        self.accuracy_order
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index of the node at offset zero, if the stencil has one.
    pub fn center_index(&self) -> Option<usize> {
        self.nodes.iter().position(|c| c.is_zero())
    }

    /// Number of function evaluations this stencil needs when the value at the
    /// expansion point is already known. The identity operator always needs one.
    pub fn fresh_evaluations(&self) -> usize {
        if self.derivative_order == 0 {
            1
        } else {
            self.len() - usize::from(self.center_index().is_some())
        }
    }

    /// Residual of moment `m`: `sum_j w_j c_j^m / m! - delta(m, i)`.
    pub fn moment_residual(&self, m: usize) -> T {
        let (s, _) = moment(&self.nodes, &self.weights, m);
        if m == self.derivative_order {
            s - T::one()
        } else {
            s
        }
    }

    /// Largest absolute moment residual over `m = 0 .. i + accuracy_order - 1`.
    pub fn max_moment_residual(&self) -> T {
        let upper = self.derivative_order.saturating_add(self.accuracy_order.min(self.len() + EXTRA_MOMENTS));
        (0..upper).map(|m| self.moment_residual(m).abs()).fold(T::zero(), T::max)
    }

    /// Returns a copy with weight `j` shifted by `delta`. Exists so invariant
    /// checkers can be exercised against a deliberately broken operator.
    pub fn with_perturbed_weight(&self, j: usize, delta: T) -> Self {
        let mut out = self.clone();
        out.weights[j] += delta;
        out
    }

    /// `sum_j w_j f_j`, the estimate of `h^i f^(i)(t0)`.
    pub fn apply_scaled<S: AsRef<[T]>>(&self, samples: &[S]) -> Result<Vec<T>, DiffOpsError> {
        if samples.len() != self.nodes.len() {
            return Err(DiffOpsError::Shape { expected: self.nodes.len(), found: samples.len() });
        }
        let dim = samples[0].as_ref().len();
        let mut out = vec![T::zero(); dim];
        for (w, s) in self.weights.iter().zip(samples) {
            let s = s.as_ref();
            if s.len() != dim {
                return Err(DiffOpsError::Shape { expected: dim, found: s.len() });
            }
            for (o, v) in out.iter_mut().zip(s) {
                *o += *w * *v;
            }
        }
        Ok(out)
    }
}

fn moment<T: Real>(nodes: &[T], weights: &[T], m: usize) -> (T, T) {
    let mfact = crate::scalar::factorial::<T>(m);
    let mut sum = T::zero();
    let mut scale = T::zero();
    for (&c, &w) in nodes.iter().zip(weights) {
        let term = w * c.powi(m as i32) / mfact;
        sum += term;
        scale += term.abs();
    }
    (sum, scale)
}

/// Solves the Taylor-moment system for `nodes` and measures the accuracy order.
pub fn generate_weights<T: Real>(nodes: &[T], derivative_order: usize) -> Result<StencilOperator<T>, DiffOpsError> {
    let n = nodes.len();
    if n == 0 {
        return Err(DiffOpsError::InvalidStencil("empty node set".into()));
    }
    if derivative_order >= n {
        return Err(DiffOpsError::InvalidStencil(format!(
            "{n} nodes cannot approximate a derivative of order {derivative_order}"
        )));
    }
    for (a, &x) in nodes.iter().enumerate() {
        if !x.is_finite() {
            return Err(DiffOpsError::InvalidStencil("non-finite node".into()));
        }
        if nodes[a + 1..].contains(&x) {
            return Err(DiffOpsError::InvalidStencil(format!("duplicate node {x}")));
        }
    }
    if derivative_order == 0 && n == 1 && nodes[0].is_zero() {
        return Ok(StencilOperator::identity());
    }
    let moments = Matrix::from_fn(n, n, |m, j| nodes[j].powi(m as i32) / crate::scalar::factorial::<T>(m));
    let lu = Lu::factor(&moments)
        .map_err(|_| DiffOpsError::InvalidStencil("singular moment system".into()))?;
    let mut rhs = vec![T::zero(); n];
    rhs[derivative_order] = T::one();
    let weights = lu.solve(&rhs);

    let tol = T::epsilon() * T::lit(1e3);
    let mut first_bad = n + EXTRA_MOMENTS;
    for m in n..n + EXTRA_MOMENTS {
        let (s, scale) = moment(nodes, &weights, m);
        if s.abs() > tol * (scale + T::one()) {
            first_bad = m;
            break;
        }
    }
    Ok(StencilOperator { derivative_order, nodes: nodes.to_vec(), weights, accuracy_order: first_bad - derivative_order })
}

/// Symmetric node set `{±1/2, ±3/2, ..., ±(2m-1)/2}`, optionally with the origin.
pub fn symmetric_nodes<T: Real>(half_count: usize, with_center: bool) -> Vec<T> {
    let mut nodes: Vec<T> = Vec::with_capacity(2 * half_count + 1);
    for j in (1..=half_count).rev() {
        nodes.push(-T::from_usize_lossy(2 * j - 1) / T::lit(2.0));
    }
    if with_center {
        nodes.push(T::zero());
    }
    for j in 1..=half_count {
        nodes.push(T::from_usize_lossy(2 * j - 1) / T::lit(2.0));
    }
    nodes
}

/// The operator used for derivative order `i` when derivatives up to `q_max`
/// are required.
///
/// Order 0 is the identity. Higher orders use `{±1/2, ±3/2}` plus the origin,
/// widened by one symmetric pair at a time until the measured accuracy reaches
/// `q_max - i`. The origin sample is the already-known value at the expansion
/// point, so it costs no evaluation; for odd `i` its weight vanishes and the
/// node is dropped. With `q_max <= 5` every order needs exactly four fresh
/// evaluations.
pub fn default_stencil<T: Real>(derivative_order: usize, q_max: usize) -> Result<StencilOperator<T>, DiffOpsError> {
    if derivative_order >= q_max {
        return Err(DiffOpsError::OutOfRange { order: derivative_order, q_max });
    }
    if derivative_order == 0 {
        return Ok(StencilOperator::identity());
    }
    let target = q_max - derivative_order;
    let mut half = 2;
    loop {
        let nodes = symmetric_nodes::<T>(half, true);
        if nodes.len() > derivative_order {
            let op = generate_weights(&nodes, derivative_order)?;
            if op.accuracy_order >= target {
                if derivative_order % 2 == 1 {
                    return generate_weights(&symmetric_nodes::<T>(half, false), derivative_order);
                }
                return Ok(op);
            }
        }
        half += 1;
        if half > 64 {
            return Err(DiffOpsError::InvalidStencil(format!(
                "no symmetric stencil reaches accuracy {target} for order {derivative_order}"
            )));
        }
    }
}

/// Default stencils for orders `0 .. q_max - 1`, computed once.
#[derive(Debug, Clone)]
pub struct StencilBank<T> {
    q_max: usize,
    ops: Vec<StencilOperator<T>>,
}

impl<T: Real> StencilBank<T> {
    pub fn new(q_max: usize) -> Result<Self, DiffOpsError> {
        let ops = (0..q_max).map(|i| default_stencil(i, q_max)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { q_max, ops })
    }

    pub fn q_max(&self) -> usize {
        self.q_max
    }

    pub fn get(&self, derivative_order: usize) -> Result<&StencilOperator<T>, DiffOpsError> {
        self.ops.get(derivative_order).ok_or(DiffOpsError::OutOfRange { order: derivative_order, q_max: self.q_max })
    }

    /// Fresh evaluations needed to build derivatives up to order `q`:
    /// one at the expansion point plus the stencils of orders `1 .. q - 1`.
    pub fn cascade_cost(&self, q: usize) -> usize {
        1 + (1..q.min(self.q_max)).map(|i| self.ops[i].fresh_evaluations()).sum::<usize>()
    }

    pub fn iter(&self) -> impl Iterator<Item = &StencilOperator<T>> {
        self.ops.iter()
    }
}
