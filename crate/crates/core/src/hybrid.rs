//! Hybrid PWL/nonlinear system model, algebraic-loop resolution and the
//! decoupled derivative cascade.
//!
//! The PWL side is `x1' = A x1 + B1 u1 + B2 y`, with sensor rows
//! `u = C x1 + D1 u1 + D2 y` feeding the nonlinear blocks `x' = f(x, u)`,
//! `y = g(x, u)`. Derivatives of the PWL side follow an exact matrix recursion;
//! derivatives of the nonlinear side come from finite-difference stencils
//! applied along the polynomial paths built so far.

use std::sync::Arc;

use thiserror::Error;

use crate::diffops::{DiffOpsError, StencilBank};
use crate::linalg::{Lu, Matrix};
use crate::scalar::{factorial, norm_inf, Real};
use crate::sources::{SourceBank, SourceError};
use crate::taylor::TaylorCoefficients;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{block}: {message}")]
    Domain { block: String, message: String },
    #[error("{block}: invalid parameters: {message}")]
    Params { block: String, message: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("topology {key:#b}: {message}")]
pub struct TopologyError {
    pub key: u64,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HybridError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Stencil(#[from] DiffOpsError),
    #[error("algebraic loop did not converge after {iterations} iterations (residual {residual:e})")]
    LoopFailure { iterations: usize, residual: f64 },
    #[error("derivative cascade failed at order {order}: {reason}")]
    CascadeFailure { order: usize, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// A smooth nonlinear component `x' = f(x, u)`, `y = g(x, u)`.
pub trait NonlinearBlock<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn n_states(&self) -> usize;
    fn n_inputs(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn f(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<(), ModelError>;
    fn g(&self, x: &[T], u: &[T], y: &mut [T]) -> Result<(), ModelError>;
    /// True when `g` varies with `u`, i.e. an algebraic loop is possible.
    fn depends_on_input(&self) -> bool;

    fn state_names(&self) -> Vec<String> {
        (0..self.n_states()).map(|k| format!("{}.x{k}", self.name())).collect()
    }

    fn output_names(&self) -> Vec<String> {
        (0..self.n_outputs()).map(|k| format!("{}.y{k}", self.name())).collect()
    }
}

/// Several blocks viewed as one block-diagonal `f`/`g`.
#[derive(Clone, Default)]
pub struct BlockStack<T: Real> {
    blocks: Vec<Arc<dyn NonlinearBlock<T>>>,
    x_off: Vec<usize>,
    u_off: Vec<usize>,
    y_off: Vec<usize>,
}

impl<T: Real> std::fmt::Debug for BlockStack<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.blocks.iter().map(|b| b.name())).finish()
    }
}

impl<T: Real> BlockStack<T> {
    pub fn new(blocks: Vec<Arc<dyn NonlinearBlock<T>>>) -> Self {
        let mut s = Self { blocks: Vec::new(), x_off: vec![0], u_off: vec![0], y_off: vec![0] };
        for b in blocks {
            s.push(b);
        }
        s
    }

    pub fn push(&mut self, block: Arc<dyn NonlinearBlock<T>>) {
        if self.x_off.is_empty() {
            self.x_off.push(0);
            self.u_off.push(0);
            self.y_off.push(0);
        }
        self.x_off.push(self.n_states() + block.n_states());
        self.u_off.push(self.n_inputs() + block.n_inputs());
        self.y_off.push(self.n_outputs() + block.n_outputs());
        self.blocks.push(block);
    }

    pub fn blocks(&self) -> &[Arc<dyn NonlinearBlock<T>>] {
        &self.blocks
    }

    pub fn n_states(&self) -> usize {
        self.x_off.last().copied().unwrap_or(0)
    }

    pub fn n_inputs(&self) -> usize {
        self.u_off.last().copied().unwrap_or(0)
    }

    pub fn n_outputs(&self) -> usize {
        self.y_off.last().copied().unwrap_or(0)
    }

    pub fn depends_on_input(&self) -> bool {
        self.blocks.iter().any(|b| b.depends_on_input())
    }

    /// Offset of block `k`'s states in the concatenated vector.
    pub fn state_offset(&self, k: usize) -> usize {
        self.x_off[k]
    }

    pub fn input_offset(&self, k: usize) -> usize {
        self.u_off[k]
    }

    pub fn output_offset(&self, k: usize) -> usize {
        self.y_off[k]
    }

    pub fn f(&self, x: &[T], u: &[T], dx: &mut [T]) -> Result<(), ModelError> {
        for (k, b) in self.blocks.iter().enumerate() {
            b.f(
                &x[self.x_off[k]..self.x_off[k + 1]],
                &u[self.u_off[k]..self.u_off[k + 1]],
                &mut dx[self.x_off[k]..self.x_off[k + 1]],
            )?;
        }
        Ok(())
    }

    pub fn g(&self, x: &[T], u: &[T], y: &mut [T]) -> Result<(), ModelError> {
        for (k, b) in self.blocks.iter().enumerate() {
            b.g(
                &x[self.x_off[k]..self.x_off[k + 1]],
                &u[self.u_off[k]..self.u_off[k + 1]],
                &mut y[self.y_off[k]..self.y_off[k + 1]],
            )?;
        }
        Ok(())
    }

    pub fn state_names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.state_names()).collect()
    }

    pub fn output_names(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.output_names()).collect()
    }
}

/// State-space matrices of one switch permutation, plus probe rows
/// `p = Px x1 + Pu u1 + Py y` used only for recording.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyMatrices<T> {
    pub a: Matrix<T>,
    pub b1: Matrix<T>,
    pub b2: Matrix<T>,
    pub c: Matrix<T>,
    pub d1: Matrix<T>,
    pub d2: Matrix<T>,
    pub px: Matrix<T>,
    pub pu: Matrix<T>,
    pub py: Matrix<T>,
}

impl<T: Real> TopologyMatrices<T> {
    /// Matrices without probes.
    pub fn new(a: Matrix<T>, b1: Matrix<T>, b2: Matrix<T>, c: Matrix<T>, d1: Matrix<T>, d2: Matrix<T>) -> Self {
        let (n1, l1, m) = (a.rows(), b1.cols(), b2.cols());
        Self { a, b1, b2, c, d1, d2, px: Matrix::zeros(0, n1), pu: Matrix::zeros(0, l1), py: Matrix::zeros(0, m) }
    }

    /// Pure linear system `x' = A x`.
    pub fn autonomous(a: Matrix<T>) -> Self {
        let n = a.rows();
        Self::new(a, Matrix::zeros(n, 0), Matrix::zeros(n, 0), Matrix::zeros(0, n), Matrix::zeros(0, 0), Matrix::zeros(0, 0))
    }

    pub fn n_states(&self) -> usize {
        self.a.rows()
    }

    pub fn n_sources(&self) -> usize {
        self.b1.cols()
    }

    pub fn n_sensors(&self) -> usize {
        self.c.rows()
    }

    pub fn n_ports(&self) -> usize {
        self.b2.cols()
    }

    pub fn n_probes(&self) -> usize {
        self.px.rows()
    }

    pub fn check_dims(&self, n1: usize, l1: usize, l_nl: usize, m_nl: usize) -> Result<(), String> {
        let checks = [
            ("A", &self.a, n1, n1),
            ("B1", &self.b1, n1, l1),
            ("B2", &self.b2, n1, m_nl),
            ("C", &self.c, l_nl, n1),
            ("D1", &self.d1, l_nl, l1),
            ("D2", &self.d2, l_nl, m_nl),
            ("Px", &self.px, self.px.rows(), n1),
            ("Pu", &self.pu, self.px.rows(), l1),
            ("Py", &self.py, self.px.rows(), m_nl),
        ];
        for (name, m, r, c) in checks {
            if m.rows() != r || m.cols() != c {
                return Err(format!("{name} is {}x{}, expected {r}x{c}", m.rows(), m.cols()));
            }
        }
        Ok(())
    }

    /// `C x1 + D1 u1`, the loop-independent part of the sensor vector.
    pub fn sensor_base(&self, x1: &[T], u1: &[T]) -> Vec<T> {
        let mut u = self.c.mul_vec(x1);
        self.d1.mul_add_into(u1, &mut u);
        u
    }

    /// `A x1 + B1 u1 + B2 y`.
    pub fn pwl_rhs(&self, x1: &[T], u1: &[T], y: &[T]) -> Vec<T> {
        let mut dx = self.a.mul_vec(x1);
        self.b1.mul_add_into(u1, &mut dx);
        self.b2.mul_add_into(y, &mut dx);
        dx
    }

    pub fn probes(&self, x1: &[T], u1: &[T], y: &[T]) -> Vec<T> {
        let mut p = self.px.mul_vec(x1);
        self.pu.mul_add_into(u1, &mut p);
        self.py.mul_add_into(y, &mut p);
        p
    }
}

/// The switched linear network: one matrix set per switch bitmask.
pub trait PwlNetwork<T: Real>: Send + Sync {
    fn n_states(&self) -> usize;
    fn n_switches(&self) -> usize;
    fn matrices(&self, key: u64) -> Result<Arc<TopologyMatrices<T>>, TopologyError>;

    fn state_names(&self) -> Vec<String> {
        (0..self.n_states()).map(|k| format!("x{k}")).collect()
    }

    fn probe_names(&self) -> Vec<String> {
        Vec::new()
    }

    /// Initial PWL state (capacitor voltages, inductor currents).
    fn initial_state(&self) -> Vec<T> {
        vec![T::zero(); self.n_states()]
    }
}

/// A network with a single topology, used for hand-built systems.
#[derive(Debug, Clone)]
pub struct FixedTopology<T> {
    mats: Arc<TopologyMatrices<T>>,
}

impl<T: Real> FixedTopology<T> {
    pub fn new(mats: TopologyMatrices<T>) -> Self {
        Self { mats: Arc::new(mats) }
    }
}

impl<T: Real> PwlNetwork<T> for FixedTopology<T> {
    fn n_states(&self) -> usize {
        self.mats.n_states()
    }

    fn n_switches(&self) -> usize {
        0
    }

    fn matrices(&self, key: u64) -> Result<Arc<TopologyMatrices<T>>, TopologyError> {
        if key != 0 {
            return Err(TopologyError { key, message: "network has no switches".into() });
        }
        Ok(self.mats.clone())
    }
}

/// Loop-solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopOptions<T> {
    /// Residual tolerance relative to `1 + ||y||`.
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for LoopOptions<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-10).max(T::lit(64.0) * T::epsilon()), max_iter: 50 }
    }
}

/// Function-evaluation counters. `f` counts state-function evaluations of the
/// stacked block; `g` counts output-function evaluations (loop iterations and
/// Jacobian columns included).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounters {
    pub f: usize,
    pub g: usize,
    pub loop_iterations: usize,
}

impl EvalCounters {
    pub fn add(&mut self, other: &EvalCounters) {
        self.f += other.f;
        self.g += other.g;
        self.loop_iterations += other.loop_iterations;
    }
}

/// Complete hybrid model: network, nonlinear blocks and independent sources.
#[derive(Clone)]
pub struct HybridSystem<T: Real> {
    network: Arc<dyn PwlNetwork<T>>,
    blocks: BlockStack<T>,
    sources: SourceBank<T>,
    loop_opts: LoopOptions<T>,
}

impl<T: Real> std::fmt::Debug for HybridSystem<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridSystem")
            .field("n1", &self.network.n_states())
            .field("blocks", &self.blocks)
            .field("sources", &self.sources.len())
            .finish()
    }
}

impl<T: Real> HybridSystem<T> {
    /// Validates dimensions against the all-open topology.
    pub fn new(network: Arc<dyn PwlNetwork<T>>, blocks: BlockStack<T>, sources: SourceBank<T>) -> Result<Self, HybridError> {
        let sys = Self { network, blocks, sources, loop_opts: LoopOptions::default() };
        sys.matrices(0)?;
        Ok(sys)
    }

    /// A system with no PWL part.
    pub fn nonlinear_only(blocks: BlockStack<T>) -> Result<Self, HybridError> {
        let (l, m) = (blocks.n_inputs(), blocks.n_outputs());
        let mats = TopologyMatrices::new(
            Matrix::zeros(0, 0),
            Matrix::zeros(0, 0),
            Matrix::zeros(0, m),
            Matrix::zeros(l, 0),
            Matrix::zeros(l, 0),
            Matrix::zeros(l, m),
        );
        Self::new(Arc::new(FixedTopology::new(mats)), blocks, SourceBank::default())
    }

    pub fn with_loop_options(mut self, opts: LoopOptions<T>) -> Self {
        self.loop_opts = opts;
        self
    }

    pub fn network(&self) -> &Arc<dyn PwlNetwork<T>> {
        &self.network
    }

    pub fn blocks(&self) -> &BlockStack<T> {
        &self.blocks
    }

    pub fn sources(&self) -> &SourceBank<T> {
        &self.sources
    }

    pub fn loop_options(&self) -> LoopOptions<T> {
        self.loop_opts
    }

    pub fn n_pwl(&self) -> usize {
        self.network.n_states()
    }

    pub fn n_nl(&self) -> usize {
        self.blocks.n_states()
    }

    /// Fetches and dimension-checks the matrices for `key`.
    pub fn matrices(&self, key: u64) -> Result<Arc<TopologyMatrices<T>>, HybridError> {
        let m = self.network.matrices(key)?;
        m.check_dims(self.n_pwl(), self.sources.len(), self.blocks.n_inputs(), self.blocks.n_outputs())
            .map_err(HybridError::Dimension)?;
        Ok(m)
    }

    /// State names in `[x1, x_nl]` order.
    pub fn state_names(&self) -> Vec<String> {
        let mut n = self.network.state_names();
        n.extend(self.blocks.state_names());
        n
    }

    pub fn initial_state(&self, t: T, topology: u64, x_nl: Vec<T>) -> Result<HybridState<T>, HybridError> {
        HybridState::new(self, t, self.network.initial_state(), x_nl, topology)
    }
}

/// Point in the hybrid state space.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState<T> {
    pub t: T,
    pub x1: Vec<T>,
    pub x_nl: Vec<T>,
    pub topology: u64,
}

impl<T: Real> HybridState<T> {
    pub fn new(sys: &HybridSystem<T>, t: T, x1: Vec<T>, x_nl: Vec<T>, topology: u64) -> Result<Self, HybridError> {
        if x1.len() != sys.n_pwl() || x_nl.len() != sys.n_nl() {
            return Err(HybridError::Dimension(format!(
                "state has {} PWL and {} nonlinear entries, system needs {} and {}",
                x1.len(),
                x_nl.len(),
                sys.n_pwl(),
                sys.n_nl()
            )));
        }
        if !t.is_finite() {
            return Err(HybridError::Dimension("state time is not finite".into()));
        }
        Ok(Self { t, x1, x_nl, topology })
    }

    /// `[x1, x_nl]` concatenated.
    pub fn stacked(&self) -> Vec<T> {
        let mut v = self.x1.clone();
        v.extend_from_slice(&self.x_nl);
        v
    }
}

/// Resolves `y = g(x, C x1 + D1 u1 + D2 y)` by damped Newton with a
/// finite-difference Jacobian that is kept between calls and refreshed only
/// when it stops reducing the residual.
#[derive(Debug, Clone)]
pub struct LoopSolver<T> {
    opts: LoopOptions<T>,
    jacobian: Option<Lu<T>>,
}

impl<T: Real> LoopSolver<T> {
    pub fn new(opts: LoopOptions<T>) -> Self {
        Self { opts, jacobian: None }
    }

    /// Drops the cached Jacobian, e.g. after a topology change.
    pub fn reset(&mut self) {
        self.jacobian = None;
    }

    fn residual(
        blocks: &BlockStack<T>,
        mats: &TopologyMatrices<T>,
        x_nl: &[T],
        base: &[T],
        y: &[T],
        counters: &mut EvalCounters,
    ) -> Result<(Vec<T>, Vec<T>), ModelError> {
        let mut u = base.to_vec();
        mats.d2.mul_add_into(y, &mut u);
        let mut gy = vec![T::zero(); y.len()];
        blocks.g(x_nl, &u, &mut gy)?;
        counters.g += 1;
        let r = y.iter().zip(&gy).map(|(&a, &b)| a - b).collect();
        Ok((r, u))
    }

    fn refresh_jacobian(
        &mut self,
        blocks: &BlockStack<T>,
        mats: &TopologyMatrices<T>,
        x_nl: &[T],
        base: &[T],
        y: &[T],
        r: &[T],
        counters: &mut EvalCounters,
    ) -> Result<(), HybridError> {
        let m = y.len();
        let sqrt_eps = T::epsilon().sqrt();
        let mut jac = Matrix::zeros(m, m);
        let mut yp = y.to_vec();
        for k in 0..m {
            let dy = sqrt_eps * (T::one() + y[k].abs());
            yp[k] = y[k] + dy;
            let (rp, _) = Self::residual(blocks, mats, x_nl, base, &yp, counters)?;
            yp[k] = y[k];
            for i in 0..m {
                jac[(i, k)] = (rp[i] - r[i]) / dy;
            }
        }
        self.jacobian = Some(Lu::factor(&jac).map_err(|_| HybridError::LoopFailure {
            iterations: 0,
            residual: norm_inf(r).to_f64_lossy(),
        })?);
        Ok(())
    }

    /// Returns `(y, u)`. Without a loop (`D2 = 0` or input-independent `g`)
    /// this is one direct evaluation.
    pub fn solve(
        &mut self,
        blocks: &BlockStack<T>,
        mats: &TopologyMatrices<T>,
        x_nl: &[T],
        x1: &[T],
        u1: &[T],
        warm_start: Option<&[T]>,
        counters: &mut EvalCounters,
    ) -> Result<(Vec<T>, Vec<T>), HybridError> {
        let base = mats.sensor_base(x1, u1);
        let m = blocks.n_outputs();
        if m == 0 {
            return Ok((Vec::new(), base));
        }
        if !blocks.depends_on_input() || mats.d2.is_zero() {
            let mut y = vec![T::zero(); m];
            blocks.g(x_nl, &base, &mut y)?;
            counters.g += 1;
            let mut u = base;
            mats.d2.mul_add_into(&y, &mut u);
            return Ok((y, u));
        }

        let mut y = match warm_start {
            Some(w) if w.len() == m && w.iter().all(|v| v.is_finite()) => w.to_vec(),
            _ => {
                let mut y0 = vec![T::zero(); m];
                blocks.g(x_nl, &base, &mut y0)?;
                counters.g += 1;
                y0
            }
        };
        let (mut r, mut u) = Self::residual(blocks, mats, x_nl, &base, &y, counters)?;
        let mut rn = norm_inf(&r);
        let mut fresh = false;
        for it in 0..=self.opts.max_iter {
            if rn <= self.opts.tol * (T::one() + norm_inf(&y)) {
                return Ok((y, u));
            }
            if it == self.opts.max_iter {
                break;
            }
            counters.loop_iterations += 1;
            if self.jacobian.is_none() {
                self.refresh_jacobian(blocks, mats, x_nl, &base, &y, &r, counters)?;
                fresh = true;
            }
            let step = self.jacobian.as_ref().expect("jacobian present").solve(&r);
            let mut lambda = T::one();
            let mut accepted = false;
            for _ in 0..12 {
                let trial: Vec<T> = y.iter().zip(&step).map(|(&a, &d)| a - lambda * d).collect();
                match Self::residual(blocks, mats, x_nl, &base, &trial, counters) {
                    Ok((rt, ut)) => {
                        let rtn = norm_inf(&rt);
                        if rtn.is_finite() && rtn < rn {
                            y = trial;
                            r = rt;
                            u = ut;
                            rn = rtn;
                            accepted = true;
                            break;
                        }
                    }
                    Err(e) if lambda == T::one() && fresh => return Err(e.into()),
                    Err(_) => {}
                }
                lambda *= T::lit(0.5);
            }
            if !accepted {
                if fresh {
                    break;
                }
                self.jacobian = None;
            } else {
                fresh = false;
            }
        }
        Err(HybridError::LoopFailure { iterations: self.opts.max_iter, residual: rn.to_f64_lossy() })
    }
}

/// One-shot loop solve with a fresh solver.
pub fn solve_algebraic_loop<T: Real>(
    sys: &HybridSystem<T>,
    mats: &TopologyMatrices<T>,
    x_nl: &[T],
    x1: &[T],
    u1: &[T],
    warm_start: Option<&[T]>,
    counters: &mut EvalCounters,
) -> Result<(Vec<T>, Vec<T>), HybridError> {
    LoopSolver::new(sys.loop_opts).solve(&sys.blocks, mats, x_nl, x1, u1, warm_start, counters)
}

/// Infinity norm of `y - g(x, C x1 + D1 u1 + D2 y)`.
pub fn loop_residual<T: Real>(
    sys: &HybridSystem<T>,
    mats: &TopologyMatrices<T>,
    x_nl: &[T],
    x1: &[T],
    u1: &[T],
    y: &[T],
) -> Result<T, HybridError> {
    let mut u = mats.sensor_base(x1, u1);
    mats.d2.mul_add_into(y, &mut u);
    let mut gy = vec![T::zero(); y.len()];
    sys.blocks.g(x_nl, &u, &mut gy)?;
    Ok(y.iter().zip(&gy).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max))
}

/// Interface values and first derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEval<T> {
    pub t: T,
    pub u1: Vec<T>,
    pub y: Vec<T>,
    pub u: Vec<T>,
    pub dx_nl: Vec<T>,
    pub dx1: Vec<T>,
}

impl<T: Real> PointEval<T> {
    /// `max(||x_nl'||, ||x1'||)`.
    pub fn derivative_norm(&self) -> T {
        norm_inf(&self.dx_nl).max(norm_inf(&self.dx1))
    }

    pub fn is_finite(&self) -> bool {
        self.dx_nl.iter().chain(&self.dx1).chain(&self.y).all(|v| v.is_finite())
    }
}

/// Loop solve plus one evaluation of `f` at a state, with `u1` supplied.
pub fn evaluate_point<T: Real>(
    sys: &HybridSystem<T>,
    mats: &TopologyMatrices<T>,
    solver: &mut LoopSolver<T>,
    t: T,
    x1: &[T],
    x_nl: &[T],
    u1: Vec<T>,
    warm_start: Option<&[T]>,
    counters: &mut EvalCounters,
) -> Result<PointEval<T>, HybridError> {
    let (y, u) = solver.solve(&sys.blocks, mats, x_nl, x1, &u1, warm_start, counters)?;
    let mut dx_nl = vec![T::zero(); x_nl.len()];
    if !x_nl.is_empty() {
        sys.blocks.f(x_nl, &u, &mut dx_nl)?;
        counters.f += 1;
    }
    let dx1 = mats.pwl_rhs(x1, &u1, &y);
    Ok(PointEval { t, u1, y, u, dx_nl, dx1 })
}

/// Loop solve and first derivatives at `state`, sources taken on the segment
/// starting at `state.t`.
pub fn first_derivatives<T: Real>(
    sys: &HybridSystem<T>,
    state: &HybridState<T>,
    counters: &mut EvalCounters,
) -> Result<PointEval<T>, HybridError> {
    let mats = sys.matrices(state.topology)?;
    let u1 = sys.sources.values(state.t, state.t);
    let mut solver = LoopSolver::new(sys.loop_opts);
    evaluate_point(sys, &mats, &mut solver, state.t, &state.x1, &state.x_nl, u1, None, counters)
}

/// Normalized Taylor coefficients of every interface quantity at one point.
///
/// After `order()` = `q`, `x1` and `x_nl` carry coefficients `0..=q` while
/// `u`, `y` carry `0..q`. `u1` is analytic and carries `0..=q_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeSet<T> {
    pub t0: T,
    pub h: T,
    pub x1: Vec<Vec<T>>,
    pub x_nl: Vec<Vec<T>>,
    pub u: Vec<Vec<T>>,
    pub y: Vec<Vec<T>>,
    pub u1: Vec<Vec<T>>,
    /// `f(x0, u0)`, reused as the center sample of even-order stencils.
    f0: Vec<T>,
}

impl<T: Real> DerivativeSet<T> {
    pub fn order(&self) -> usize {
        self.x1.len() - 1
    }

    /// Stacked `[x1, x_nl]` coefficients.
    pub fn state_coefficients(&self) -> TaylorCoefficients<T> {
        let coeffs = self
            .x1
            .iter()
            .zip(&self.x_nl)
            .map(|(a, b)| {
                let mut c = a.clone();
                c.extend_from_slice(b);
                c
            })
            .collect();
        TaylorCoefficients::from_coeffs(self.t0, coeffs)
    }
}

fn poly<T: Real>(coeffs: &[Vec<T>], dt: T, up_to: usize) -> Vec<T> {
    let mut out = coeffs[up_to].clone();
    for k in (0..up_to).rev() {
        for (o, c) in out.iter_mut().zip(&coeffs[k]) {
            *o = *o * dt + *c;
        }
    }
    out
}

fn linear_combination<T: Real>(weights: &[T], samples: &[Vec<T>], scale: T) -> Vec<T> {
    let dim = samples.first().map_or(0, Vec::len);
    let mut out = vec![T::zero(); dim];
    for (w, s) in weights.iter().zip(samples) {
        for (o, v) in out.iter_mut().zip(s) {
            *o += *w * *v;
        }
    }
    for o in &mut out {
        *o *= scale;
    }
    out
}

fn all_finite_rows<T: Real>(rows: &[&[T]]) -> bool {
    rows.iter().all(|r| r.iter().all(|v| v.is_finite()))
}

/// Incremental derivative cascade at one point: orders are added one at a time
/// so a caller can stop as soon as a higher order stops paying off.
pub struct Cascade<'a, T: Real> {
    sys: &'a HybridSystem<T>,
    mats: &'a TopologyMatrices<T>,
    bank: &'a StencilBank<T>,
    solver: LoopSolver<T>,
    set: DerivativeSet<T>,
    counters: EvalCounters,
}

impl<'a, T: Real> Cascade<'a, T> {
    /// Starts from an already evaluated point (order 0 solved, first
    /// derivatives known). `u1` holds analytic source coefficients up to the
    /// bank's `q_max`.
    pub fn start(
        sys: &'a HybridSystem<T>,
        mats: &'a TopologyMatrices<T>,
        bank: &'a StencilBank<T>,
        state: &HybridState<T>,
        point: &PointEval<T>,
        u1: Vec<Vec<T>>,
        h: T,
    ) -> Result<Self, HybridError> {
        if !(h > T::zero()) {
            return Err(HybridError::CascadeFailure { order: 0, reason: format!("differentiation step {h} is not positive") });
        }
        if u1.len() < bank.q_max() || u1.iter().any(|c| c.len() != sys.sources.len()) {
            return Err(HybridError::Dimension(format!(
                "source coefficients need {} orders of {} sources",
                bank.q_max(),
                sys.sources.len()
            )));
        }
        if !point.is_finite() {
            return Err(HybridError::CascadeFailure { order: 0, reason: "non-finite first derivative".into() });
        }
        let set = DerivativeSet {
            t0: state.t,
            h,
            x1: vec![state.x1.clone(), point.dx1.clone()],
            x_nl: vec![state.x_nl.clone(), point.dx_nl.clone()],
            u: vec![point.u.clone()],
            y: vec![point.y.clone()],
            u1,
            f0: point.dx_nl.clone(),
        };
        Ok(Self { sys, mats, bank, solver: LoopSolver::new(sys.loop_opts), set, counters: EvalCounters::default() })
    }

    pub fn order(&self) -> usize {
        self.set.order()
    }

    /// Evaluations spent by `extend` calls so far (the order-0 point is not included).
    pub fn counters(&self) -> EvalCounters {
        self.counters
    }

    pub fn set(&self) -> &DerivativeSet<T> {
        &self.set
    }

    pub fn into_set(self) -> DerivativeSet<T> {
        self.set
    }

    /// Adds one order: with state coefficients known to `i`, computes `y`, `u`
    /// at order `i` and the state coefficients at order `i + 1`.
    pub fn extend(&mut self) -> Result<(), HybridError> {
        let i = self.order();
        if i >= self.bank.q_max() {
            return Err(HybridError::Stencil(DiffOpsError::OutOfRange { order: i, q_max: self.bank.q_max() }));
        }
        let op = self.bank.get(i)?;
        let s = &mut self.set;
        let h = s.h;
        let blocks = &self.sys.blocks;
        let (n_nl, m) = (blocks.n_states(), blocks.n_outputs());
        let center = op.center_index();

        // paths of degree i through the known coefficients
        let nodes: Vec<(Vec<T>, Vec<T>, Vec<T>, T)> = op
            .nodes()
            .iter()
            .map(|&c| {
                let dt = c * h;
                (poly(&s.x_nl, dt, i), poly(&s.x1, dt, i), poly(&s.u1, dt, i), dt)
            })
            .collect();

        // step 1: output derivative through the loop-resolved g
        let y_i = if m == 0 {
            Vec::new()
        } else {
            let mut ys = Vec::with_capacity(nodes.len());
            for (j, (xn, x1, u1, dt)) in nodes.iter().enumerate() {
                if Some(j) == center {
                    ys.push(s.y[0].clone());
                    continue;
                }
                let warm = poly(&s.y, *dt, i - 1);
                let (y, _) = self.solver.solve(blocks, self.mats, xn, x1, u1, Some(&warm), &mut self.counters).map_err(
                    |e| match e {
                        HybridError::LoopFailure { .. } | HybridError::Model(_) => {
                            HybridError::CascadeFailure { order: i, reason: e.to_string() }
                        }
                        other => other,
                    },
                )?;
                ys.push(y);
            }
            let scale = T::one() / (h.powi(i as i32) * factorial::<T>(i));
            linear_combination(op.weights(), &ys, scale)
        };

        // step 2: sensor coefficients
        let mut u_i = self.mats.c.mul_vec(&s.x1[i]);
        self.mats.d1.mul_add_into(&s.u1[i], &mut u_i);
        self.mats.d2.mul_add_into(&y_i, &mut u_i);
        s.y.push(y_i);
        s.u.push(u_i);

        // step 3: state coefficients at i + 1
        let xnl_next = if n_nl == 0 {
            Vec::new()
        } else {
            let mut fs = Vec::with_capacity(nodes.len());
            for (j, (xn, _, _, dt)) in nodes.iter().enumerate() {
                if Some(j) == center {
                    fs.push(s.f0.clone());
                    continue;
                }
                let us = poly(&s.u, *dt, i);
                let mut dx = vec![T::zero(); n_nl];
                blocks
                    .f(xn, &us, &mut dx)
                    .map_err(|e| HybridError::CascadeFailure { order: i, reason: e.to_string() })?;
                self.counters.f += 1;
                fs.push(dx);
            }
            let scale = T::one() / (h.powi(i as i32) * factorial::<T>(i + 1));
            linear_combination(op.weights(), &fs, scale)
        };
        let inv = T::one() / T::from_usize_lossy(i + 1);
        let x1_next: Vec<T> = self.mats.pwl_rhs(&s.x1[i], &s.u1[i], &s.y[i]).into_iter().map(|v| v * inv).collect();

        if !all_finite_rows(&[&xnl_next, &x1_next, &s.y[i], &s.u[i]]) {
            return Err(HybridError::CascadeFailure { order: i, reason: "non-finite derivative".into() });
        }
        s.x_nl.push(xnl_next);
        s.x1.push(x1_next);
        Ok(())
    }

    pub fn extend_to(&mut self, q: usize) -> Result<(), HybridError> {
        while self.order() < q {
            self.extend()?;
        }
        Ok(())
    }
}

/// Full cascade to order `q` at `state` with differentiation step `h`.
/// Returns the coefficients and the evaluation count including the order-0 point.
pub fn derivative_cascade<T: Real>(
    sys: &HybridSystem<T>,
    bank: &StencilBank<T>,
    state: &HybridState<T>,
    q: usize,
    h: T,
    u1: Vec<Vec<T>>,
) -> Result<(DerivativeSet<T>, EvalCounters), HybridError> {
    if q == 0 || q > bank.q_max() {
        return Err(HybridError::Stencil(DiffOpsError::OutOfRange { order: q, q_max: bank.q_max() }));
    }
    let mats = sys.matrices(state.topology)?;
    let mut counters = EvalCounters::default();
    let mut solver = LoopSolver::new(sys.loop_opts);
    let point = evaluate_point(sys, &mats, &mut solver, state.t, &state.x1, &state.x_nl, u1[0].clone(), None, &mut counters)?;
    let mut cascade = Cascade::start(sys, &mats, bank, state, &point, u1, h)?;
    cascade.extend_to(q)?;
    counters.add(&cascade.counters());
    Ok((cascade.into_set(), counters))
}
