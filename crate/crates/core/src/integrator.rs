//! The flexible-order Taylor integration loop: differentiation step, lazy
//! derivative cascade, order/step selection, event-truncated stepping and
//! dense recording.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::diffops::StencilBank;
use crate::hybrid::{
    evaluate_point, loop_residual, Cascade, EvalCounters, HybridError, HybridState, HybridSystem, LoopSolver, PointEval,
    TopologyMatrices,
};
use crate::scalar::{norm_inf, Real};
use crate::sources::{EventSchedule, SourceError};
use crate::taylor::{predicted_step_at, select_order_and_step, StepController, TaylorCoefficients, TaylorError};
use crate::waveform::{output_grid, Recorder, Signal, Waveform};

/// Lower bound on the differentiation step as a fraction of the previous
/// step's unclipped size. Keeps roundoff in high-order stencils bounded when
/// the tolerance-based value is far below the integration step.
pub const DIFF_STEP_FLOOR: f64 = 0.125;

/// Largest number of step halvings tried on one rejected step.
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrateError {
    #[error("at t = {t:e} s: {source}")]
    Hybrid { t: f64, source: HybridError },
    #[error("at t = {t:e} s: {source} (state inf-norm {state_norm:e}; the system may be too stiff for an explicit method)")]
    Step { t: f64, state_norm: f64, source: TaylorError },
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("invalid run: {0}")]
    Setup(String),
}

/// One applied gate event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventRecord {
    pub time: f64,
    pub before: u64,
    pub after: u64,
    /// `||x(t_e-) - x(t_e+)||_inf`.
    pub state_jump: f64,
    /// Loop residual after the re-solve in the new topology.
    pub loop_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub solver: String,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub f_evals: usize,
    pub g_evals: usize,
    pub loop_iterations: usize,
    pub events: usize,
    /// Accepted steps per order, indexed by order.
    pub order_histogram: Vec<usize>,
    pub average_order: f64,
    pub wall_ms: f64,
    /// Evaluations of `f` attributed to each accepted step.
    #[serde(skip)]
    pub step_f_evals: Vec<usize>,
    /// Evaluations of `f` spent on rejected attempts.
    #[serde(skip)]
    pub rejected_f_evals: usize,
    #[serde(skip)]
    pub event_log: Vec<EventRecord>,
}

impl RunStats {
    pub fn new(solver: &str) -> Self {
        Self { solver: solver.to_string(), ..Default::default() }
    }

    pub fn record_order(&mut self, q: usize) {
        if self.order_histogram.len() <= q {
            self.order_histogram.resize(q + 1, 0);
        }
        self.order_histogram[q] += 1;
    }

    pub fn finalize(&mut self, counters: &EvalCounters, started: Instant) {
        self.f_evals = counters.f;
        self.g_evals = counters.g;
        self.loop_iterations = counters.loop_iterations;
        let n: usize = self.order_histogram.iter().sum();
        let weighted: usize = self.order_histogram.iter().enumerate().map(|(q, c)| q * c).sum();
        self.average_order = if n == 0 { 0.0 } else { weighted as f64 / n as f64 };
        self.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    }
}

/// Everything one integration needs.
#[derive(Debug, Clone)]
pub struct SimulationRun<T: Real> {
    pub system: HybridSystem<T>,
    pub schedule: EventSchedule<T>,
    pub controller: StepController<T>,
    pub initial: HybridState<T>,
    pub t_end: T,
    pub output_period: T,
    pub signals: Vec<(String, Signal)>,
}

impl<T: Real> SimulationRun<T> {
    /// Adds step-source edges to the schedule as markers and validates the run.
    pub fn new(
        system: HybridSystem<T>,
        schedule: EventSchedule<T>,
        controller: StepController<T>,
        initial: HybridState<T>,
        t_end: T,
        output_period: T,
        signals: Vec<(String, Signal)>,
    ) -> Result<Self, IntegrateError> {
        let markers = system.sources().step_times(initial.t, t_end);
        let schedule = schedule.with_markers(&markers);
        let run = Self { system, schedule, controller, initial, t_end, output_period, signals };
        run.validate()?;
        Ok(run)
    }

    pub fn t_start(&self) -> T {
        self.initial.t
    }

    pub fn validate(&self) -> Result<(), IntegrateError> {
        if !(self.t_end > self.t_start()) {
            return Err(IntegrateError::Setup("t_end must exceed t_start".into()));
        }
        if !(self.output_period > T::zero()) {
            return Err(IntegrateError::Setup("output period must be positive".into()));
        }
        self.controller
            .validate()
            .map_err(|e| IntegrateError::Setup(e.to_string()))?;
        if let Some(q) = self.controller.forced_order {
            if q > self.controller.q_max {
                return Err(IntegrateError::Setup(format!("forced order {q} exceeds q_max")));
            }
        }
        self.schedule.check_span(self.t_start(), self.t_end)?;
        Ok(())
    }

    /// All states as signals, named after the system.
    pub fn all_states(system: &HybridSystem<T>) -> Vec<(String, Signal)> {
        system.state_names().into_iter().enumerate().map(|(i, n)| (n, Signal::State(i))).collect()
    }
}

/// Differentiation step `Tok / max(||x_nl'||, ||x1'||)`, or `h_max` when the
/// system is quiescent.
pub fn diff_step<T: Real>(tok: T, dx_nl: &[T], dx1: &[T], h_max: T) -> Result<T, TaylorError> {
    let (a, b) = (norm_inf(dx_nl), norm_inf(dx1));
    let m = a.max(b);
    if !(a.is_finite() && b.is_finite()) {
        return Err(TaylorError::NumericalBlowup);
    }
    if m < T::lit(1e-12) {
        return Ok(h_max);
    }
    Ok(tok / m)
}

/// Applies every scheduled event at `t` starting from `*cursor`, recording each.
pub(crate) fn apply_events<T: Real>(
    sys: &HybridSystem<T>,
    schedule: &EventSchedule<T>,
    cursor: &mut usize,
    t: T,
    topology: &mut u64,
    x1: &[T],
    x_nl: &[T],
    x_minus: &[T],
    stats: &mut RunStats,
) -> Result<bool, IntegrateError> {
    let before = *topology;
    let mut any = false;
    while let Some(e) = schedule.events().get(*cursor) {
        if e.time > t {
            break;
        }
        *topology = e.apply(*topology);
        *cursor += 1;
        any = true;
    }
    if any {
        stats.events += 1;
        let mats = sys.matrices(*topology).map_err(|e| IntegrateError::Hybrid { t: t.to_f64_lossy(), source: e })?;
        let u1 = sys.sources().values(t, t);
        let mut scratch = EvalCounters::default();
        let (y, _) = LoopSolver::new(sys.loop_options())
            .solve(sys.blocks(), &mats, x_nl, x1, &u1, None, &mut scratch)
            .map_err(|e| IntegrateError::Hybrid { t: t.to_f64_lossy(), source: e })?;
        let residual = loop_residual(sys, &mats, x_nl, x1, &u1, &y)
            .map_err(|e| IntegrateError::Hybrid { t: t.to_f64_lossy(), source: e })?;
        stats.event_log.push(EventRecord {
            time: t.to_f64_lossy(),
            before,
            after: *topology,
            state_jump: x1
                .iter()
                .chain(x_nl)
                .zip(x_minus)
                .map(|(a, b)| (*a - *b).abs())
                .fold(T::zero(), T::max)
                .to_f64_lossy(),
            loop_residual: residual.to_f64_lossy(),
        });
    }
    Ok(any)
}

struct StepOutcome<T> {
    tc: TaylorCoefficients<T>,
    q: usize,
    h_unclipped: T,
    step_f: usize,
}

/// Builds the coefficients and picks `(q, h_step)`, extending the cascade one
/// order at a time while the predicted advance per evaluation improves.
#[allow(clippy::too_many_arguments)]
fn plan_step<T: Real>(
    sys: &HybridSystem<T>,
    mats: &TopologyMatrices<T>,
    bank: &StencilBank<T>,
    ctrl: &StepController<T>,
    state: &HybridState<T>,
    point: &PointEval<T>,
    h_diff: T,
    h_cap: T,
    tok: T,
    counters: &mut EvalCounters,
) -> Result<(StepOutcome<T>, T), HybridOrStep> {
    let u1 = sys.sources().coefficients(state.t, state.t, bank.q_max());
    let mut cascade = Cascade::start(sys, mats, bank, state, point, u1, h_diff)?;
    let (q_lo, q_hi) = ctrl.order_range();
    let cost = |q: usize| bank.cascade_cost(q);
    let q_lo = q_lo.max(1);
    let result: Result<_, HybridOrStep> = (|| {
        cascade.extend_to(q_lo)?;
        loop {
            let tc = cascade.set().state_coefficients();
            let choice = select_order_and_step(&tc, ctrl, cost, h_cap, tok)?;
            let q_cur = cascade.order();
            let capped = choice.h_step >= h_cap.min(ctrl.h_max);
            if q_cur >= q_hi || capped || choice.q < q_cur {
                return Ok((tc, choice));
            }
            let now = choice.h_step / T::from_usize_lossy(cost(choice.q));
            let gain = (q_cur + 1..=q_hi)
                .map(|q| predicted_step_at(&tc, q_cur, q, tok, ctrl.safety).min(h_cap) / T::from_usize_lossy(cost(q)))
                .fold(T::zero(), T::max);
            if !(gain > now) {
                return Ok((tc, choice));
            }
            cascade.extend()?;
        }
    })();
    counters.add(&cascade.counters());
    let (tc, choice) = result?;
    let step_f = 1 + cascade.counters().f;
    Ok((StepOutcome { tc, q: choice.q, h_unclipped: choice.h_unclipped, step_f }, choice.h_step))
}

enum HybridOrStep {
    Hybrid(HybridError),
    Step(TaylorError),
}

impl From<HybridError> for HybridOrStep {
    fn from(e: HybridError) -> Self {
        Self::Hybrid(e)
    }
}

impl From<TaylorError> for HybridOrStep {
    fn from(e: TaylorError) -> Self {
        Self::Step(e)
    }
}

/// Runs the flexible-order Taylor integrator.
pub fn integrate<T: Real>(run: &SimulationRun<T>) -> Result<(Waveform<T>, RunStats), IntegrateError> {
    run.validate()?;
    let started = Instant::now();
    let sys = &run.system;
    let ctrl = &run.controller;
    let bank = StencilBank::<T>::new(ctrl.q_max).map_err(|e| IntegrateError::Setup(e.to_string()))?;
    let mut stats = RunStats::new("taylor");
    let mut counters = EvalCounters::default();
    let t_end = run.t_end;

    let mut state = run.initial.clone();
    let mut cursor = 0usize;
    let x_init = state.stacked();
    apply_events(sys, &run.schedule, &mut cursor, state.t, &mut state.topology, &state.x1, &state.x_nl, &x_init, &mut stats)?;
    let hyb = |t: T| move |e: HybridError| IntegrateError::Hybrid { t: t.to_f64_lossy(), source: e };
    let mut mats = sys.matrices(state.topology).map_err(hyb(state.t))?;
    let mut solver = LoopSolver::new(sys.loop_options());
    let mut recorder = Recorder::new(sys, run.signals.clone(), output_grid(state.t, t_end, run.output_period));
    let x0 = state.stacked();
    recorder.sample_until(state.t, state.t, &mats, |_| x0.clone()).map_err(hyb(state.t))?;

    let u1 = sys.sources().values(state.t, state.t);
    let mut point =
        evaluate_point(sys, &mats, &mut solver, state.t, &state.x1, &state.x_nl, u1, None, &mut counters).map_err(hyb(state.t))?;
    let mut h_ref: Option<T> = None;
    let n1 = sys.n_pwl();

    while state.t < t_end {
        let t = state.t;
        let te = run.schedule.events().get(cursor).map_or(t_end, |e| e.time.min(t_end));
        let h_cap = te - t;
        let x_now = state.stacked();
        let state_norm = norm_inf(&x_now);
        let tok = ctrl.tolerance(state_norm);
        let step_err = |e: TaylorError| IntegrateError::Step { t: t.to_f64_lossy(), state_norm: state_norm.to_f64_lossy(), source: e };

        let mut h_diff = diff_step(tok, &point.dx_nl, &point.dx1, ctrl.h_max).map_err(step_err)?;
        if let Some(r) = h_ref {
            h_diff = h_diff.max(T::lit(DIFF_STEP_FLOOR) * r);
        }
        h_diff = h_diff.min(h_cap / T::lit(4.0)).min(ctrl.h_max);

        let (plan, mut h_step) =
            plan_step(sys, &mats, &bank, ctrl, &state, &point, h_diff, h_cap, tok, &mut counters).map_err(|e| match e {
                HybridOrStep::Hybrid(e) => hyb(t)(e),
                HybridOrStep::Step(e) => step_err(e),
            })?;
        let q = plan.q;
        log::trace!(
            "t={} q={q} h={} h_cap={} h_diff={} norms={:?}",
            t.to_f64_lossy(),
            h_step.to_f64_lossy(),
            h_cap.to_f64_lossy(),
            h_diff.to_f64_lossy(),
            (0..=plan.tc.order()).map(|k| plan.tc.normalized_norm(k).to_f64_lossy()).collect::<Vec<_>>()
        );

        // advance, checking the end-point derivative unless the step lands on an event
        let mut attempts = 0usize;
        let (x_new, feedback) = loop {
            let x_new = plan.tc.advance_state(h_step, q).map_err(step_err)?;
            if !x_new.iter().all(|v| v.is_finite()) {
                return Err(step_err(TaylorError::NumericalBlowup));
            }
            if h_step >= h_cap {
                break (x_new, None);
            }
            let t_new = t + h_step;
            let f_before = counters.f;
            let u1_new = sys.sources().values(t_new, t_new);
            let (x1n, xnln) = x_new.split_at(n1);
            let fb = evaluate_point(sys, &mats, &mut solver, t_new, x1n, xnln, u1_new, Some(&point.y), &mut counters)
                .map_err(hyb(t_new))?;
            let mut dx = fb.dx1.clone();
            dx.extend_from_slice(&fb.dx_nl);
            let dp = plan.tc.eval_poly_derivative(h_step, q).map_err(step_err)?;
            let mismatch = dx.iter().zip(&dp).map(|(a, b)| (*a - *b).abs()).fold(T::zero(), T::max);
            let err = h_step * mismatch / T::from_usize_lossy(q + 1);
            if err <= tok {
                break (x_new, Some(fb));
            }
            stats.rejected_steps += 1;
            stats.rejected_f_evals += counters.f - f_before;
            attempts += 1;
            h_step *= T::lit(0.5);
            if attempts > MAX_HALVINGS || h_step < ctrl.h_min {
                return Err(step_err(TaylorError::StepUnderflow { h: h_step.to_f64_lossy(), h_min: ctrl.h_min.to_f64_lossy() }));
            }
        };

        let at_boundary = feedback.is_none();
        let t_new = if at_boundary { te } else { t + h_step };
        let tc = &plan.tc;
        recorder
            .sample_until(t_new, t, &mats, |tau| {
                if tau >= t_new {
                    x_new.clone()
                } else {
                    tc.eval_poly(tau - t, q).expect("order within range")
                }
            })
            .map_err(hyb(t_new))?;

        stats.accepted_steps += 1;
        stats.record_order(q);
        stats.step_f_evals.push(plan.step_f);
        h_ref = Some(if plan.h_unclipped.is_finite() { plan.h_unclipped.min(h_cap.max(h_step)) } else { h_step });

        let (x1n, xnln) = x_new.split_at(n1);
        state.x1 = x1n.to_vec();
        state.x_nl = xnln.to_vec();
        state.t = t_new;

        match feedback {
            Some(fb) => point = fb,
            None => {
                if state.t >= t_end {
                    break;
                }
                let switched = apply_events(
                    sys,
                    &run.schedule,
                    &mut cursor,
                    state.t,
                    &mut state.topology,
                    &state.x1,
                    &state.x_nl,
                    &x_new,
                    &mut stats,
                )?;
                if switched {
                    mats = sys.matrices(state.topology).map_err(hyb(state.t))?;
                    solver.reset();
                    recorder.reset_loop();
                }
                let u1 = sys.sources().values(state.t, state.t);
                point = evaluate_point(sys, &mats, &mut solver, state.t, &state.x1, &state.x_nl, u1, Some(&point.y), &mut counters)
                    .map_err(hyb(state.t))?;
            }
        }
    }

    stats.finalize(&counters, started);
    Ok((recorder.finish(), stats))
}
