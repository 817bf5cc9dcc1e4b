//! Invariant battery for `flexsim selftest`.

use std::sync::Arc;

use flexsim::diffops::{StencilBank, StencilOperator};
use flexsim::hybrid::{derivative_cascade, BlockStack, FixedTopology, HybridState, HybridSystem, NonlinearBlock, TopologyMatrices};
use flexsim::integrator::{integrate, SimulationRun};
use flexsim::linalg::Matrix;
use flexsim::models::{BatteryParams, MotorParams, PvParams, ScalarOde};
use flexsim::reference::relative_error;
use flexsim::sources::{EventSchedule, SourceBank};
use flexsim::taylor::StepController;
use flexsim::waveform::Waveform;

use crate::scenario::parse_scenario;

/// Deliberate defects for exercising the battery itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Shifts one weight of the first-derivative stencil.
    StencilWeight,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stencil-weight" => Some(Fault::StencilWeight),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!("{:<width$}  {}  {}\n", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        s.push_str(&format!("{} checks, {failed} failed\n", self.checks.len()));
        s
    }
}

const Q_MAX: usize = 5;
const EXACT_FLOOR: f64 = 1e-9;

fn square_system() -> HybridSystem<f64> {
    let blk: Arc<dyn NonlinearBlock<f64>> = Arc::new(ScalarOde::new("sq", |x: f64| x * x));
    HybridSystem::nonlinear_only(BlockStack::new(vec![blk])).expect("square system")
}

fn stencil_moments(fault: Option<Fault>) -> Check {
    let bank = StencilBank::<f64>::new(Q_MAX).expect("default stencils");
    let mut ops: Vec<StencilOperator<f64>> = bank.iter().cloned().collect();
    if fault == Some(Fault::StencilWeight) {
        ops[1] = ops[1].with_perturbed_weight(0, 1e-3);
    }
    let worst = ops.iter().map(|op| op.max_moment_residual()).fold(0.0, f64::max);
    Check { name: "stencil moment conditions", passed: worst <= 1e-10, detail: format!("max residual {worst:.2e}") }
}

/// Observed order of the order-`i` coefficient error on `x' = x^2`, `x(0) = 1`.
fn convergence_orders() -> Check {
    let sys = square_system();
    let bank = StencilBank::<f64>::new(Q_MAX).expect("default stencils");
    let state = HybridState::new(&sys, 0.0, vec![], vec![1.0], 0).expect("state");
    let hs = [1e-2, 5e-3, 2.5e-3];
    let errs: Vec<Vec<f64>> = hs
        .iter()
        .map(|&h| {
            let (set, _) = derivative_cascade(&sys, &bank, &state, Q_MAX, h, vec![vec![]; Q_MAX + 1]).expect("cascade");
            (1..Q_MAX).map(|i| (set.x_nl[i][0] - 1.0).abs()).collect()
        })
        .collect();
    let mut ok = true;
    let mut detail = Vec::new();
    for i in 1..Q_MAX {
        let e = |k: usize| errs[k][i - 1];
        // at the roundoff floor the coefficient is exact for this problem
        if (0..hs.len()).all(|k| e(k) <= EXACT_FLOOR) {
            detail.push(format!("i={i}: exact"));
            continue;
        }
        let p = ((e(0) / e(2)).log2()) / 2.0;
        let need = (Q_MAX - i) as f64 - 0.5;
        ok &= p >= need;
        detail.push(format!("i={i}: {p:.2}"));
    }
    Check { name: "derivative convergence order", passed: ok, detail: detail.join(", ") }
}

fn cost_counts() -> Check {
    let sys = square_system();
    let bank = StencilBank::<f64>::new(Q_MAX).expect("default stencils");
    let state = HybridState::new(&sys, 0.0, vec![], vec![0.5], 0).expect("state");
    let mut detail = Vec::new();
    let mut ok = true;
    for (q, want) in [(5usize, 17usize), (3, 9)] {
        let (_, c) = derivative_cascade(&sys, &bank, &state, q, 1e-3, vec![vec![]; Q_MAX + 1]).expect("cascade");
        let ctrl = StepController::new(1e-8, 1e-10).with_forced_order(q);
        let init = HybridState::new(&sys, 0.0, vec![], vec![0.5], 0).expect("state");
        let signals = SimulationRun::all_states(&sys);
        let run = SimulationRun::new(sys.clone(), EventSchedule::empty(), ctrl, init, 0.5, 0.1, signals).expect("run");
        let stats = integrate(&run).expect("integrate").1;
        let steps_ok = stats.step_f_evals.iter().all(|&n| n == want);
        ok &= c.f == want && steps_ok;
        detail.push(format!("q={q}: {} per cascade, steps {}", c.f, if steps_ok { "all match" } else { "differ" }));
    }
    Check { name: "f evaluations per step", passed: ok, detail: detail.join("; ") }
}

fn pwl_exactness() -> Check {
    let a = Matrix::from_rows(&[vec![-0.3, 1.0], vec![-1.0, -0.1]]);
    let sys = HybridSystem::new(
        Arc::new(FixedTopology::new(TopologyMatrices::autonomous(a.clone()))),
        BlockStack::default(),
        SourceBank::default(),
    )
    .expect("pwl system");
    let bank = StencilBank::<f64>::new(Q_MAX).expect("default stencils");
    let state = HybridState::new(&sys, 0.0, vec![1.0, 0.5], vec![], 0).expect("state");
    let (set, _) = derivative_cascade(&sys, &bank, &state, Q_MAX, 1e-3, vec![vec![]; Q_MAX + 1]).expect("cascade");
    let mut v = vec![1.0, 0.5];
    let mut worst: f64 = 0.0;
    for k in 1..=Q_MAX {
        v = a.mul_vec(&v).iter().map(|x| x / k as f64).collect();
        for (c, e) in set.x1[k].iter().zip(&v) {
            worst = worst.max((c - e).abs() / e.abs().max(1e-300));
        }
    }
    Check { name: "PWL coefficient exactness", passed: worst <= 1e-12, detail: format!("max relative deviation {worst:.2e}") }
}

fn stability_identity() -> Check {
    let lam = -1.7;
    let h = 0.9;
    let sys = HybridSystem::new(
        Arc::new(FixedTopology::new(TopologyMatrices::autonomous(Matrix::from_rows(&[vec![lam]])))),
        BlockStack::default(),
        SourceBank::default(),
    )
    .expect("pwl system");
    let bank = StencilBank::<f64>::new(Q_MAX).expect("default stencils");
    let state = HybridState::new(&sys, 0.0, vec![1.0], vec![], 0).expect("state");
    let (set, _) = derivative_cascade(&sys, &bank, &state, Q_MAX, 1e-3, vec![vec![]; Q_MAX + 1]).expect("cascade");
    let stepped = set.state_coefficients().advance_state(h, Q_MAX).expect("advance")[0];
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    for k in 1..=Q_MAX {
        term *= lam * h / k as f64;
        sum += term;
    }
    let dev = (stepped - sum).abs();
    Check { name: "linear stability polynomial", passed: dev <= 4.0 * f64::EPSILON, detail: format!("deviation {dev:.2e}") }
}

fn model_checks() -> Check {
    let bat = BatteryParams::<f64>::lead_acid_12v();
    let branch = (0..=100).map(|k| k as f64 * 0.0095 * bat.q).map(|c| (bat.f1(c, 0.0) - bat.f2(c, 0.0)).abs()).fold(0.0, f64::max);

    let pv = PvParams::<f64>::module_36();
    let rate = |i: f64| pv.rate(i, pv.s_0, pv.t_ref, 0.0).expect("pv rate").0;
    let (mut lo, mut hi) = (0.0, 2.0 * pv.i_sc0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let pv_res = rate(0.5 * (lo + hi)).abs() * pv.t_d;

    let motor = MotorParams::<f64>::small_4pole();
    let origin = motor.rates(&[0.0; 5], 0.0, 0.0).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let ok = branch <= 1e-12 && pv_res <= 1e-9 && origin == 0.0;
    Check {
        name: "model equilibria and continuity",
        passed: ok,
        detail: format!("battery branch gap {branch:.1e}, PV short-circuit residual {pv_res:.1e} A, motor origin {origin:.1e}"),
    }
}

fn event_continuity() -> Check {
    let sc = parse_scenario(include_str!("../scenarios/buck_pv.json")).expect("shipped scenario");
    let built = sc.build().expect("shipped scenario builds");
    match integrate(&built.run) {
        Ok((_, stats)) => {
            let jump = stats.event_log.iter().map(|e| e.state_jump).fold(0.0, f64::max);
            let res = stats.event_log.iter().map(|e| e.loop_residual).fold(0.0, f64::max);
            Check {
                name: "event state continuity",
                passed: jump == 0.0 && res <= 1e-10 && !stats.event_log.is_empty(),
                detail: format!("{} events, max jump {jump:.1e}, max loop residual {res:.1e}", stats.event_log.len()),
            }
        }
        Err(e) => Check { name: "event state continuity", passed: false, detail: e.to_string() },
    }
}

fn metric_examples() -> Check {
    let wave = |v: [f64; 2]| {
        let mut w = Waveform::new(vec!["y".into()]);
        w.push(0.0, &[v[0]]);
        w.push(1.0, &[v[1]]);
        w
    };
    let e0 = relative_error(&wave([1.0, 1.0]), &wave([1.0, 1.0]), 1e-6).unwrap_or(f64::NAN);
    let e1 = relative_error(&wave([1.1, 0.9]), &wave([1.0, 1.0]), 1e-6).unwrap_or(f64::NAN);
    let e2 = relative_error(&wave([1e-7, -1e-7]), &wave([0.0, 0.0]), 1e-6).unwrap_or(f64::NAN);
    let ok = e0 == 0.0 && (e1 - 0.1).abs() < 1e-15 && (e2 - 0.1).abs() < 1e-15;
    Check { name: "relative error metric", passed: ok, detail: format!("{e0:.3e}, {e1:.3e}, {e2:.3e}") }
}

pub fn run_selftest(fault: Option<Fault>) -> SelftestReport {
    SelftestReport {
        checks: vec![
            stencil_moments(fault),
            convergence_orders(),
            cost_counts(),
            pwl_exactness(),
            stability_identity(),
            model_checks(),
            event_continuity(),
            metric_examples(),
        ],
    }
}
