use std::sync::Arc;

use flexsim::hybrid::{BlockStack, FixedTopology, HybridState, HybridSystem, ModelError, NonlinearBlock, TopologyMatrices};
use flexsim::integrator::{integrate, SimulationRun};
use flexsim::linalg::Matrix;
use flexsim::sources::{EventSchedule, SourceBank};
use flexsim::taylor::StepController;

fn linear(a: Vec<Vec<f64>>) -> HybridSystem<f64> {
    let mats = TopologyMatrices::autonomous(Matrix::from_rows(&a));
    HybridSystem::new(Arc::new(FixedTopology::new(mats)), BlockStack::default(), SourceBank::default()).unwrap()
}

struct Decay;

impl NonlinearBlock<f64> for Decay {
    fn name(&self) -> &str {
        "decay"
    }
    fn n_states(&self) -> usize {
        1
    }
    fn n_inputs(&self) -> usize {
        0
    }
    fn n_outputs(&self) -> usize {
        0
    }
    fn f(&self, x: &[f64], _u: &[f64], dx: &mut [f64]) -> Result<(), ModelError> {
        dx[0] = -x[0] * (1.0 + 0.5 * x[0].sin());
        Ok(())
    }
    fn g(&self, _x: &[f64], _u: &[f64], _y: &mut [f64]) -> Result<(), ModelError> {
        Ok(())
    }
    fn depends_on_input(&self) -> bool {
        false
    }
}

fn run_for(sys: HybridSystem<f64>, x1: Vec<f64>, x_nl: Vec<f64>, t_end: f64, ctrl: StepController<f64>) -> SimulationRun<f64> {
    let init = HybridState::new(&sys, 0.0, x1, x_nl, 0).unwrap();
    let signals = SimulationRun::all_states(&sys);
    SimulationRun::new(sys, EventSchedule::empty(), ctrl, init, t_end, t_end / 10.0, signals).unwrap()
}

#[test]
fn exponential_decay() {
    let run = run_for(linear(vec![vec![-1.0]]), vec![1.0], vec![], 1.0, StepController::new(1e-8, 1e-12));
    let (w, stats) = integrate(&run).unwrap();
    let x = w.columns[0].last().copied().unwrap();
    assert!((x - (-1.0f64).exp()).abs() < 1e-7, "x(1) = {x}");
    assert_eq!(stats.f_evals, 0);
    assert!(stats.accepted_steps > 0);
}

#[test]
fn lc_orbit_closes() {
    let tau = std::f64::consts::TAU;
    let run = run_for(linear(vec![vec![0.0, 1.0], vec![-1.0, 0.0]]), vec![1.0, 0.0], vec![], tau, StepController::new(1e-9, 1e-12));
    let (w, _) = integrate(&run).unwrap();
    assert!((w.columns[0].last().unwrap() - 1.0).abs() < 1e-6);
    assert!(w.columns[1].last().unwrap().abs() < 1e-6);
}

#[test]
fn nonlinear_counts_match_cascade_costs() {
    let sys = HybridSystem::nonlinear_only(BlockStack::new(vec![Arc::new(Decay) as Arc<dyn NonlinearBlock<f64>>])).unwrap();
    let run = run_for(sys, vec![], vec![1.0], 2.0, StepController::new(1e-8, 1e-10));
    let (w, stats) = integrate(&run).unwrap();
    assert!(w.is_well_formed());
    let attributed: usize = stats.step_f_evals.iter().sum();
    assert_eq!(stats.f_evals, attributed + stats.rejected_f_evals);
    assert!(stats.average_order >= 2.0 && stats.average_order <= 5.0);
    let again = integrate(&run).unwrap();
    assert_eq!(w, again.0);
    assert_eq!(stats.step_f_evals, again.1.step_f_evals);
    println!("{stats:?}");
}

#[test]
fn reference_solvers_agree_with_exact_decay() {
    use flexsim::reference::{rk23_bs, rk45_dp};
    let run = run_for(linear(vec![vec![-1.0, 0.0], vec![0.0, -3.0]]), vec![1.0, 2.0], vec![], 1.0, StepController::new(1e-9, 1e-12));
    for (name, res) in [("dp45", rk45_dp(&run)), ("bs23", rk23_bs(&run))] {
        let (w, stats) = res.unwrap();
        assert!(w.is_well_formed());
        for (i, &t) in w.time.iter().enumerate() {
            let e0 = (w.columns[0][i] - (-t).exp()).abs();
            let e1 = (w.columns[1][i] - 2.0 * (-3.0 * t).exp()).abs();
            assert!(e0 < 1e-7 && e1 < 1e-7, "{name} t={t} {e0} {e1}");
        }
        let attributed: usize = stats.step_f_evals.iter().sum();
        assert_eq!(stats.f_evals, attributed + stats.rejected_f_evals + 1, "{name}");
    }
}

fn observed_order(pair: flexsim::reference::Pair) -> f64 {
    let errs: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&h: &f64| {
            let (y, _) = pair.step(|_, x: &[f64]| vec![x[0]], 0.0, &[1.0], h);
            (y[0] - h.exp()).abs()
        })
        .collect();
    // local error is O(h^(p+1))
    ((errs[0] / errs[1]).log2() + (errs[1] / errs[2]).log2()) / 2.0 - 1.0
}

#[test]
fn embedded_pairs_reach_classical_order() {
    use flexsim::reference::Pair;
    let p5 = observed_order(Pair::Dp45);
    let p3 = observed_order(Pair::Bs23);
    assert!((p5 - 5.0).abs() < 0.3, "dp45 order {p5}");
    assert!((p3 - 3.0).abs() < 0.3, "bs23 order {p3}");
}
