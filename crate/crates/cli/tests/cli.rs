use std::path::{Path, PathBuf};
use std::process::Command;

use flexsim::reference::{relative_error, Solver};
use flexsim::waveform::Waveform;
use flexsim_cli::output::{read_waveform, read_waveform_from, stats_path, write_waveform_to};
use flexsim_cli::scenario::ScenarioError;
use flexsim_cli::{cmd_bench, cmd_run, load_scenario, parse_scenario, simulate, RunOverrides};
use proptest::prelude::*;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flexsim"))
}

#[test]
fn minimal_rc_scenario() {
    let sc = load_scenario(scenario("rc")).unwrap();
    let built = sc.build().unwrap();
    assert_eq!(built.run.system.state_names(), vec!["v(C1)"]);
    assert_eq!(sc.n_switches(), 0);
}

#[test]
fn buck_pv_dimensions() {
    let sc = load_scenario(scenario("buck_pv")).unwrap();
    let built = sc.build().unwrap();
    assert_eq!(built.run.system.n_pwl(), 2);
    assert_eq!(built.run.system.blocks().n_states(), 1);
    assert_eq!(built.switch_names, vec!["S1", "S2"]);
}

#[test]
fn every_shipped_scenario_loads() {
    for name in ["rc", "lc", "pv_rc", "buck_pv", "battery_charge", "inverter_motor"] {
        load_scenario(scenario(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn duty_above_one_names_the_field() {
    let text = std::fs::read_to_string(scenario("buck_pv")).unwrap().replace("\"duty\": 0.4", "\"duty\": 1.2");
    match parse_scenario(&text) {
        Err(ScenarioError::Invalid { path, .. }) => assert_eq!(path, "pwm.legs[0].modulator.duty"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn schema_errors_carry_a_path() {
    let text = std::fs::read_to_string(scenario("rc")).unwrap().replace("\"value\": 1000.0", "\"value\": \"big\"");
    match parse_scenario(&text) {
        Err(ScenarioError::Schema { path, message }) => {
            assert_eq!(path, "elements[1]");
            assert!(message.contains("big"), "{message}");
        }
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn dangling_and_unknown_references() {
    let base = std::fs::read_to_string(scenario("battery_charge")).unwrap();
    let dangling = base.replace("\"source\": \"vchg\"", "\"source\": \"nope\"");
    assert!(matches!(parse_scenario(&dangling), Err(ScenarioError::Dangling { .. })));
    let unknown = base.replace("\"model\": \"battery\"", "\"model\": \"flywheel\"");
    assert!(matches!(parse_scenario(&unknown), Err(ScenarioError::UnknownModel(_))));
    let version = base.replace("\"schema_version\": 1", "\"schema_version\": 7");
    assert!(matches!(parse_scenario(&version), Err(ScenarioError::Version(7))));
    let param = base.replace("\"x0\": [5.0, 0.5]", "\"x0\": [5.0, 0.5], \"params\": {\"bogus\": 1}");
    assert!(matches!(parse_scenario(&param), Err(ScenarioError::Invalid { .. })));
}

#[test]
fn defaults_match_golden_dump() {
    let sc = load_scenario(scenario("buck_pv")).unwrap();
    let dump = serde_json::to_string_pretty(&sc).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/buck_pv_defaults.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &dump).unwrap();
    }
    let want = std::fs::read_to_string(&golden).expect("golden file present");
    assert_eq!(dump.trim_end(), want.trim_end());
    assert_eq!(sc.solver.q_min, 2);
    assert_eq!(sc.solver.q_max, 5);
    assert_eq!(sc.solver.safety, 0.8);
}

#[test]
fn rc_run_matches_closed_form_and_dp45() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rc.csv");
    cmd_run(&scenario("rc"), &RunOverrides::default(), &out).unwrap();
    let w = read_waveform(&out).unwrap();
    for (t, v) in w.time.iter().zip(&w.columns[0]) {
        assert!((v - (1.0 - (-t / 1e-3).exp())).abs() < 1e-8, "t={t}");
    }
    assert!(stats_path(&out).exists());

    let out2 = dir.path().join("rc_dp.csv");
    cmd_run(&scenario("rc"), &RunOverrides { solver: Some(Solver::Dp45), ..Default::default() }, &out2).unwrap();
    let r = read_waveform(&out2).unwrap();
    assert!(relative_error(&w, &r, 1e-12).unwrap() <= 1e-7);
}

#[test]
fn binary_reports_missing_file() {
    let out = bin().args(["run", "/definitely/not/here.json"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here.json"));
}

#[test]
fn binary_selftest_and_fault_injection() {
    let a = bin().arg("selftest").output().unwrap();
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stdout));
    let b = bin().arg("selftest").output().unwrap();
    assert_eq!(a.stdout, b.stdout);
    let f = bin().args(["selftest", "--inject-fault", "stencil-weight"]).output().unwrap();
    assert!(!f.status.success());
    let text = String::from_utf8_lossy(&f.stdout);
    assert!(text.lines().any(|l| l.starts_with("stencil moment conditions") && l.contains("FAIL")), "{text}");
}

#[test]
fn binary_run_writes_csv_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lc.csv");
    let st = bin().args(["run", scenario("lc").to_str().unwrap(), "--out", out.to_str().unwrap()]).status().unwrap();
    assert!(st.success());
    let w = read_waveform(&out).unwrap();
    assert_eq!(w.names, vec!["v(C1)", "i(L1)"]);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(stats_path(&out)).unwrap()).unwrap();
    assert_eq!(stats["solver"], "taylor");
}

#[test]
fn rc_bench_sweep_properties() {
    let dir = tempfile::tempdir().unwrap();
    let tols = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
    let report = cmd_bench(&scenario("rc"), &tols, &[Solver::Taylor, Solver::Dp45, Solver::Bs23], &dir.path().join("b")).unwrap();
    assert!(dir.path().join("b.json").exists() && dir.path().join("b.csv").exists());
    for s in ["taylor", "dp45", "bs23"] {
        let rows = report.rows_for(s);
        assert_eq!(rows.len(), tols.len());
        for w in rows.windows(2) {
            assert!(w[1].err_rel <= 2.0 * w[0].err_rel, "{s}: {} then {}", w[0].err_rel, w[1].err_rel);
        }
    }
    let taylor = report.rows_for("taylor");
    assert!(taylor.windows(2).all(|w| w[1].avg_order >= w[0].avg_order));
    let dp = report.rows_for("dp45");
    assert!(dp.windows(2).all(|w| w[1].steps >= w[0].steps));
}

#[test]
fn overrides_apply() {
    let ov = RunOverrides { t_end: Some(1e-3), ..Default::default() };
    let (sc, w, _) = simulate(&scenario("rc"), &ov).unwrap();
    assert_eq!(sc.t_span[1], 1e-3);
    assert_eq!(*w.time.last().unwrap(), 1e-3);
}

proptest! {
    #[test]
    fn csv_round_trip_is_bit_exact(rows in prop::collection::vec((any::<f64>(), any::<f64>()), 1..20)) {
        let rows: Vec<(f64, f64)> = rows.into_iter().filter(|(a, b)| a.is_finite() && b.is_finite()).collect();
        let mut w = Waveform::new(vec!["a".into()]);
        for (t, v) in &rows {
            w.push(*t, &[*v]);
        }
        let mut buf = Vec::new();
        write_waveform_to(&w, &mut buf).unwrap();
        let back = read_waveform_from(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(back.time.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), w.time.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.columns[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(), w.columns[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

fn solve(name: &str, solver: Solver, rel_tol: f64, abs_tol: f64) -> Waveform<f64> {
    let mut run = load_scenario(scenario(name)).unwrap().build().unwrap().run;
    run.controller.rel_tol = rel_tol;
    run.controller.abs_tol = abs_tol;
    solver.run(&run).unwrap().0
}

#[test]
fn lc_orbit_closes_after_one_period() {
    for solver in [Solver::Dp45, Solver::Bs23, Solver::Taylor] {
        let w = solve("lc", solver, 1e-9, 1e-12);
        let (v, i) = (w.last("v(C1)").unwrap(), w.last("i(L1)").unwrap());
        assert!((v - 1.0).abs() <= 1e-6 && i.abs() <= 1e-6, "{}: v {v}, i {i}", solver.name());
    }
}

#[test]
fn buck_pv_reference_is_self_consistent() {
    let tight = solve("buck_pv", Solver::Dp45, 1e-12, 1e-12);
    let reference = solve("buck_pv", Solver::Dp45, 1e-10, 1e-10);
    assert!(relative_error(&reference, &tight, 1e-8).unwrap() <= 1e-6);
    let bs = solve("buck_pv", Solver::Bs23, 1e-8, 1e-10);
    assert!(relative_error(&bs, &tight, 1e-8).unwrap() <= 1e-6);
}

/// Hand nodal analysis of the charger: node n holds v(C1), node bat is pinned
/// to the battery EMF, and the battery's discharge current is what its port
/// delivers back into the network.
#[test]
fn battery_charge_first_derivatives_match_hand_analysis() {
    use flexsim::hybrid::{first_derivatives, EvalCounters};
    use flexsim::models::BatteryParams;
    let run = load_scenario(scenario("battery_charge")).unwrap().build().unwrap().run;
    let pt = first_derivatives(&run.system, &run.initial, &mut EvalCounters::default()).unwrap();
    let p = BatteryParams::<f64>::lead_acid_12v();
    let (v, c, i_star) = (12.5, 5.0, 0.5);
    let e = p.voltage(c, i_star).unwrap();
    let (i_r1, i_r2) = ((14.4 - v) / 1.0, (v - e) / 1.0);
    let i_out = -i_r2;
    let want_dv = (i_r1 - i_r2) / 0.01;
    assert!((pt.dx1[0] - want_dv).abs() <= 1e-12 * want_dv.abs());
    assert!((pt.y[0] - e).abs() <= 1e-14 * e);
    assert!((pt.u[0] - i_out).abs() <= 1e-12 * i_out.abs());
    assert!((pt.dx_nl[0] - i_out / 3600.0).abs() <= 1e-15);
    assert!((pt.dx_nl[1] - (i_out - i_star) / p.t_lp).abs() <= 1e-12 * pt.dx_nl[1].abs());
}
