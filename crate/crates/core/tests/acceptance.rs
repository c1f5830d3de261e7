//! Acceptance report: one line per criterion with the measured values and the pinned
//! tolerances. Informational lines compare against published values that depend on
//! unpublished model parameters; they never decide the exit code.

#[path = "common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use npdg::identify::{check_identification, identify_npdg, search_delta, GainEstimate, IdentificationResult, IdentifyOptions};
use npdg::linalg;
use npdg::lqgame::{coupled_riccati_residuals, simulate_closed_loop, solve_coupled_riccati, DifferentialGame, NashSolution, TimeGrid};
use npdg::potential::{certify, exact_pdg_residual};
use npdg::vmsim::*;
use rand::Rng;

const TOL_RIC: f64 = 1e-8;
const TOL_ROUND_TRIP: f64 = 1e-6;
const TOL_REPLAY: f64 = 1e-6;
const TOL_ARE: f64 = 1e-8;
const TOL_CONSISTENCY: f64 = 1e-6;
const TOL_PINV: f64 = 1e-9;
const MAX_MISMATCH: f64 = 0.20;
const MAX_RMSE_GAP: f64 = 0.15;

#[derive(Default)]
struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, tag: &str, id: &str, text: String) {
        println!("{tag:<5} {id:<3} {text}");
    }

    fn check(&mut self, id: &str, ok: bool, text: String) {
        if !ok {
            self.failed += 1;
        }
        self.line(if ok { "PASS" } else { "FAIL" }, id, text);
    }

    fn info(&mut self, id: &str, text: String) {
        self.line("INFO", id, text);
    }
}

/// Certificate and replay tallies over every identification made by the harness.
#[derive(Default)]
struct Ledger {
    identifications: usize,
    bound_checked: usize,
    bound_violations: usize,
    worst_replay: f64,
    worst_unscaled_guard: f64,
}

impl Ledger {
    fn record(&mut self, game: &DifferentialGame<f64>, nash: &NashSolution<f64>, r: &IdentificationResult<f64>, x0s: &[DVector<f64>]) {
        let rep = check_identification(r, game, nash);
        self.identifications += 1;
        self.worst_replay = self.worst_replay.max(rep.max_residual());
        self.worst_unscaled_guard = self.worst_unscaled_guard.max(rep.scale_guard_unscaled);
        let times: Vec<f64> = TimeGrid::default().times();
        for x0 in x0s {
            let cert = certify(game, nash, &r.pot, x0, &times, r.delta_used, 1.0).expect("certificate");
            self.bound_checked += 1;
            self.bound_violations += cert.bound_violations;
        }
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn riccati_correctness(rep: &mut Report) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut unstable = 0;
    let mut failures = 0;
    for seed in 0..100 {
        let game = common::random_game(seed);
        match solve_coupled_riccati(&game) {
            Ok(nash) => {
                let r = coupled_riccati_residuals(&game, &nash.p, &nash.k).unwrap();
                worst = r.into_iter().fold(worst, f64::max);
                if !linalg::is_hurwitz(&nash.ac, 0.0) {
                    unstable += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    rep.check(
        "1",
        failures == 0 && unstable == 0 && worst <= TOL_RIC && secs < 5.0,
        format!(
            "coupled Riccati on 100 random games: max residual {worst:.2e} (tol {TOL_RIC:.0e}), {unstable} non-Hurwitz, {failures} solver failures, {secs:.2} s (limit 5 s)"
        ),
    );
}

fn exact_round_trip(rep: &mut Report, ledger: &mut Ledger) {
    let times: Vec<f64> = TimeGrid::default().times();
    let mut infeasible = 0;
    let mut worst_pdg = 0.0f64;
    let mut worst_traj = 0.0f64;
    for seed in 0..20 {
        let game = common::decoupled_game(seed);
        let nash = solve_coupled_riccati(&game).unwrap();
        let x0 = common::unit_state(seed, 4);
        let x_max = simulate_closed_loop(&nash.ac, &x0, &times, None).unwrap().max_state_norm();
        let est = GainEstimate::exact(nash.stacked_k(), 2);
        match identify_npdg(&game, &nash, &est, 1e-6, x_max, &IdentifyOptions::default()) {
            Ok(r) => {
                for (a, b) in exact_pdg_residual(&game, &nash, &r.pot).unwrap() {
                    worst_pdg = worst_pdg.max(a).max(b);
                }
                let cert = certify(&game, &nash, &r.pot, &x0, &times, r.delta_used, 1.0).unwrap();
                worst_traj = worst_traj.max(cert.trajectory_deviation);
                ledger.record(&game, &nash, &r, &[x0]);
            }
            Err(_) => infeasible += 1,
        }
    }
    rep.check(
        "2",
        infeasible == 0 && worst_pdg <= TOL_ROUND_TRIP && worst_traj <= TOL_ROUND_TRIP,
        format!(
            "exact potential round trip on 20 decoupled games at delta 1e-6: {infeasible} infeasible, max exact-PDG residual {worst_pdg:.2e}, max trajectory gap {worst_traj:.2e} (tol {TOL_ROUND_TRIP:.0e})"
        ),
    );
}

/// Identifies surrogates of random coupled games at their smallest feasible distance.
fn random_game_identifications(ledger: &mut Ledger) -> (usize, usize) {
    let times: Vec<f64> = TimeGrid::default().times();
    let (mut found, mut none) = (0, 0);
    for seed in 100..130 {
        let game = common::random_game(seed);
        let nash = solve_coupled_riccati(&game).unwrap();
        let x0 = common::unit_state(seed, 4);
        let x_max = simulate_closed_loop(&nash.ac, &x0, &times, None).unwrap().max_state_norm();
        let est = GainEstimate::exact(nash.stacked_k(), 2);
        match search_delta(&game, &nash, &est, x_max, 0.01, 14, &IdentifyOptions::default()) {
            Ok(s) => {
                found += 1;
                let extra = common::unit_state(seed + 1000, 4);
                ledger.record(&game, &nash, &s.result, &[x0, extra]);
            }
            Err(_) => none += 1,
        }
    }
    (found, none)
}

fn experiment_states() -> Vec<DVector<f64>> {
    let exp = Scenario::identification_experiment();
    let mut x0s = vec![DVector::from_vec(exp.x0.clone())];
    x0s.extend(exp.segments.iter().filter_map(|s| s.reset.clone()).map(DVector::from_vec));
    x0s
}

fn table_sweep(rep: &mut Report, game: &DifferentialGame<f64>, nash: &NashSolution<f64>) -> (usize, usize) {
    let cfg = SweepConfig::default();
    let start = Instant::now();
    let (rows, runs) = noise_sweep(game, nash, &Scenario::identification_experiment(), &cfg, &IdentifyOptions::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    for r in &rows {
        rep.info(
            "4",
            format!(
                "SNR {:>2} dB: median max distance {:.4}, median trajectory deviation {:.4}, median smallest delta {}, {} of {} infeasible",
                r.snr_db.unwrap_or(f64::INFINITY),
                r.median_max_dd.unwrap_or(f64::NAN),
                r.median_traj_dev.unwrap_or(f64::NAN),
                r.median_delta.map_or("none".to_string(), |d| d.to_string()),
                r.infeasible,
                r.runs
            ),
        );
    }
    let dd: Vec<f64> = rows.iter().map(|r| r.median_max_dd.unwrap_or(f64::INFINITY)).collect();
    let monotone = dd.windows(2).all(|w| w[1] <= w[0]);
    let high = rows.last().unwrap();
    let high_runs: Vec<&PipelineRun> = runs.iter().filter(|r| r.snr_db == Some(30.0)).collect();
    let high_feasible = high_runs.iter().all(|r| r.delta.is_some_and(|d| d <= 0.05));
    let low_delta = rows[0].median_delta.unwrap_or(f64::INFINITY);
    let ok = rows.iter().all(|r| r.runs >= 10)
        && monotone
        && high.median_max_dd.is_some_and(|d| d <= 0.01)
        && high_feasible
        && (0.05..=0.5).contains(&low_delta)
        && secs < 120.0;
    rep.check(
        "4",
        ok,
        format!(
            "noise sweep {{5,10,20,30}} dB x {} seeds: median max distance {} (nonincreasing: {monotone}), 30 dB median {:.4} (limit 0.01) with delta 0.05 feasible on every seed: {high_feasible}, 5 dB median smallest delta {low_delta} (range [0.05, 0.5]), {secs:.1} s (limit 120 s)",
            cfg.seeds,
            fmt_vec(&dd),
            high.median_max_dd.unwrap_or(f64::NAN),
        ),
    );
    rep.info("4", "published single-run distances 0.1365, 0.1164, 0.0326, 0.0010 and 5 dB delta 0.15; compared by order of magnitude only".into());
    let checked = runs.iter().filter(|r| r.delta.is_some()).count();
    let violations = runs.iter().map(|r| r.bound_violations).sum();
    (checked, violations)
}

fn main() -> ExitCode {
    let mut rep = Report::default();
    let mut ledger = Ledger::default();
    println!("acceptance report (tolerances: riccati {TOL_RIC:.0e}, replay {TOL_REPLAY:.0e}, ARE identity {TOL_ARE:.0e}, consistency {TOL_CONSISTENCY:.0e}, pinv {TOL_PINV:.0e})");

    riccati_correctness(&mut rep);
    exact_round_trip(&mut rep, &mut ledger);
    let (found, none) = random_game_identifications(&mut ledger);
    rep.info("3", format!("random coupled games 100..130: {found} identified, {none} admit no normalized surrogate at any searched delta"));

    // Vehicle-manipulator chain with the default configuration.
    let cfg = ScenarioConfig::default();
    let (fisc, game, nash) = design_fisc_vm(&cfg).unwrap();
    let segments = identification_data(&cfg, &game, &nash).unwrap();
    let ident = identify_vm(&cfg, &game, &nash, &segments).unwrap();
    ledger.record(&game, &nash, &ident, &experiment_states());
    let (controller, _) = design_lisc_vm(&cfg, &fisc, &game, &ident).unwrap();

    let (sweep_checked, sweep_violations) = table_sweep(&mut rep, &game, &nash);

    rep.check(
        "3",
        ledger.bound_violations == 0 && sweep_violations == 0,
        format!(
            "deviation bound: {} violations over {} certified runs from {} identifications, {} violations over {} feasible sweep runs (zero permitted)",
            ledger.bound_violations, ledger.bound_checked, ledger.identifications, sweep_violations, sweep_checked
        ),
    );

    rep.check(
        "5",
        ledger.worst_replay <= TOL_REPLAY,
        format!(
            "constraint replay on {} accepted identifications: max residual {:.2e} over riccati, gain_match, normalization_lower, normalization_upper, distance_bound, scale_guard (tol {TOL_REPLAY:.0e})",
            ledger.identifications, ledger.worst_replay
        ),
    );
    let vm_rep = check_identification(&ident, &game, &nash);
    rep.info(
        "5",
        format!(
            "scale guard without player scale factors (every s_i = 1): vehicle-manipulator residual {:.3}, worst over all identifications {:.3}; this form conflicts with the distance bound on the vehicle-manipulator game, the scaled guard is enforced instead",
            vm_rep.scale_guard_unscaled, ledger.worst_unscaled_guard
        ),
    );

    let npdg = NpdgRecord::from_result(&ident);
    let checks = verify_artifacts(&cfg, &fisc, Some(&npdg), Some(&controller)).unwrap();
    let value = |name: &str| checks.iter().find(|c| c.name == name).map_or(f64::NAN, |c| c.value);
    let (are, cons, pinv) = (value("cs.are_identity"), value("cs.consistency"), value("cs.pinv_contract"));
    rep.check(
        "6",
        are <= TOL_ARE && cons <= TOL_CONSISTENCY && pinv <= TOL_PINV,
        format!(
            "cooperation state (corrected sign): ARE identity {are:.2e} (tol {TOL_ARE:.0e}), consistency {cons:.2e} (tol {TOL_CONSISTENCY:.0e}), pinv contract {pinv:.2e} (tol {TOL_PINV:.0e})"
        ),
    );
    rep.info(
        "6",
        format!(
            "Xi_a {} Xi_h {} (published Xi_a [0.470, -0.127], Xi_h [[0.144, 0.192], [0.055, 0.454]] for unpublished geometry)",
            fmt_vec(controller.xi_a.as_slice()),
            fmt_vec(controller.xi_h.transpose().as_slice())
        ),
    );

    // LISC against FISC.
    let run = |kind: ControllerKind, scenario: Scenario| {
        let c = ScenarioConfig { controller: kind, scenario, ..cfg.clone() };
        run_scenario(&c, &fisc, Some(&controller), None).unwrap()
    };
    let (fi_traj, fi) = run(ControllerKind::Fisc, Scenario::vform_course());
    let (li_traj, li) = run(ControllerKind::Lisc, Scenario::vform_course());
    let (_, nc) = run(ControllerKind::Nc, Scenario::vform_course());
    let mismatch = relative_input_mismatch(&fi_traj, &li_traj);
    let gap = (fi.rmse_dm - li.rmse_dm).abs() / fi.rmse_dm;
    let mut order_ok = nc.rmse_dm > fi.rmse_dm;
    let mut seeds_checked = 1;
    for seed in 0..10 {
        let mut rng = run_rng(seed, 7);
        let x0 = vec![rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2)];
        let sc = Scenario::from_x0(x0, TimeGrid::default());
        let (_, n) = run(ControllerKind::Nc, sc.clone());
        let (_, f) = run(ControllerKind::Fisc, sc);
        order_ok &= n.rmse_dm > f.rmse_dm;
        seeds_checked += 1;
    }
    rep.check(
        "7",
        mismatch <= MAX_MISMATCH && gap <= MAX_RMSE_GAP && order_ok,
        format!(
            "V-form course: input mismatch {:.1}% (limit 20%), RMSE NC {:.5} FISC {:.5} LISC {:.5}, FISC-LISC gap {:.1}% (limit 15%), NC > FISC on {seeds_checked} runs: {order_ok}",
            100.0 * mismatch,
            nc.rmse_dm,
            fi.rmse_dm,
            li.rmse_dm,
            100.0 * gap
        ),
    );
    let (fs, fsm) = run(ControllerKind::Fisc, Scenario::step_course());
    let (ls, lsm) = run(ControllerKind::Lisc, Scenario::step_course());
    rep.info(
        "7",
        format!(
            "step course (not used for the fit): input mismatch {:.1}%, RMSE gap {:.1}%",
            100.0 * relative_input_mismatch(&fs, &ls),
            100.0 * (fsm.rmse_dm - lsm.rmse_dm).abs() / fsm.rmse_dm
        ),
    );
    let signs: String = controller.k_li.iter().map(|v| if *v >= 0.0 { '+' } else { '-' }).collect();
    rep.info(
        "7",
        format!(
            "K_FI {} (published [1.02, -0.06, 0.65, 1.31]), K_LI {} sign pattern {signs} (published +++--)",
            fmt_vec(fisc.k_fi.as_slice()),
            fmt_vec(controller.k_li.as_slice())
        ),
    );

    rep.line(
        "N/A",
        "8",
        "not reproducible: the human-subject results (absolute RMSE tables, p-values, equivalence intervals) need the study participants; criteria 4 and 7 stand in with the ground-truth human model".into(),
    );

    let (a, b) = (pipeline_bytes(), pipeline_bytes());
    let same = a == b;
    rep.check(
        "9",
        same,
        format!("determinism: two full runs (noisy identification, LISC design, simulation, sweep) give byte-identical CSV output: {same} ({} bytes)", a.len()),
    );

    println!("{} criteria failed", rep.failed);
    if rep.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Every CSV the pipeline writes, concatenated, for one noisy run with a fixed seed.
fn pipeline_bytes() -> Vec<u8> {
    let cfg = ScenarioConfig { snr_db: Some(20.0), seed: 42, delta: 0.1, ..ScenarioConfig::default() };
    let (fisc, game, nash) = design_fisc_vm(&cfg).unwrap();
    let segments = identification_data(&cfg, &game, &nash).unwrap();
    let ident = identify_vm(&cfg, &game, &nash, &segments).unwrap();
    let (controller, _) = design_lisc_vm(&cfg, &fisc, &game, &ident).unwrap();
    let sim = ScenarioConfig { controller: ControllerKind::Lisc, ..cfg.clone() };
    let (traj, metrics) = run_scenario(&sim, &fisc, Some(&controller), Some((&game, &nash, &ident))).unwrap();
    let sweep_cfg = SweepConfig { seeds: 2, base_seed: cfg.seed, ..SweepConfig::default() };
    let (rows, runs) = noise_sweep(&game, &nash, &Scenario::identification_experiment(), &sweep_cfg, &IdentifyOptions::default()).unwrap();
    let mut out = Vec::new();
    let header = npdg::io::trajectory_header(4, &[1, 2]);
    npdg::io::write_trajectory_csv(&mut out, &npdg::io::join_segments(&segments).unwrap(), &header).unwrap();
    npdg::io::write_trajectory_csv(&mut out, &traj, &vm_trajectory_header()).unwrap();
    npdg::io::write_table_csv(&mut out, &[metrics]).unwrap();
    npdg::io::write_table_csv(&mut out, &rows).unwrap();
    npdg::io::write_table_csv(&mut out, &runs).unwrap();
    let gains = DMatrix::from_row_slice(1, 5, controller.k_li.as_slice());
    npdg::io::write_table_csv(&mut out, &[gains.as_slice().to_vec()]).unwrap();
    out
}
