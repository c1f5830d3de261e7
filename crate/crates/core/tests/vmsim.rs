use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use npdg::identify::IdentificationResult;
use npdg::lqgame::{player_hamiltonian_gradient, DifferentialGame, NashSolution, TimeGrid, Trajectory};
use npdg::vmsim::*;
use npdg::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Chain {
    cfg: ScenarioConfig,
    fisc: FiscRecord,
    game: DifferentialGame<f64>,
    nash: NashSolution<f64>,
    ident: IdentificationResult<f64>,
    controller: ControllerRecord,
}

fn chain() -> &'static Chain {
    static CHAIN: OnceLock<Chain> = OnceLock::new();
    CHAIN.get_or_init(|| {
        let cfg = ScenarioConfig::default();
        let (fisc, game, nash) = design_fisc_vm(&cfg).unwrap();
        let segments = identification_data(&cfg, &game, &nash).unwrap();
        let ident = identify_vm(&cfg, &game, &nash, &segments).unwrap();
        let (controller, _) = design_lisc_vm(&cfg, &fisc, &game, &ident).unwrap();
        Chain { cfg, fisc, game, nash, ident, controller }
    })
}

fn run(kind: ControllerKind, scenario: Scenario) -> (Trajectory<f64>, Metrics) {
    let c = chain();
    let cfg = ScenarioConfig { controller: kind, scenario, ..c.cfg.clone() };
    run_scenario(&cfg, &c.fisc, Some(&c.controller), None).unwrap()
}

fn sine_trajectory(len: usize) -> Trajectory<f64> {
    let times: Vec<f64> = (0..len).map(|k| k as f64 * 0.01).collect();
    let states = DMatrix::from_fn(2, len, |c, k| ((k as f64) * 0.05 + c as f64).sin());
    Trajectory { times, states, inputs: vec![DMatrix::zeros(1, len)] }
}

#[test]
fn vanishing_noise_leaves_the_signal() {
    let clean = sine_trajectory(500);
    let noisy = add_awgn(&clean, 300.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!((&noisy.states - &clean.states).amax() < 1e-10);
    assert_eq!(noisy.inputs, clean.inputs);
}

#[test]
fn same_seed_same_noise() {
    let clean = sine_trajectory(200);
    let a = add_awgn(&clean, 10.0, &mut run_rng(7, 3)).unwrap();
    let b = add_awgn(&clean, 10.0, &mut run_rng(7, 3)).unwrap();
    let c = add_awgn(&clean, 10.0, &mut run_rng(7, 4)).unwrap();
    assert_eq!(a.states, b.states);
    assert_ne!(a.states, c.states);
}

#[test]
fn empirical_snr_matches_the_request() {
    let clean = sine_trajectory(10_000);
    let noisy = add_awgn(&clean, 5.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    for c in 0..2 {
        let signal: f64 = clean.states.row(c).iter().map(|v| v * v).sum();
        let noise: f64 = (noisy.states.row(c) - clean.states.row(c)).iter().map(|v| v * v).sum();
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 5.0).abs() <= 0.5, "channel {c}: {snr} dB");
    }
}

#[test]
fn zero_channel_and_bad_snr_are_rejected() {
    let mut t = sine_trajectory(50);
    t.states.row_mut(1).fill(0.0);
    assert!(matches!(add_awgn(&t, 10.0, &mut run_rng(0, 0)), Err(Error::ZeroSignalChannel(1))));
    assert!(add_awgn(&sine_trajectory(50), f64::INFINITY, &mut run_rng(0, 0)).is_err());
}

#[test]
fn manipulator_rmse_cases() {
    let mut t: Trajectory<f64> = Trajectory { times: vec![0.0; 6], states: DMatrix::zeros(4, 6), inputs: vec![] };
    assert_eq!(manipulator_rmse(&t), 0.0);
    t.states.row_mut(0).fill(-0.3);
    assert!((manipulator_rmse(&t) - 0.3).abs() < 1e-15);
    for k in 0..6 {
        t.states[(0, k)] = if k % 2 == 0 { 1.0 } else { -1.0 };
    }
    assert!((manipulator_rmse(&t) - 1.0).abs() < 1e-15);
}

#[test]
fn resting_start_gives_zero_metrics() {
    let sc = Scenario::from_x0(vec![0.0; 4], TimeGrid::default());
    for kind in [ControllerKind::Nc, ControllerKind::Fisc, ControllerKind::Lisc] {
        let (traj, m) = run(kind, sc.clone());
        assert_eq!(m.rmse_dm, 0.0);
        assert_eq!(traj.states.amax(), 0.0);
        assert!(traj.inputs.iter().all(|u| u.amax() == 0.0));
    }
}

#[test]
fn lisc_without_controller_is_a_missing_design() {
    let c = chain();
    let cfg = ScenarioConfig { controller: ControllerKind::Lisc, ..c.cfg.clone() };
    assert!(matches!(run_scenario(&cfg, &c.fisc, None, None), Err(Error::MissingDesign)));
}

#[test]
fn shared_control_beats_vehicle_only_steering() {
    let (_, nc) = run(ControllerKind::Nc, Scenario::vform_course());
    let (_, fi) = run(ControllerKind::Fisc, Scenario::vform_course());
    assert!(nc.rmse_dm > fi.rmse_dm, "NC {} FISC {}", nc.rmse_dm, fi.rmse_dm);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        use rand::Rng;
        let x0: Vec<f64> = vec![rng.random_range(0.2..1.0), rng.random_range(-0.2..0.2), rng.random_range(-0.5..0.5), rng.random_range(-0.1..0.1)];
        let sc = Scenario::from_x0(x0.clone(), TimeGrid::default());
        let (_, nc) = run(ControllerKind::Nc, sc.clone());
        let (_, fi) = run(ControllerKind::Fisc, sc);
        assert!(nc.rmse_dm > fi.rmse_dm, "x0 {x0:?}: NC {} FISC {}", nc.rmse_dm, fi.rmse_dm);
    }
}

#[test]
fn lisc_tracks_fisc_on_the_vform_course() {
    let c = chain();
    assert_eq!(c.controller.k_li.shape(), (1, 5));
    assert!(c.controller.mismatch <= 0.2, "mismatch {}", c.controller.mismatch);
    assert!(c.controller.mismatch <= c.controller.initial_mismatch);
    let (fi_traj, fi) = run(ControllerKind::Fisc, Scenario::vform_course());
    let (li_traj, li) = run(ControllerKind::Lisc, Scenario::vform_course());
    let gap = (fi.rmse_dm - li.rmse_dm).abs() / fi.rmse_dm;
    assert!(gap <= 0.15, "RMSE gap {gap}");
    let replay = relative_input_mismatch(&fi_traj, &li_traj);
    assert!((replay - c.controller.mismatch).abs() < 1e-12);
}

/// Exact one-step map of `x' = M x + c` over `dt`, from the exponential of the
/// augmented matrix `[[M, c], [0, 0]]`.
fn affine_step(m: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>, dt: f64) -> DVector<f64> {
    let n = m.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(m * dt));
    aug.view_mut((0, n), (n, 1)).copy_from(&(c * dt));
    let e = aug.exp();
    e.view((0, 0), (n, n)) * x + e.view((0, n), (n, 1)).column(0)
}

/// Reference rate active at each sample of a scenario without resets.
fn reference_rates(sc: &Scenario) -> Vec<DVector<f64>> {
    let len = sc.grid.len();
    let mut w = vec![DVector::zeros(4); len];
    let mut segs = sc.segments.clone();
    segs.sort_by(|a, b| a.start.total_cmp(&b.start));
    for s in segs {
        let k0 = ((s.start - sc.grid.t0) / sc.grid.dt).round() as usize;
        let v = s.reference_rate.map(|r| DVector::from_vec(r)).unwrap_or_else(|| DVector::zeros(4));
        for wk in w.iter_mut().skip(k0) {
            *wk = v.clone();
        }
    }
    w
}

#[test]
fn trajectories_solve_the_closed_loop_ode() {
    let c = chain();
    let d = &c.game.dynamics;
    let a_h = &d.a - &d.b[HUMAN] * &c.fisc.k_h;
    let sc = Scenario::vform_course();
    let w = reference_rates(&sc);
    let dt = sc.grid.dt;
    for kind in [ControllerKind::Nc, ControllerKind::Fisc, ControllerKind::Lisc] {
        let (traj, _) = run(kind, sc.clone());
        let mut worst = 0.0f64;
        for k in 0..traj.len() - 1 {
            // The automation input is either state feedback (folded into the matrix) or
            // held constant over the sample (folded into the affine term).
            let (m, forcing) = match kind {
                ControllerKind::Lisc => (a_h.clone(), &d.b[AUTOMATION] * traj.inputs[AUTOMATION].column(k) + &w[k]),
                ControllerKind::Nc => (&a_h - &d.b[AUTOMATION] * k_nc::<f64>(), w[k].clone()),
                ControllerKind::Fisc => (&a_h - &d.b[AUTOMATION] * &c.fisc.k_fi, w[k].clone()),
            };
            let next = affine_step(&m, &forcing, &traj.state(k), dt);
            worst = worst.max((next - traj.state(k + 1)).norm());
        }
        assert!(worst <= 1e-6, "{kind:?}: one-step residual {worst}");
    }
}

#[test]
fn nc_gain_reads_vehicle_states_only() {
    let k = k_nc::<f64>();
    assert_eq!(k.shape(), (1, 4));
    assert_eq!(k.as_slice(), &[0.0, 0.0, K_NC[0], K_NC[1]]);
}

#[test]
fn fisc_design_on_the_vehicle_manipulator() {
    let c = chain();
    assert!(c.fisc.global_cost <= c.fisc.initial_cost);
    // Largest automation state weight on the manipulator lateral error.
    let q = c.fisc.q_fi.diagonal();
    assert_eq!(q.imax(), 0, "Q_FI diagonal {q}");
    // Both players' Hamiltonian gradients vanish along the Nash closed loop.
    let b = c.game.dynamics.stacked_b();
    let k = c.nash.stacked_k();
    let mut x = DVector::from_row_slice(&[0.5, -0.1, 0.3, 0.05]);
    let step = (&(&c.game.dynamics.a - &b * &k) * 0.04).exp();
    for _ in 0..250 {
        let u = -(&k * &x);
        for i in 0..2 {
            let g = player_hamiltonian_gradient(&c.game, &c.nash, &x, &u, i).unwrap();
            assert!(g.norm() <= 1e-8, "player {i}: {}", g.norm());
        }
        x = &step * x;
    }
}

#[test]
fn noiseless_identification_is_feasible_at_the_default_distance() {
    let c = chain();
    assert_eq!(c.ident.delta_used, 0.05);
    assert!(c.ident.residuals.max_residual() <= 1e-6);
    let exp = Scenario::identification_experiment();
    let clean = simulate_scenario(&c.game.dynamics, &c.nash.k[HUMAN], Automation::Feedback(c.nash.k[AUTOMATION].clone()), &exp).unwrap();
    let (dd, _, violations) = certify_segments(&c.game, &c.nash, &c.ident, &exp, &clean).unwrap();
    assert!(dd < 0.05);
    assert_eq!(violations, 0);
}

#[test]
fn noiseless_sweep_row_has_negligible_distance() {
    let c = chain();
    let cfg = SweepConfig { snr_db: vec![f64::INFINITY], seeds: 1, ..SweepConfig::default() };
    let (rows, runs) = noise_sweep(&c.game, &c.nash, &Scenario::identification_experiment(), &cfg, &Default::default()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].snr_db, None);
    assert!(runs[0].max_dd.unwrap() <= 1e-6, "{:?}", runs[0]);
    assert_eq!(runs[0].bound_violations, 0);
}

#[test]
fn verification_passes_on_fresh_artifacts() {
    let c = chain();
    let npdg = NpdgRecord::from_result(&c.ident);
    let checks = verify_artifacts(&c.cfg, &c.fisc, Some(&npdg), Some(&c.controller)).unwrap();
    let failed: Vec<_> = checks.iter().filter(|k| !k.ok).collect();
    assert!(failed.is_empty(), "{failed:?}");
    assert!(checks.iter().any(|k| k.name == "cs.consistency"));
}

#[test]
fn verification_flags_a_corrupted_surrogate() {
    let c = chain();
    let mut npdg = NpdgRecord::from_result(&c.ident);
    npdg.pp *= 1.01;
    let checks = verify_artifacts(&c.cfg, &c.fisc, Some(&npdg), None).unwrap();
    let failed: Vec<&str> = checks.iter().filter(|k| !k.ok).map(|k| k.name.as_str()).collect();
    assert!(failed.contains(&"npdg.riccati"), "{failed:?}");
    assert!(failed.contains(&"npdg.gain_match"), "{failed:?}");
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let cfg = ScenarioConfig { snr_db: Some(20.0), seed: 9, delta: 0.1, ..ScenarioConfig::default() };
    let text = npdg::io::to_json(&cfg).unwrap();
    let back: ScenarioConfig = npdg::io::from_json(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(npdg::io::from_json::<ScenarioConfig>(r#"{"sead": 1}"#).is_err());
    let bad = ScenarioConfig { theta0: vec![1.0; 6], ..ScenarioConfig::default() };
    assert!(bad.validate().is_err());
    let coupled = ScenarioConfig { human_r: vec![vec![0.0, 0.1, 0.0], vec![0.1, 1.05, 0.0], vec![0.0, 0.0, 0.9]], ..ScenarioConfig::default() };
    assert!(coupled.validate().is_err());
}

#[test]
fn result_files_round_trip() {
    let c = chain();
    let fisc: FiscRecord = npdg::io::from_json(&npdg::io::to_json(&c.fisc).unwrap()).unwrap();
    assert_eq!(fisc, c.fisc);
    let npdg = NpdgRecord::from_result(&c.ident);
    let back: NpdgRecord = npdg::io::from_json(&npdg::io::to_json(&npdg).unwrap()).unwrap();
    assert_eq!(back, npdg);
    let ctrl: ControllerRecord = npdg::io::from_json(&npdg::io::to_json(&c.controller).unwrap()).unwrap();
    assert_eq!(ctrl, c.controller);
}

#[test]
fn experiment_splits_into_its_resets() {
    let c = chain();
    let exp = Scenario::identification_experiment();
    let clean = simulate_scenario(&c.game.dynamics, &c.nash.k[HUMAN], Automation::Feedback(c.nash.k[AUTOMATION].clone()), &exp).unwrap();
    let segs = exp.split(&clean);
    assert_eq!(segs.len(), 10);
    assert_eq!(segs.iter().map(Trajectory::len).sum::<usize>(), clean.len());
    assert_eq!(segs[1].state(0).as_slice(), &[0.0, 0.5, 0.0, 0.0]);
}
