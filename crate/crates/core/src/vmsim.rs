//! Vehicle-manipulator plant, ground-truth human model, noise injection, scenarios
//! and metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lisc::LiscController;
use crate::identify::{
    check_identification, estimate_feedback_gains_with, identify_npdg, ConstraintReport, GainEstimator, IdentificationResult, IdentifyOptions,
};
use crate::io;
use crate::lisc::{
    build_extended_system, cs_consistency_residual, derive_cooperation_state, design_fisc, design_lisc, CooperationStateDesign, CsReport, CsSign,
    DesignOptions, FiscDesign, StatePartition, WeightParametrization,
};
use crate::lqgame::{
    coupled_riccati_residuals, simulate_closed_loop, solve_coupled_riccati, DifferentialGame, LtiGameDynamics, NashSolution, PlayerCost, TimeGrid, Trajectory,
};
use crate::potential::{certify, PotentialGame};
use crate::scalar::{lit, to_f64, Real};

/// Index of the automation player (steering angle input).
pub const AUTOMATION: usize = 0;
/// Index of the human player (manipulator joystick inputs).
pub const HUMAN: usize = 1;

/// Geometry and speed of the vehicle-manipulator. State order is
/// `[d_m, dalpha, d_v, dtheta]`: manipulator lateral error, manipulator orientation
/// error, vehicle lateral error, vehicle heading error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmParams {
    /// Longitudinal velocity (m/s).
    pub v: f64,
    /// Axle distance (m).
    #[serde(rename = "L")]
    pub l: f64,
    /// Manipulator reference length (m).
    pub a_e: f64,
    /// Manipulator reference orientation (rad).
    pub alpha_e: f64,
}

impl Default for VmParams {
    /// Assumed geometry.
    fn default() -> Self {
        Self { v: 1.2, l: 3.0, a_e: 5.0, alpha_e: 0.5 }
    }
}

impl VmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.v > 0.0 && self.l > 0.0 && self.a_e > 0.0 && self.alpha_e.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("vehicle-manipulator parameters {self:?}")))
        }
    }
}

/// Which state matrix to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AVariant {
    /// Kinematic lateral error `d_v' = v * dtheta`.
    #[default]
    Kinematic,
    /// Velocity on the diagonal entry of `d_v` instead of coupling to `dtheta`.
    Printed,
}

/// Linear vehicle-manipulator game plant for players `[automation, human]`.
pub fn build_vm_model<T: Real>(params: &VmParams, variant: AVariant) -> Result<LtiGameDynamics<T>> {
    params.validate()?;
    let v = params.v;
    let mut a = DMatrix::<f64>::zeros(4, 4);
    a[(1, 1)] = -1.0;
    match variant {
        AVariant::Kinematic => a[(2, 3)] = v,
        AVariant::Printed => a[(2, 2)] = v,
    }
    let bh = DMatrix::from_row_slice(
        4,
        2,
        &[params.alpha_e.sin(), params.a_e * params.alpha_e.cos(), 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    );
    let ba = DMatrix::from_column_slice(4, 1, &[params.l * v, 0.0, 0.0, v]);
    LtiGameDynamics::new(cast(&a), vec![cast(&ba), cast(&bh)])
}

pub fn cast<T: Real>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(lit::<T>)
}

pub fn diag<T: Real>(d: &[f64]) -> DMatrix<T> {
    DMatrix::from_diagonal(&DVector::from_iterator(d.len(), d.iter().map(|&x| lit(x))))
}

/// Ground-truth human cost: `Q_h = diag(4.5, 1, 0.5, 0.5)`, `R_hh = diag(1.05, 0.9)`,
/// no weight on the automation input.
pub fn human_cost<T: Real>() -> PlayerCost<T> {
    PlayerCost::new(
        HUMAN,
        diag(&[4.5, 1.0, 0.5, 0.5]),
        vec![DMatrix::zeros(1, 1), diag(&[1.05, 0.9])],
    )
}

/// Global design weights `Q_g`, `R_g` (stacked inputs `[delta, adot, alphadot]`).
pub fn global_weights<T: Real>() -> (DMatrix<T>, DMatrix<T>) {
    (diag(&[5.5, 0.5, 1.25, 0.85]), diag(&[1.0, 1.45, 1.35]))
}

/// Initial automation weight parameters `[diag Q_a (4), R_aa, diag R_ah (2)]`.
pub const THETA0: [f64; 7] = [5.0, 0.1, 1.0, 0.9, 0.1, 0.0, 0.0];

/// Vehicle-only steering gain on `[d_v, dtheta]` used as the no-cooperation baseline.
pub const K_NC: [f64; 2] = [1.1, 3.2];

/// `K_NC` padded with zeros on the manipulator states.
pub fn k_nc<T: Real>() -> DMatrix<T> {
    DMatrix::from_row_slice(1, 4, &[T::zero(), T::zero(), lit(K_NC[0]), lit(K_NC[1])])
}

/// Measurable (vehicle) and non-measurable (manipulator) state indices.
pub const MEASURABLE: [usize; 2] = [2, 3];
pub const NONMEASURABLE: [usize; 2] = [0, 1];


/// Start of a scenario segment: an optional state reset (step reference) and the
/// reference rate held until the next segment (ramp / V-form reference).
///
/// The simulation runs in path coordinates where the goal is the origin. A step in
/// the reference appears as a jump of the error state; a ramp in the reference
/// appears as a constant additive term `w` in `x' = A x + B u + w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Start time (s); snapped to the nearest grid sample.
    pub start: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reset: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_rate: Option<Vec<f64>>,
}

/// Uniform grid, initial state and segment schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub grid: TimeGrid,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub segments: Vec<Segment>,
}

impl Scenario {
    pub fn from_x0(x0: Vec<f64>, grid: TimeGrid) -> Self {
        Self { grid, x0, segments: Vec::new() }
    }

    /// One reset per initial state, each held for `seconds` with no reference motion.
    pub fn resets(x0s: &[Vec<f64>], seconds: f64, dt: f64) -> Result<Self> {
        if x0s.is_empty() {
            return Err(Error::InvalidParams("no initial states".into()));
        }
        let grid = TimeGrid::new(0.0, seconds * x0s.len() as f64 - dt, dt)?;
        let segments = x0s
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, x)| Segment { start: seconds * i as f64, reset: Some(x.clone()), reference_rate: None })
            .collect();
        Ok(Self { grid, x0: x0s[0].clone(), segments })
    }

    /// Excitation used for gain estimation: ten 10 s segments, each a reset to a
    /// positive or negative axis direction or a mixed state.
    pub fn identification_experiment() -> Self {
        let x0s: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.5],
            vec![-1.0, 0.0, 0.0, 0.0],
            vec![0.0, -0.5, 0.0, 0.0],
            vec![0.0, 0.0, -1.0, 0.0],
            vec![0.0, 0.0, 0.0, -0.5],
            vec![1.0, 0.2, 0.5, -0.1],
            vec![-0.5, 0.1, 1.0, 0.2],
        ];
        Self::resets(&x0s, 10.0, 0.04).expect("static schedule is valid")
    }

    /// Smooth references: four V-forms of 2.5 s out and 2.5 s back, each followed by
    /// 5 s of straight path. In order: manipulator and vehicle together, manipulator
    /// only, vehicle only, and both in opposite directions. 40 s at 25 Hz, starting at rest.
    pub fn vform_course() -> Self {
        let vee = |start: f64, dm: f64, dv: f64| {
            [
                Segment { start, reset: None, reference_rate: Some(vec![-dm, 0.0, -dv, 0.0]) },
                Segment { start: start + 2.5, reset: None, reference_rate: Some(vec![dm, 0.0, dv, 0.0]) },
                Segment { start: start + 5.0, reset: None, reference_rate: None },
            ]
        };
        let segments = [vee(0.0, 0.2, 0.1), vee(10.0, 0.2, 0.0), vee(20.0, 0.0, 0.1), vee(30.0, 0.2, -0.1)].concat();
        Self { grid: TimeGrid { t0: 0.0, t1: 40.0 - 0.04, dt: 0.04 }, x0: vec![0.0; 4], segments }
    }

    /// Step references: the reference jumps by 0.5 m for the manipulator, then 0.5 m for
    /// the vehicle, then both; each held for 10 s.
    pub fn step_course() -> Self {
        let x0s = vec![vec![0.5, 0.0, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.0], vec![-0.5, 0.1, 0.2, 0.0]];
        Self::resets(&x0s, 10.0, 0.04).expect("static schedule is valid")
    }

    /// Sample index at which each segment starts, with its reset and reference rate.
    fn schedule(&self, n: usize) -> Result<Vec<(usize, Option<DVector<f64>>, Option<DVector<f64>>)>> {
        let len = self.grid.len();
        let mut out = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            let k = ((s.start - self.grid.t0) / self.grid.dt).round();
            if !(k >= 0.0) || k as usize >= len {
                return Err(Error::InvalidParams(format!("segment start {} outside the grid", s.start)));
            }
            let vec_of = |v: &Option<Vec<f64>>, what: &str| -> Result<Option<DVector<f64>>> {
                match v {
                    Some(v) if v.len() != n => Err(Error::ShapeMismatch(format!("{what} has {} entries, expected {n}", v.len()))),
                    Some(v) => Ok(Some(DVector::from_column_slice(v))),
                    None => Ok(None),
                }
            };
            out.push((k as usize, vec_of(&s.reset, "reset")?, vec_of(&s.reference_rate, "reference rate")?));
        }
        out.sort_by_key(|e| e.0);
        Ok(out)
    }

    /// Sample indices where a new segment with a state reset begins (including 0).
    pub fn reset_indices(&self) -> Vec<usize> {
        let mut idx = vec![0];
        for s in &self.segments {
            if s.reset.is_some() {
                idx.push(((s.start - self.grid.t0) / self.grid.dt).round() as usize);
            }
        }
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    /// Splits a trajectory on this scenario's grid at the reset indices.
    pub fn split<T: Real>(&self, traj: &Trajectory<T>) -> Vec<Trajectory<T>> {
        let mut idx = self.reset_indices();
        idx.push(traj.len());
        idx.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| traj.window(w[0], w[1] - w[0]))
            .collect()
    }
}

/// How the automation input is produced during a simulation.
pub enum Automation<'a, T: Real> {
    /// Continuous state feedback `u_a = -K x`.
    Feedback(DMatrix<T>),
    /// Sampled limited-information controller; `u_a` is held between samples.
    Lisc(&'a mut LiscController<T>),
}

/// Simulates the plant against the human feedback `u_h = -K_h x` (continuous) and the
/// given automation on the scenario grid. Inputs are recorded as `[u_a, u_h]`.
pub fn simulate_scenario<T: Real>(
    dynamics: &LtiGameDynamics<T>,
    k_human: &DMatrix<T>,
    automation: Automation<'_, T>,
    scenario: &Scenario,
) -> Result<Trajectory<T>> {
    let n = dynamics.state_dim();
    if dynamics.players() != 2 {
        return Err(Error::ShapeMismatch("vehicle-manipulator simulation needs two players".into()));
    }
    linalg::check_shape(k_human, dynamics.b[HUMAN].ncols(), n, "K_h")?;
    if scenario.x0.len() != n {
        return Err(Error::ShapeMismatch(format!("x0 has {} entries, expected {n}", scenario.x0.len())));
    }
    let schedule = scenario.schedule(n)?;
    let times = scenario.grid.times::<T>();
    let len = times.len();
    let dt: T = lit(scenario.grid.dt);
    let pa = dynamics.b[AUTOMATION].ncols();
    let a_h = &dynamics.a - &dynamics.b[HUMAN] * k_human;
    let mut states = DMatrix::zeros(n, len);
    let mut ua_rec = DMatrix::zeros(pa, len);
    let mut x: DVector<T> = DVector::from_iterator(n, scenario.x0.iter().map(|&v| lit(v)));
    let mut w: DVector<T> = DVector::zeros(n);
    let mut next = 0;
    let mut apply_schedule = |k: usize, x: &mut DVector<T>, w: &mut DVector<T>| {
        while next < schedule.len() && schedule[next].0 == k {
            if let Some(r) = &schedule[next].1 {
                *x = r.map(lit::<T>);
            }
            *w = schedule[next].2.as_ref().map(|r| r.map(lit::<T>)).unwrap_or_else(|| DVector::zeros(n));
            next += 1;
        }
    };
    match automation {
        Automation::Feedback(k_a) => {
            linalg::check_shape(&k_a, pa, n, "K_a")?;
            let acl = &a_h - &dynamics.b[AUTOMATION] * &k_a;
            let (phi, gam) = linalg::discretize(&acl, &DMatrix::identity(n, n), dt);
            for k in 0..len {
                apply_schedule(k, &mut x, &mut w);
                states.set_column(k, &x);
                ua_rec.set_column(k, &(-(&k_a * &x)));
                x = &phi * &x + &gam * &w;
            }
        }
        Automation::Lisc(ctrl) => {
            let inputs = linalg::hstack(&[&dynamics.b[AUTOMATION], &DMatrix::identity(n, n)]);
            let (phi, gam) = linalg::discretize(&a_h, &inputs, dt);
            let (gam_a, gam_w) = (gam.columns(0, pa).into_owned(), gam.columns(pa, n).into_owned());
            let measurable: Vec<usize> = MEASURABLE.to_vec();
            for k in 0..len {
                apply_schedule(k, &mut x, &mut w);
                states.set_column(k, &x);
                let uh = -(k_human * &x);
                let xm = x.select_rows(&measurable);
                let ua = ctrl.step(&xm, &uh, dt);
                ua_rec.set_column(k, &ua);
                x = &phi * &x + &gam_a * &ua + &gam_w * &w;
            }
        }
    }
    let uh_rec = -(k_human * &states);
    Ok(Trajectory { times, states, inputs: vec![ua_rec, uh_rec] })
}

/// `sqrt(mean(d_m^2))` over all samples.
pub fn manipulator_rmse<T: Real>(traj: &Trajectory<T>) -> T {
    if traj.is_empty() {
        return T::zero();
    }
    let s = traj.states.row(0).iter().fold(T::zero(), |acc, &v| acc + v * v);
    (s / lit(traj.len() as f64)).sqrt()
}

/// `||u_ref - u|| / ||u_ref||` over the automation inputs of two runs on the same grid.
pub fn relative_input_mismatch<T: Real>(reference: &Trajectory<T>, other: &Trajectory<T>) -> T {
    let r = &reference.inputs[AUTOMATION];
    let d = (r - &other.inputs[AUTOMATION]).norm();
    let nr = r.norm();
    if nr > T::zero() {
        d / nr
    } else {
        d
    }
}


/// Adds white Gaussian noise to every state channel with variance
/// `mean(x_c^2) / 10^(snr_db / 10)`; inputs are left untouched.
pub fn add_awgn<T: Real, R: Rng + ?Sized>(traj: &Trajectory<T>, snr_db: f64, rng: &mut R) -> Result<Trajectory<T>> {
    if traj.is_empty() {
        return Err(Error::InvalidParams("empty trajectory".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidParams(format!("SNR {snr_db} dB is not finite")));
    }
    let mut out = traj.clone();
    let len = traj.len() as f64;
    for c in 0..traj.states.nrows() {
        let power = traj.states.row(c).iter().map(|&v| to_f64(v) * to_f64(v)).sum::<f64>() / len;
        if power == 0.0 {
            return Err(Error::ZeroSignalChannel(c));
        }
        let sd = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        let normal = Normal::new(0.0, sd).map_err(|e| Error::InvalidParams(e.to_string()))?;
        for k in 0..traj.len() {
            out.states[(c, k)] += lit::<T>(normal.sample(rng));
        }
    }
    Ok(out)
}

/// Generator for run `stream` of a sweep: ChaCha20 keyed by the base seed, one
/// stream per run, so every run draws an independent sequence regardless of order.
pub fn run_rng(base_seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(base_seed);
    rng.set_stream(stream);
    rng
}

/// Noise sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Signal-to-noise ratios in dB; `None` entries in results mean noiseless.
    pub snr_db: Vec<f64>,
    /// Runs per SNR level.
    pub seeds: usize,
    pub base_seed: u64,
    /// Ascending candidate distances; the smallest feasible one is reported.
    pub delta_grid: Vec<f64>,
    pub estimator: GainEstimator,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            snr_db: vec![5.0, 10.0, 20.0, 30.0],
            seeds: 10,
            base_seed: 0,
            delta_grid: vec![0.01, 0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0],
            estimator: GainEstimator::InstrumentalVariable { lag: 1 },
        }
    }
}

/// Outcome of one identification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    /// `None` for noiseless data.
    pub snr_db: Option<f64>,
    pub seed_index: usize,
    /// Smallest feasible grid distance, `None` if every grid value was infeasible.
    pub delta: Option<f64>,
    pub beta: Option<f64>,
    /// Largest per-player differential distance over the game and surrogate runs.
    pub max_dd: Option<f64>,
    /// Largest `||x_p(t) - x*(t)||` over all segments.
    pub traj_dev: Option<f64>,
    pub bound_violations: usize,
    pub gain_error: f64,
    /// Largest constraint residual of the accepted identification.
    pub max_residual: Option<f64>,
}

/// Runs gain estimation and identification on one (possibly noisy) measurement of
/// `clean`, then certifies the surrogate from every segment start.
pub fn identification_run(
    game: &DifferentialGame<f64>,
    nash: &NashSolution<f64>,
    scenario: &Scenario,
    clean: &Trajectory<f64>,
    snr_db: Option<f64>,
    seed_index: usize,
    rng: &mut ChaCha20Rng,
    cfg: &SweepConfig,
    opts: &IdentifyOptions<f64>,
) -> Result<PipelineRun> {
    let measured = match snr_db {
        Some(snr) => add_awgn(clean, snr, rng)?,
        None => clean.clone(),
    };
    let segments = scenario.split(&measured);
    let est = estimate_feedback_gains_with(&segments, cfg.estimator)?;
    let gain_error = (&est.khat - nash.stacked_k()).norm();
    let x_max = measured.max_state_norm();
    let mut run = PipelineRun {
        snr_db,
        seed_index,
        delta: None,
        beta: None,
        max_dd: None,
        traj_dev: None,
        bound_violations: 0,
        gain_error,
        max_residual: None,
    };
    let mut result = None;
    for &delta in &cfg.delta_grid {
        if let Ok(r) = identify_npdg(game, nash, &est, delta, x_max, opts) {
            result = Some(r);
            break;
        }
    }
    let Some(result) = result else {
        return Ok(run);
    };
    let (max_dd, dev, violations) = certify_segments(game, nash, &result, scenario, clean)?;
    run.delta = Some(result.delta_used);
    run.beta = Some(result.beta);
    run.max_dd = Some(max_dd);
    run.traj_dev = Some(dev);
    run.bound_violations = violations;
    run.max_residual = Some(result.residuals.max_residual());
    Ok(run)
}

/// One table row: medians over the seeds of one SNR level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr_db: Option<f64>,
    pub runs: usize,
    pub infeasible: usize,
    /// Medians over feasible runs (`None` when no run was feasible).
    pub median_max_dd: Option<f64>,
    pub median_traj_dev: Option<f64>,
    /// Median smallest feasible distance, counting infeasible runs as infinite.
    pub median_delta: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Aggregates runs of one SNR level into a table row.
pub fn summarize(snr_db: Option<f64>, runs: &[PipelineRun]) -> SweepRow {
    let feasible: Vec<&PipelineRun> = runs.iter().filter(|r| r.delta.is_some()).collect();
    let deltas = median(runs.iter().map(|r| r.delta.unwrap_or(f64::INFINITY)).collect());
    SweepRow {
        snr_db,
        runs: runs.len(),
        infeasible: runs.len() - feasible.len(),
        median_max_dd: median(feasible.iter().filter_map(|r| r.max_dd).collect()),
        median_traj_dev: median(feasible.iter().filter_map(|r| r.traj_dev).collect()),
        median_delta: deltas.filter(|d| d.is_finite()),
    }
}

/// Full noise pipeline per (SNR, seed): simulate the Nash closed loop on the
/// identification experiment, add noise, estimate gains, identify at the smallest
/// feasible grid distance and certify. Run `j` of SNR level `i` draws from stream
/// `(i << 32) | j` of the base seed; runs execute in parallel.
pub fn noise_sweep(
    game: &DifferentialGame<f64>,
    nash: &NashSolution<f64>,
    scenario: &Scenario,
    cfg: &SweepConfig,
    opts: &IdentifyOptions<f64>,
) -> Result<(Vec<SweepRow>, Vec<PipelineRun>)> {
    if cfg.snr_db.is_empty() || cfg.seeds == 0 || cfg.delta_grid.is_empty() {
        return Err(Error::InvalidParams("sweep needs SNR levels, seeds and a distance grid".into()));
    }
    let clean = simulate_scenario(
        &game.dynamics,
        &nash.k[HUMAN],
        Automation::Feedback(nash.k[AUTOMATION].clone()),
        scenario,
    )?;
    let jobs: Vec<(usize, usize)> = (0..cfg.snr_db.len()).flat_map(|i| (0..cfg.seeds).map(move |j| (i, j))).collect();
    let runs: Vec<PipelineRun> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let mut rng = run_rng(cfg.base_seed, ((i as u64) << 32) | j as u64);
            let snr = cfg.snr_db[i];
            let snr = if snr.is_finite() { Some(snr) } else { None };
            identification_run(game, nash, scenario, &clean, snr, j, &mut rng, cfg, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = cfg
        .snr_db
        .iter()
        .enumerate()
        .map(|(i, &snr)| {
            let snr = if snr.is_finite() { Some(snr) } else { None };
            summarize(snr, &runs[i * cfg.seeds..(i + 1) * cfg.seeds])
        })
        .collect();
    Ok((rows, runs))
}


/// Which automation runs in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    /// Vehicle-only steering `-K_NC [d_v, dtheta]`, no cooperation.
    Nc,
    /// Full-information shared control (Nash gain of the designed game).
    #[default]
    Fisc,
    /// Limited-information shared control.
    Lisc,
}

fn default_human_q() -> Vec<Vec<f64>> {
    io::to_rows(&diag::<f64>(&[4.5, 1.0, 0.5, 0.5]))
}

fn default_human_r() -> Vec<Vec<f64>> {
    io::to_rows(&diag::<f64>(&[0.0, 1.05, 0.9]))
}

fn default_global_q() -> Vec<Vec<f64>> {
    io::to_rows(&global_weights::<f64>().0)
}

fn default_global_r() -> Vec<Vec<f64>> {
    io::to_rows(&global_weights::<f64>().1)
}

fn default_theta0() -> Vec<f64> {
    THETA0.to_vec()
}

fn default_delta() -> f64 {
    0.05
}

fn default_scenario() -> Scenario {
    Scenario::vform_course()
}

/// Everything a vehicle-manipulator run needs. Matrices are row-major nested arrays;
/// the input-weight matrices are 3x3 over the stacked inputs `[delta, adot, alphadot]`
/// and their off-diagonal blocks between players must be zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub vm: VmParams,
    #[serde(default)]
    pub variant: AVariant,
    #[serde(default)]
    pub controller: ControllerKind,
    #[serde(default = "default_human_q")]
    pub human_q: Vec<Vec<f64>>,
    #[serde(default = "default_human_r")]
    pub human_r: Vec<Vec<f64>>,
    #[serde(default = "default_global_q")]
    pub global_q: Vec<Vec<f64>>,
    #[serde(default = "default_global_r")]
    pub global_r: Vec<Vec<f64>>,
    #[serde(default = "default_theta0")]
    pub theta0: Vec<f64>,
    /// Simulated run (grid, initial state, reference segments).
    #[serde(default = "default_scenario")]
    pub scenario: Scenario,
    /// Reference run used to fit the LISC weights.
    #[serde(default = "default_scenario")]
    pub lisc_design_scenario: Scenario,
    /// Measurement noise for identification; `None` is noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Distance used for identification.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub cs_sign: CsSign,
    #[serde(default)]
    pub lisc_weights: WeightParametrization,
    #[serde(default = "default_estimator")]
    pub estimator: GainEstimator,
}

fn default_estimator() -> GainEstimator {
    GainEstimator::InstrumentalVariable { lag: 1 }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        io::from_json("{}").expect("all fields have defaults")
    }
}

/// Splits a stacked `3x3` input weight into per-player blocks `[R_.a, R_.h]`.
fn split_input_weight(r: &DMatrix<f64>, what: &str) -> Result<Vec<DMatrix<f64>>> {
    linalg::check_shape(r, 3, 3, what)?;
    let cross = r.view((0, 1), (1, 2)).iter().chain(r.view((1, 0), (2, 1)).iter()).any(|v| *v != 0.0);
    if cross {
        return Err(Error::InvalidParams(format!("{what} couples the two players' inputs")));
    }
    Ok(vec![r.view((0, 0), (1, 1)).into_owned(), r.view((1, 1), (2, 2)).into_owned()])
}

impl ScenarioConfig {
    pub fn dynamics(&self) -> Result<LtiGameDynamics<f64>> {
        build_vm_model(&self.vm, self.variant)
    }

    pub fn human_cost(&self) -> Result<PlayerCost<f64>> {
        let q = io::from_rows(&self.human_q)?;
        linalg::check_shape(&q, 4, 4, "human Q")?;
        Ok(PlayerCost::new(HUMAN, q, split_input_weight(&io::from_rows(&self.human_r)?, "human R")?))
    }

    pub fn global_weights(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let q = io::from_rows(&self.global_q)?;
        let r = io::from_rows(&self.global_r)?;
        linalg::check_shape(&q, 4, 4, "global Q")?;
        linalg::check_shape(&r, 3, 3, "global R")?;
        Ok((q, r))
    }

    /// Checks shapes and parameter ranges without running any solver.
    pub fn validate(&self) -> Result<()> {
        self.dynamics()?;
        self.human_cost()?;
        self.global_weights()?;
        if self.theta0.len() != 7 || self.theta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("theta0 needs 7 finite entries".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidParams("delta must be positive".into()));
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return Err(Error::InvalidParams("snr_db must be finite".into()));
        }
        for sc in [&self.scenario, &self.lisc_design_scenario] {
            if sc.x0.len() != 4 {
                return Err(Error::ShapeMismatch("scenario x0 needs 4 entries".into()));
            }
            sc.schedule(4)?;
        }
        Ok(())
    }
}

/// FISC weights, gains and the resulting game, in result-file form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiscRecord {
    pub theta: Vec<f64>,
    #[serde(with = "io::rows")]
    pub q_fi: DMatrix<f64>,
    /// Automation input weights over the stacked inputs (block diagonal).
    #[serde(with = "io::rows")]
    pub r_fi: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub k_fi: DMatrix<f64>,
    /// Human Nash gain of the designed game.
    #[serde(with = "io::rows")]
    pub k_h: DMatrix<f64>,
    pub global_cost: f64,
    pub initial_cost: f64,
}

impl FiscRecord {
    pub fn from_design(d: &FiscDesign<f64>, nash: &NashSolution<f64>) -> Self {
        Self {
            theta: d.theta.iter().copied().collect(),
            q_fi: d.q_fi.clone(),
            r_fi: linalg::block_diag(&[&d.r_fi[0], &d.r_fi[1]]),
            k_fi: nash.k[AUTOMATION].clone(),
            k_h: nash.k[HUMAN].clone(),
            global_cost: d.global_cost,
            initial_cost: d.initial_cost,
        }
    }

    /// Rebuilds the designed game against the configured human and re-solves it.
    pub fn game(&self, cfg: &ScenarioConfig) -> Result<(DifferentialGame<f64>, NashSolution<f64>)> {
        let ra = split_input_weight(&self.r_fi, "FISC R")?;
        let automation = PlayerCost::new(AUTOMATION, self.q_fi.clone(), ra);
        let game = DifferentialGame::new(cfg.dynamics()?, vec![automation, cfg.human_cost()?])?;
        let nash = solve_coupled_riccati(&game)?;
        Ok((game, nash))
    }
}

/// Runs the FISC design for a config.
pub fn design_fisc_vm(cfg: &ScenarioConfig) -> Result<(FiscRecord, DifferentialGame<f64>, NashSolution<f64>)> {
    cfg.validate()?;
    let (qg, rg) = cfg.global_weights()?;
    let d = design_fisc(&cfg.dynamics()?, &cfg.human_cost()?, &qg, &rg, &DVector::from_column_slice(&cfg.theta0), &DesignOptions::default())?;
    // Re-solve the normalized game so the stored gains match what `FiscRecord::game` rebuilds.
    let provisional = FiscRecord::from_design(&d, &d.nash);
    let (game, nash) = provisional.game(cfg)?;
    let record = FiscRecord::from_design(&d, &nash);
    Ok((record, game, nash))
}

/// Identified surrogate in result-file form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpdgRecord {
    #[serde(with = "io::rows")]
    pub pp: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub qp: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub rp: DMatrix<f64>,
    /// Player scale factors.
    pub scale: Vec<f64>,
    pub beta: f64,
    #[serde(with = "io::rows")]
    pub khat: DMatrix<f64>,
    pub delta: f64,
    pub x_max: f64,
    pub residuals: ConstraintReport,
}

impl NpdgRecord {
    pub fn from_result(r: &IdentificationResult<f64>) -> Self {
        Self {
            pp: r.pot.pp.clone(),
            qp: r.pot.qp.clone(),
            rp: r.pot.rp.clone(),
            scale: r.pot.scale.clone(),
            beta: r.beta,
            khat: r.khat.clone(),
            delta: r.delta_used,
            x_max: r.x_max,
            residuals: r.residuals.clone(),
        }
    }

    pub fn to_result(&self, dynamics: &LtiGameDynamics<f64>) -> Result<IdentificationResult<f64>> {
        let pot = PotentialGame::from_solution(dynamics, self.qp.clone(), self.rp.clone(), self.pp.clone(), self.scale.clone())?;
        Ok(IdentificationResult {
            pot,
            beta: self.beta,
            khat: self.khat.clone(),
            delta_used: self.delta,
            x_max: self.x_max,
            residuals: self.residuals.clone(),
        })
    }
}

/// Runs the identification experiment on the designed game and adds the configured
/// measurement noise (run stream 0 of `cfg.seed`). Returns one trajectory per reset.
pub fn identification_data(
    cfg: &ScenarioConfig,
    game: &DifferentialGame<f64>,
    nash: &NashSolution<f64>,
) -> Result<Vec<Trajectory<f64>>> {
    let sc = Scenario::identification_experiment();
    let clean = simulate_scenario(&game.dynamics, &nash.k[HUMAN], Automation::Feedback(nash.k[AUTOMATION].clone()), &sc)?;
    let data = match cfg.snr_db {
        Some(snr) => add_awgn(&clean, snr, &mut run_rng(cfg.seed, 0))?,
        None => clean,
    };
    Ok(sc.split(&data))
}

/// Estimates the feedback gains from measured segments and identifies a surrogate at
/// `cfg.delta`, with `x_max` taken from the measurements.
pub fn identify_vm(
    cfg: &ScenarioConfig,
    game: &DifferentialGame<f64>,
    nash: &NashSolution<f64>,
    segments: &[Trajectory<f64>],
) -> Result<IdentificationResult<f64>> {
    if segments.is_empty() {
        return Err(Error::InvalidParams("no measured trajectories".into()));
    }
    let est = estimate_feedback_gains_with(segments, cfg.estimator)?;
    let x_max = segments.iter().map(Trajectory::max_state_norm).fold(0.0, f64::max);
    identify_npdg(game, nash, &est, cfg.delta, x_max, &IdentifyOptions::default())
}

/// Designed LISC in result-file form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerRecord {
    #[serde(with = "io::rows")]
    pub xi_a: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub xi_h: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub k_li: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub q_li: DMatrix<f64>,
    #[serde(with = "io::rows")]
    pub r_li: DMatrix<f64>,
    pub theta: Vec<f64>,
    #[serde(with = "io::rows")]
    pub k_fi: DMatrix<f64>,
    pub cs_sign: CsSign,
    /// Relative automation-input mismatch on the design scenario.
    pub mismatch: f64,
    pub initial_mismatch: f64,
}

impl ControllerRecord {
    pub fn controller(&self) -> LiscController<f64> {
        let xi = CooperationStateDesign { xi_a: self.xi_a.clone(), xi_h: self.xi_h.clone() };
        LiscController::new(self.k_li.clone(), xi, self.q_li.clone(), self.r_li.clone())
    }
}

/// Cooperation state, extended system and LISC weight search against the FISC run on
/// `cfg.lisc_design_scenario`.
pub fn design_lisc_vm(
    cfg: &ScenarioConfig,
    fisc: &FiscRecord,
    game: &DifferentialGame<f64>,
    ident: &IdentificationResult<f64>,
) -> Result<(ControllerRecord, CsReport<f64>)> {
    let dyn_ = &game.dynamics;
    let part = StatePartition::new(MEASURABLE.to_vec(), NONMEASURABLE.to_vec(), 4)?;
    part.validate_structure(&dyn_.a)?;
    let (xi, report) = derive_cooperation_state(&ident.pot, dyn_, &part, cfg.cs_sign)?;
    let ext = build_extended_system(dyn_, &part, &xi)?;
    let sc = &cfg.lisc_design_scenario;
    let reference = simulate_scenario(dyn_, &fisc.k_h, Automation::Feedback(fisc.k_fi.clone()), sc)?;
    let par = cfg.lisc_weights;
    let init = DVector::zeros(par.len(ext.dim(), ext.automation_inputs));
    let design = design_lisc(&ext, &xi, par, &init, &DesignOptions::default(), |c| {
        let mut c = c.clone();
        let run = simulate_scenario(dyn_, &fisc.k_h, Automation::Lisc(&mut c), sc).ok()?;
        let m = relative_input_mismatch(&reference, &run);
        (m.is_finite() && run.max_state_norm() < DIVERGENCE_LIMIT).then_some(m)
    })?;
    let c = &design.controller;
    Ok((
        ControllerRecord {
            xi_a: xi.xi_a,
            xi_h: xi.xi_h,
            k_li: c.k_li.clone(),
            q_li: c.q_li.clone(),
            r_li: c.r_li.clone(),
            theta: fisc.theta.clone(),
            k_fi: fisc.k_fi.clone(),
            cs_sign: cfg.cs_sign,
            mismatch: design.objective,
            initial_mismatch: design.initial_objective,
        },
        report,
    ))
}

/// State norm beyond which a candidate run counts as diverged.
const DIVERGENCE_LIMIT: f64 = 1e3;

/// Certificate over every reset segment of `clean`: largest per-player distance, largest
/// trajectory deviation and total deviation-bound violations.
pub fn certify_segments(
    game: &DifferentialGame<f64>,
    nash: &NashSolution<f64>,
    result: &IdentificationResult<f64>,
    scenario: &Scenario,
    clean: &Trajectory<f64>,
) -> Result<(f64, f64, usize)> {
    let mut max_dd = 0.0f64;
    let mut dev = 0.0f64;
    let mut violations = 0;
    for seg in scenario.split(clean) {
        let t0 = seg.times[0];
        let times: Vec<f64> = seg.times.iter().map(|t| t - t0).collect();
        let cert = certify(game, nash, &result.pot, &seg.state(0), &times, result.delta_used, 1.0)?;
        max_dd = cert.per_player_distance.iter().copied().fold(max_dd, f64::max);
        dev = dev.max(cert.trajectory_deviation);
        violations += cert.bound_violations;
    }
    Ok((max_dd, dev, violations))
}

/// Scenario metrics. Identification entries are present only when a surrogate is supplied;
/// they are certified over the identification experiment's initial states, since the
/// driving scenarios usually start at rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub controller: ControllerKind,
    /// Manipulator lateral-error RMSE (m).
    pub rmse_dm: f64,
    pub max_dd: Option<f64>,
    pub traj_dev: Option<f64>,
    pub delta_feasible: Option<f64>,
}

/// Runs the configured controller against the designed game's human gain.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    fisc: &FiscRecord,
    lisc: Option<&ControllerRecord>,
    surrogate: Option<(&DifferentialGame<f64>, &NashSolution<f64>, &IdentificationResult<f64>)>,
) -> Result<(Trajectory<f64>, Metrics)> {
    let dyn_ = cfg.dynamics()?;
    let sc = &cfg.scenario;
    let traj = match cfg.controller {
        ControllerKind::Nc => simulate_scenario(&dyn_, &fisc.k_h, Automation::Feedback(k_nc()), sc)?,
        ControllerKind::Fisc => simulate_scenario(&dyn_, &fisc.k_h, Automation::Feedback(fisc.k_fi.clone()), sc)?,
        ControllerKind::Lisc => {
            let mut c = lisc.ok_or(Error::MissingDesign)?.controller();
            simulate_scenario(&dyn_, &fisc.k_h, Automation::Lisc(&mut c), sc)?
        }
    };
    let mut metrics = Metrics { controller: cfg.controller, rmse_dm: manipulator_rmse(&traj), max_dd: None, traj_dev: None, delta_feasible: None };
    if let Some((game, nash, ident)) = surrogate {
        let exp = Scenario::identification_experiment();
        let clean = simulate_scenario(&game.dynamics, &nash.k[HUMAN], Automation::Feedback(nash.k[AUTOMATION].clone()), &exp)?;
        let (dd, dev, _) = certify_segments(game, nash, ident, &exp, &clean)?;
        metrics.max_dd = Some(dd);
        metrics.traj_dev = Some(dev);
        metrics.delta_feasible = Some(ident.delta_used);
    }
    Ok((traj, metrics))
}

/// One replayed invariant: passes when `value <= tol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub ok: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self { name: name.into(), value, tol, ok: value <= tol }
    }

    fn with_ok(mut self, ok: bool) -> Self {
        self.ok = ok;
        self
    }
}

/// Identification constraint tolerance used when replaying result files.
pub const TOL_REPLAY: f64 = 1e-6;
/// Tolerance on the cooperation-state Riccati identity.
pub const TOL_ARE_IDENTITY: f64 = 1e-8;
/// Tolerance on `M M^+ M = M`.
pub const TOL_PINV: f64 = 1e-9;

/// Replays every invariant the stored artifacts must satisfy, from scratch: the coupled
/// Riccati equations and stored gains of the designed game, the identification
/// constraints and certificate of the surrogate, and the cooperation-state diagnostics of
/// the controller. Later artifacts are skipped when earlier ones are absent.
pub fn verify_artifacts(
    cfg: &ScenarioConfig,
    fisc: &FiscRecord,
    npdg: Option<&NpdgRecord>,
    controller: Option<&ControllerRecord>,
) -> Result<Vec<Check>> {
    let tol = crate::lqgame::Tolerances::<f64>::default();
    let (game, nash) = fisc.game(cfg)?;
    let mut checks = Vec::new();
    let ric = coupled_riccati_residuals(&game, &nash.p, &nash.k)?.into_iter().fold(0.0, f64::max);
    checks.push(Check::new("fisc.riccati", ric, tol.ric));
    let gain_gap = (&fisc.k_fi - &nash.k[AUTOMATION]).norm().max((&fisc.k_h - &nash.k[HUMAN]).norm());
    checks.push(Check::new("fisc.gain_replay", gain_gap, tol.ric));
    let spectral_abscissa = nash.ac.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::new("fisc.spectral_abscissa", spectral_abscissa, 0.0).with_ok(spectral_abscissa < 0.0));
    let Some(npdg) = npdg else { return Ok(checks) };
    let ident = npdg.to_result(&game.dynamics)?;
    let rep = check_identification(&ident, &game, &nash);
    for (name, v) in [
        ("riccati", rep.riccati),
        ("gain_match", rep.gain_match),
        ("normalization_lower", rep.normalization_lower),
        ("normalization_upper", rep.normalization_upper),
        ("distance_bound", rep.distance_bound),
        ("scale_guard", rep.scale_guard),
        ("asymmetry", rep.asymmetry),
    ] {
        checks.push(Check::new(format!("npdg.{name}"), v, TOL_REPLAY));
    }
    let exp = Scenario::identification_experiment();
    let clean = simulate_scenario(&game.dynamics, &nash.k[HUMAN], Automation::Feedback(nash.k[AUTOMATION].clone()), &exp)?;
    let (dd, _, violations) = certify_segments(&game, &nash, &ident, &exp, &clean)?;
    checks.push(Check::new("npdg.distance_below_delta", dd, ident.delta_used).with_ok(dd < ident.delta_used));
    checks.push(Check::new("npdg.deviation_bound_violations", violations as f64, 0.0));
    let Some(ctrl) = controller else { return Ok(checks) };
    let part = StatePartition::new(MEASURABLE.to_vec(), NONMEASURABLE.to_vec(), 4)?;
    let (xi, cs) = derive_cooperation_state(&ident.pot, &game.dynamics, &part, ctrl.cs_sign)?;
    checks.push(Check::new("cs.are_identity", cs.are_identity, TOL_ARE_IDENTITY));
    checks.push(Check::new("cs.pinv_contract", cs.pinv_contract, TOL_PINV));
    let xi_gap = (&xi.xi_a - &ctrl.xi_a).norm().max((&xi.xi_h - &ctrl.xi_h).norm());
    checks.push(Check::new("cs.xi_replay", xi_gap, TOL_REPLAY));
    if ctrl.cs_sign == CsSign::Corrected {
        let b = game.dynamics.stacked_b();
        let split: Vec<DMatrix<f64>> =
            (0..2).map(|i| ident.pot.k.rows(game.dynamics.input_offset(i), game.dynamics.b[i].ncols()).into_owned()).collect();
        let times: Vec<f64> = TimeGrid::default().times();
        let mut worst = 0.0f64;
        for seg in exp.split(&clean) {
            let run = simulate_closed_loop(&(&game.dynamics.a - &b * &ident.pot.k), &seg.state(0), &times, Some(&split))?;
            worst = worst.max(cs_consistency_residual(&ident.pot, &game.dynamics, ctrl.cs_sign, &run));
        }
        checks.push(Check::new("cs.consistency", worst, TOL_REPLAY));
    }
    Ok(checks)
}

/// Column names of a vehicle-manipulator trajectory file.
pub fn vm_trajectory_header() -> Vec<String> {
    ["t", "d_m", "dalpha", "d_v", "dtheta", "delta", "adot", "alphadot"].iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p_l() -> f64 {
        VmParams::default().l
    }

    #[test]
    fn automation_input_column() {
        let d = build_vm_model::<f64>(&VmParams::default(), AVariant::Kinematic).unwrap();
        let expected = [p_l() * 1.2, 0.0, 0.0, 1.2];
        for (a, b) in d.b[AUTOMATION].iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn human_input_orientation_cases() {
        let mut p = VmParams { alpha_e: 0.0, ..Default::default() };
        let d = build_vm_model::<f64>(&p, AVariant::Kinematic).unwrap();
        // sin(0) = 0 and cos(0) = 1: the manipulator-error row of B_h is [0, a_e].
        assert_eq!(d.b[HUMAN].row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, p.a_e]);
        assert_eq!(d.b[HUMAN].column(0).as_slice(), &[0.0, 0.0, 0.0, 0.0]);
        p.alpha_e = std::f64::consts::FRAC_PI_2;
        let d = build_vm_model::<f64>(&p, AVariant::Kinematic).unwrap();
        let c = d.b[HUMAN].column(0);
        assert!((c[0] - 1.0).abs() < 1e-15 && c[1].abs() < 1e-15 && c[2] == 0.0 && c[3] == 0.0);
    }

    #[test]
    fn variants_differ_only_in_vehicle_row() {
        let p = VmParams::default();
        let k = build_vm_model::<f64>(&p, AVariant::Kinematic).unwrap();
        let pr = build_vm_model::<f64>(&p, AVariant::Printed).unwrap();
        assert_eq!(k.a[(2, 3)], 1.2);
        assert_eq!(pr.a[(2, 2)], 1.2);
        assert_eq!(k.a[(1, 1)], -1.0);
        assert_eq!((k.a - pr.a).iter().filter(|v| **v != 0.0).count(), 2);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = VmParams { v: 0.0, ..Default::default() };
        assert!(matches!(build_vm_model::<f64>(&p, AVariant::Kinematic), Err(Error::InvalidParams(_))));
    }
}
