//! Exact and near potential differential games: the single-agent surrogate, the
//! differential distance, distance certificates and the trajectory deviation bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, check_shape};
use crate::lqgame::{gain_from_riccati, simulate_closed_loop, DifferentialGame, LtiGameDynamics, NashSolution, Trajectory};
use crate::scalar::{lit, Real};

/// Single-agent LQR surrogate `J_p = 1/2 int x^T Qp x + u^T Rp u` over the stacked input.
///
/// `scale[i]` is the positive factor applied to player `i`'s cost when comparing it
/// with the surrogate. Scaling a player's cost leaves the Nash gains unchanged, so the
/// comparison is made against the best representative of each player's cost class.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialGame<T: Real> {
    pub qp: DMatrix<T>,
    pub rp: DMatrix<T>,
    pub pp: DMatrix<T>,
    pub k: DMatrix<T>,
    pub acp: DMatrix<T>,
    pub scale: Vec<T>,
}

impl<T: Real> PotentialGame<T> {
    /// Builds the surrogate by solving its LQR problem.
    pub fn from_weights(dynamics: &LtiGameDynamics<T>, qp: DMatrix<T>, rp: DMatrix<T>, scale: Vec<T>) -> Result<Self> {
        let b = dynamics.stacked_b();
        let (pp, k) = crate::lqgame::solve_lqr(&dynamics.a, &b, &qp, &rp)?;
        let acp = &dynamics.a - &b * &k;
        Self::check_scale(dynamics, &scale)?;
        Ok(Self { qp, rp, pp, k, acp, scale })
    }

    /// Builds the surrogate from a given Riccati solution `Pp`.
    pub fn from_solution(
        dynamics: &LtiGameDynamics<T>,
        qp: DMatrix<T>,
        rp: DMatrix<T>,
        pp: DMatrix<T>,
        scale: Vec<T>,
    ) -> Result<Self> {
        let b = dynamics.stacked_b();
        let k = gain_from_riccati(&rp, &b, &pp)?;
        let acp = &dynamics.a - &b * &k;
        Self::check_scale(dynamics, &scale)?;
        Ok(Self { qp, rp, pp, k, acp, scale })
    }

    fn check_scale(dynamics: &LtiGameDynamics<T>, scale: &[T]) -> Result<()> {
        if scale.len() != dynamics.players() || scale.iter().any(|s| !(*s > T::zero())) {
            return Err(Error::InvalidParams("player scale factors must be positive, one per player".into()));
        }
        Ok(())
    }

    /// Residual of the surrogate Riccati equation (Frobenius norm).
    pub fn riccati_residual(&self, dynamics: &LtiGameDynamics<T>) -> T {
        let b = dynamics.stacked_b();
        let a = &dynamics.a;
        let f = a.transpose() * &self.pp + &self.pp * a + &self.qp - &self.pp * &b * &self.k;
        f.norm()
    }
}

/// Coefficient mismatch per player: `(||[Rp]_i - s_i [0 .. R_ii .. 0]||_F, ||B_i^T Pp - s_i B_i^T P_i||_F)`.
///
/// Both vanish exactly when every player's Hamiltonian gradient equals the surrogate's
/// gradient in that player's input for all states and inputs.
pub fn exact_pdg_residual<T: Real>(
    game: &DifferentialGame<T>,
    nash: &NashSolution<T>,
    pot: &PotentialGame<T>,
) -> Result<Vec<(T, T)>> {
    let d = &game.dynamics;
    let m = d.total_inputs();
    check_shape(&pot.rp, m, m, "Rp")?;
    check_shape(&pot.pp, d.state_dim(), d.state_dim(), "Pp")?;
    let mut out = Vec::with_capacity(d.players());
    for i in 0..d.players() {
        let off = d.input_offset(i);
        let pi = d.b[i].ncols();
        let s = pot.scale[i];
        let mut target = DMatrix::zeros(pi, m);
        target.columns_mut(off, pi).copy_from(&(game.costs[i].r_own() * s));
        let r_res = (pot.rp.rows(off, pi) - target).norm();
        let bt = d.b[i].transpose();
        let p_res = (&bt * &pot.pp - &bt * &nash.p[i] * s).norm();
        out.push((r_res, p_res));
    }
    Ok(out)
}

/// Differential distance time series along one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialDistance<T: Real> {
    /// `series[i][k]` is player `i`'s distance at sample `k`.
    pub series: Vec<Vec<T>>,
    pub max_per_player: Vec<T>,
    pub max: T,
}

/// `sigma_i(t) = ||(Rp u + B^T Pp x)_i - s_i (R_ii u_i + B_i^T P_i x)||_2` per sample.
pub fn differential_distance<T: Real>(
    game: &DifferentialGame<T>,
    nash: &NashSolution<T>,
    pot: &PotentialGame<T>,
    traj: &Trajectory<T>,
) -> Result<DifferentialDistance<T>> {
    let d = &game.dynamics;
    if traj.inputs.len() != d.players() || traj.states.nrows() != d.state_dim() {
        return Err(Error::ShapeMismatch("trajectory does not match the game".into()));
    }
    let b = d.stacked_b();
    let pot_grad_x = b.transpose() * &pot.pp;
    let mut series = vec![Vec::with_capacity(traj.len()); d.players()];
    for k in 0..traj.len() {
        let x = traj.state(k);
        let u = traj.stacked_input(k);
        let gp = &pot.rp * &u + &pot_grad_x * &x;
        for (i, s) in series.iter_mut().enumerate() {
            let off = d.input_offset(i);
            let pi = d.b[i].ncols();
            let ui = u.rows(off, pi);
            let gi = game.costs[i].r_own() * ui + d.b[i].transpose() * (&nash.p[i] * &x);
            s.push((gp.rows(off, pi) - gi * pot.scale[i]).norm());
        }
    }
    let max_per_player: Vec<T> = series
        .iter()
        .map(|s| s.iter().copied().fold(T::zero(), |a, b| a.max(b)))
        .collect();
    let max = max_per_player.iter().copied().fold(T::zero(), |a, b| a.max(b));
    Ok(DifferentialDistance { series, max_per_player, max })
}

/// Gradient-gap bound `max_i ||B_i^T Pp - s_i B_i^T P_i||_2 * x_max` and whether it is below `delta`.
pub fn npdg_distance_bound<T: Real>(
    dynamics: &LtiGameDynamics<T>,
    nash: &NashSolution<T>,
    pot: &PotentialGame<T>,
    x_max: T,
    delta: T,
) -> Result<(T, bool)> {
    if x_max < T::zero() {
        return Err(Error::NegativeXmax);
    }
    let gap = (0..dynamics.players())
        .map(|i| {
            let bt = dynamics.b[i].transpose();
            linalg::spectral_norm(&(&bt * &pot.pp - &bt * &nash.p[i] * pot.scale[i]))
        })
        .fold(T::zero(), |a, b| a.max(b));
    let bound = gap * x_max;
    Ok((bound, bound < delta))
}

/// Closed-loop system matrix error `||Ac* - Acp||_2`.
pub fn csme<T: Real>(ac_star: &DMatrix<T>, acp: &DMatrix<T>) -> Result<T> {
    if ac_star.shape() != acp.shape() {
        return Err(Error::ShapeMismatch("closed-loop matrices differ in shape".into()));
    }
    Ok(linalg::spectral_norm(&(ac_star - acp)))
}

/// `eps(t) = ||e^{Acp t} x0||_2 (e^{2 ||B||_2 delta t} - 1)` on `times` (relative to `times[0]`).
pub fn deviation_bound<T: Real>(delta: T, b: &DMatrix<T>, acp: &DMatrix<T>, x0: &DVector<T>, times: &[T]) -> Result<Vec<T>> {
    let traj = simulate_closed_loop(acp, x0, times, None)?;
    let bn = linalg::spectral_norm(b);
    let two = lit::<T>(2.0);
    let t0 = times.first().copied().unwrap_or_else(T::zero);
    Ok(times
        .iter()
        .enumerate()
        .map(|(k, &t)| traj.states.column(k).norm() * ((two * bn * delta * (t - t0)).exp() - T::one()))
        .collect())
}

/// Near-potential certificate along one initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct NpdgCertificate<T: Real> {
    pub delta: T,
    /// Max over time of each player's distance, taken over both the game and surrogate trajectories.
    pub per_player_distance: Vec<T>,
    pub x_max: T,
    pub bound_value: T,
    pub b_norm: T,
    /// Largest `||x_p(t) - x*(t)||`.
    pub trajectory_deviation: T,
    /// Samples where the deviation exceeds the bound `eps(delta)(t)`.
    pub bound_violations: usize,
    /// Max distance on consecutive windows, in order.
    pub window_distances: Vec<T>,
    /// Windows whose distance exceeds that of the preceding window.
    pub window_increases: usize,
}

impl<T: Real> NpdgCertificate<T> {
    pub fn is_valid(&self) -> bool {
        self.per_player_distance.iter().all(|&d| d < self.delta)
    }
}

/// Simulates the game's Nash closed loop and the surrogate from `x0` and evaluates the
/// distances, the gradient-gap bound and the deviation bound on `times`.
pub fn certify<T: Real>(
    game: &DifferentialGame<T>,
    nash: &NashSolution<T>,
    pot: &PotentialGame<T>,
    x0: &DVector<T>,
    times: &[T],
    delta: T,
    window: T,
) -> Result<NpdgCertificate<T>> {
    let d = &game.dynamics;
    let star = simulate_closed_loop(&nash.ac, x0, times, Some(&nash.k))?;
    let split: Vec<DMatrix<T>> = (0..d.players())
        .map(|i| pot.k.rows(d.input_offset(i), d.b[i].ncols()).into_owned())
        .collect();
    let surrogate = simulate_closed_loop(&pot.acp, x0, times, Some(&split))?;
    let dd_star = differential_distance(game, nash, pot, &star)?;
    let dd_pot = differential_distance(game, nash, pot, &surrogate)?;
    let per_player_distance: Vec<T> = dd_star
        .max_per_player
        .iter()
        .zip(&dd_pot.max_per_player)
        .map(|(a, b)| a.max(*b))
        .collect();
    let x_max = star.max_state_norm().max(surrogate.max_state_norm());
    let (bound_value, _) = npdg_distance_bound(d, nash, pot, x_max, delta)?;
    let b = d.stacked_b();
    let eps = deviation_bound(delta, &b, &pot.acp, x0, times)?;
    let slack = T::default_epsilon() * lit(64.0) * (T::one() + x0.norm());
    let mut violations = 0;
    let mut deviation = T::zero();
    for k in 0..times.len() {
        let dev = (surrogate.states.column(k) - star.states.column(k)).norm();
        deviation = deviation.max(dev);
        if dev > eps[k] + slack {
            violations += 1;
        }
    }

    let mut window_distances = Vec::new();
    if let (Some(&t0), true) = (times.first(), window > T::zero()) {
        let mut current: Option<(usize, T)> = None;
        for k in 0..times.len() {
            let w = ((times[k] - t0) / window + lit(1e-9)).floor().to_usize().unwrap_or(0);
            let v = d_at(&dd_star, k).max(d_at(&dd_pot, k));
            match &mut current {
                Some((idx, m)) if *idx == w => *m = m.max(v),
                _ => {
                    if let Some((_, m)) = current.take() {
                        window_distances.push(m);
                    }
                    current = Some((w, v));
                }
            }
        }
        if let Some((_, m)) = current {
            window_distances.push(m);
        }
    }
    let window_increases = window_distances.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(NpdgCertificate {
        delta,
        per_player_distance,
        x_max,
        bound_value,
        b_norm: linalg::spectral_norm(&b),
        trajectory_deviation: deviation,
        bound_violations: violations,
        window_distances,
        window_increases,
    })
}

fn d_at<T: Real>(dd: &DifferentialDistance<T>, k: usize) -> T {
    dd.series.iter().map(|s| s[k]).fold(T::zero(), |a, b| a.max(b))
}
