//! Two-player linear-quadratic differential games: model types, Nash equilibria via
//! coupled algebraic Riccati equations, and exact closed-loop simulation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, check_shape, check_square, sym};
use crate::scalar::{lit, to_f64, Real};

/// Numerical tolerances shared by the game solvers.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances<T> {
    /// Frobenius bound on Riccati residuals.
    pub ric: T,
    /// Eigenvalue slack when testing positive semidefiniteness.
    pub psd: T,
    /// Eigenvalue floor when testing positive definiteness.
    pub pd: T,
    /// Linear-algebra identity tolerance (gain formulas and similar).
    pub lin: T,
}

impl<T: Real> Default for Tolerances<T> {
    fn default() -> Self {
        Self { ric: lit(1e-8), psd: lit(1e-9), pd: lit(1e-9), lin: lit(1e-9) }
    }
}

/// Shared plant `x' = A x + sum_i B_i u_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiGameDynamics<T: Real> {
    pub a: DMatrix<T>,
    pub b: Vec<DMatrix<T>>,
}

impl<T: Real> LtiGameDynamics<T> {
    pub fn new(a: DMatrix<T>, b: Vec<DMatrix<T>>) -> Result<Self> {
        let n = check_square(&a, "A")?;
        if b.is_empty() {
            return Err(Error::ShapeMismatch("at least one player input matrix required".into()));
        }
        for (i, bi) in b.iter().enumerate() {
            if bi.nrows() != n {
                return Err(Error::ShapeMismatch(format!(
                    "B[{i}] has {} rows, expected {n}",
                    bi.nrows()
                )));
            }
        }
        Ok(Self { a, b })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn players(&self) -> usize {
        self.b.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.b.iter().map(|b| b.ncols()).collect()
    }

    pub fn total_inputs(&self) -> usize {
        self.b.iter().map(|b| b.ncols()).sum()
    }

    /// Column offset of player `i` inside the stacked input vector.
    pub fn input_offset(&self, i: usize) -> usize {
        self.b[..i].iter().map(|b| b.ncols()).sum()
    }

    /// Stacked input matrix `[B_1, ..., B_N]`.
    pub fn stacked_b(&self) -> DMatrix<T> {
        let refs: Vec<&DMatrix<T>> = self.b.iter().collect();
        linalg::hstack(&refs)
    }
}

/// Quadratic cost of one player: state weight `Q` and one input block `R_ij` per player.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerCost<T: Real> {
    pub owner: usize,
    pub q: DMatrix<T>,
    pub r: Vec<DMatrix<T>>,
}

impl<T: Real> PlayerCost<T> {
    pub fn new(owner: usize, q: DMatrix<T>, r: Vec<DMatrix<T>>) -> Self {
        Self { owner, q, r }
    }

    /// Own-input weight `R_ii`.
    pub fn r_own(&self) -> &DMatrix<T> {
        &self.r[self.owner]
    }

    /// Returns the same cost multiplied by `s > 0`; the Nash gains are unchanged.
    pub fn scaled(&self, s: T) -> Self {
        Self {
            owner: self.owner,
            q: &self.q * s,
            r: self.r.iter().map(|m| m * s).collect(),
        }
    }

    pub fn validate(&self, dims: &[usize], n: usize, tol: &Tolerances<T>) -> Result<()> {
        check_shape(&self.q, n, n, "Q")?;
        if self.r.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "player {} has {} R blocks, expected {}",
                self.owner,
                self.r.len(),
                dims.len()
            )));
        }
        if (&self.q - self.q.transpose()).norm() > tol.lin * (T::one() + self.q.norm()) {
            return Err(Error::IndefiniteWeight(format!("Q of player {} is not symmetric", self.owner)));
        }
        if linalg::min_eigenvalue(&self.q) < -tol.psd {
            return Err(Error::IndefiniteWeight(format!("Q of player {} is not PSD", self.owner)));
        }
        for (j, rj) in self.r.iter().enumerate() {
            check_shape(rj, dims[j], dims[j], "R block")?;
            let lmin = linalg::min_eigenvalue(rj);
            if j == self.owner {
                if lmin <= tol.pd {
                    return Err(Error::IndefiniteWeight(format!(
                        "R[{j}{j}] of player {} is not positive definite",
                        self.owner
                    )));
                }
            } else if lmin < -tol.psd {
                return Err(Error::IndefiniteWeight(format!(
                    "cross weight R[{}{j}] is not PSD",
                    self.owner
                )));
            }
        }
        Ok(())
    }
}

/// Dynamics plus one cost per player.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferentialGame<T: Real> {
    pub dynamics: LtiGameDynamics<T>,
    pub costs: Vec<PlayerCost<T>>,
}

impl<T: Real> DifferentialGame<T> {
    pub fn new(dynamics: LtiGameDynamics<T>, costs: Vec<PlayerCost<T>>) -> Result<Self> {
        let game = Self { dynamics, costs };
        game.validate(&Tolerances::default())?;
        Ok(game)
    }

    pub fn validate(&self, tol: &Tolerances<T>) -> Result<()> {
        let dims = self.dynamics.input_dims();
        if self.costs.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} costs for {} players",
                self.costs.len(),
                dims.len()
            )));
        }
        for (i, c) in self.costs.iter().enumerate() {
            if c.owner != i {
                return Err(Error::ShapeMismatch(format!("cost {i} is owned by player {}", c.owner)));
            }
            c.validate(&dims, self.dynamics.state_dim(), tol)?;
        }
        Ok(())
    }
}

/// Feedback Nash equilibrium of an LQ game.
#[derive(Debug, Clone, PartialEq)]
pub struct NashSolution<T: Real> {
    pub p: Vec<DMatrix<T>>,
    pub k: Vec<DMatrix<T>>,
    pub ac: DMatrix<T>,
    pub iterations: usize,
    pub residual: T,
}

impl<T: Real> NashSolution<T> {
    /// Stacked gain `[K_1; ...; K_N]`.
    pub fn stacked_k(&self) -> DMatrix<T> {
        let refs: Vec<&DMatrix<T>> = self.k.iter().collect();
        linalg::vstack(&refs)
    }
}

/// Sampled trajectory; column `k` of `states` and of each `inputs[i]` belongs to `times[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Real> {
    pub times: Vec<T>,
    pub states: DMatrix<T>,
    pub inputs: Vec<DMatrix<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> DVector<T> {
        self.states.column(k).into_owned()
    }

    /// Stacked input of all players at sample `k`.
    pub fn stacked_input(&self, k: usize) -> DVector<T> {
        let total: usize = self.inputs.iter().map(|u| u.nrows()).sum();
        let mut out = DVector::zeros(total);
        let mut off = 0;
        for u in &self.inputs {
            out.rows_mut(off, u.nrows()).copy_from(&u.column(k));
            off += u.nrows();
        }
        out
    }

    /// Samples `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            times: self.times[start..start + len].to_vec(),
            states: self.states.columns(start, len).into_owned(),
            inputs: self.inputs.iter().map(|u| u.columns(start, len).into_owned()).collect(),
        }
    }

    /// Largest Euclidean state norm over the samples.
    pub fn max_state_norm(&self) -> T {
        self.states
            .column_iter()
            .map(|c| c.norm())
            .fold(T::zero(), |a, b| a.max(b))
    }
}

/// Uniform sampling grid `t0, t0 + dt, ..., t1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self { t0: 0.0, t1: 10.0, dt: 0.04 }
    }
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !(t1 >= t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidParams(format!("bad grid [{t0}, {t1}] step {dt}")));
        }
        Ok(Self { t0, t1, dt })
    }

    pub fn len(&self) -> usize {
        ((self.t1 - self.t0) / self.dt + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn times<T: Real>(&self) -> Vec<T> {
        (0..self.len()).map(|k| lit(self.t0 + k as f64 * self.dt)).collect()
    }
}

/// Solves the single-agent LQR problem; returns `(P, K)` with `K = R^{-1} B^T P`.
pub fn solve_lqr<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    r: &DMatrix<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let tol = Tolerances::<T>::default();
    let n = check_square(a, "A")?;
    check_shape(q, n, n, "Q")?;
    if linalg::min_eigenvalue(q) < -tol.psd * (T::one() + q.norm()) {
        return Err(Error::IndefiniteWeight("Q is not PSD".into()));
    }
    if linalg::min_eigenvalue(r) <= tol.pd {
        return Err(Error::IndefiniteWeight("R is not positive definite".into()));
    }
    let p = linalg::care(a, b, q, r)?;
    let k = gain_from_riccati(r, b, &p)?;
    Ok((p, k))
}

/// `K = R^{-1} B^T P`.
pub fn gain_from_riccati<T: Real>(r: &DMatrix<T>, b: &DMatrix<T>, p: &DMatrix<T>) -> Result<DMatrix<T>> {
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IndefiniteWeight("R is not positive definite".into()))?;
    Ok(chol.solve(&(b.transpose() * p)))
}

/// `A - sum_i B_i K_i`.
pub fn closed_loop_matrix<T: Real>(dynamics: &LtiGameDynamics<T>, gains: &[DMatrix<T>]) -> Result<DMatrix<T>> {
    if gains.len() != dynamics.players() {
        return Err(Error::ShapeMismatch(format!(
            "{} gains for {} players",
            gains.len(),
            dynamics.players()
        )));
    }
    let n = dynamics.state_dim();
    let mut ac = dynamics.a.clone();
    for (bi, ki) in dynamics.b.iter().zip(gains) {
        check_shape(ki, bi.ncols(), n, "gain")?;
        ac -= bi * ki;
    }
    Ok(ac)
}

/// Per-player Frobenius residuals of the coupled Riccati equations
/// `A_c^T P_i + P_i A_c + Q_i + sum_j K_j^T R_ij K_j = 0`.
pub fn coupled_riccati_residuals<T: Real>(
    game: &DifferentialGame<T>,
    p: &[DMatrix<T>],
    k: &[DMatrix<T>],
) -> Result<Vec<T>> {
    let ac = closed_loop_matrix(&game.dynamics, k)?;
    Ok(game
        .costs
        .iter()
        .zip(p)
        .map(|(c, pi)| {
            let mut f = ac.transpose() * pi + pi * &ac + &c.q;
            for (kj, rij) in k.iter().zip(&c.r) {
                f += kj.transpose() * rij * kj;
            }
            f.norm()
        })
        .collect())
}

/// Options for [`solve_coupled_riccati_with`].
#[derive(Debug, Clone, Copy)]
pub struct CoupledOptions<T> {
    pub max_iter: usize,
    pub tol: Tolerances<T>,
}

impl<T: Real> Default for CoupledOptions<T> {
    fn default() -> Self {
        Self { max_iter: 500, tol: Tolerances::default() }
    }
}

/// Nash equilibrium with default options.
pub fn solve_coupled_riccati<T: Real>(game: &DifferentialGame<T>) -> Result<NashSolution<T>> {
    solve_coupled_riccati_with(game, &CoupledOptions::default())
}

/// Nash equilibrium by Gauss-Seidel best responses.
///
/// Each sweep fixes the other players' gains and solves player `i`'s LQR problem on
/// `A - sum_{j != i} B_j K_j` with the cross costs folded into its state weight. When a
/// best response is not stabilizable the step falls back to a Lyapunov policy
/// evaluation with the current gains.
pub fn solve_coupled_riccati_with<T: Real>(
    game: &DifferentialGame<T>,
    opts: &CoupledOptions<T>,
) -> Result<NashSolution<T>> {
    game.validate(&opts.tol)?;
    let dynamics = &game.dynamics;
    let players = dynamics.players();
    let mut k = initial_gains(game)?;
    let mut p: Vec<DMatrix<T>> = vec![DMatrix::zeros(dynamics.state_dim(), dynamics.state_dim()); players];

    let mut last = T::max_value().unwrap_or_else(T::one);
    let mut best: Option<(T, Vec<DMatrix<T>>, Vec<DMatrix<T>>, usize)> = None;
    for iter in 1..=opts.max_iter {
        for i in 0..players {
            let cost = &game.costs[i];
            let mut ai = dynamics.a.clone();
            let mut qi = cost.q.clone();
            for j in (0..players).filter(|&j| j != i) {
                ai -= &dynamics.b[j] * &k[j];
                qi += k[j].transpose() * &cost.r[j] * &k[j];
            }
            let qi = sym(&qi);
            match solve_lqr(&ai, &dynamics.b[i], &qi, cost.r_own()) {
                Ok((pi, ki)) => {
                    p[i] = pi;
                    k[i] = ki;
                }
                Err(Error::NonStabilizable) => {
                    let ac = closed_loop_matrix(dynamics, &k)?;
                    let rhs = sym(&(qi + k[i].transpose() * cost.r_own() * &k[i]));
                    p[i] = linalg::lyap(&ac, &rhs)?;
                    k[i] = gain_from_riccati(cost.r_own(), &dynamics.b[i], &p[i])?;
                }
                Err(e) => return Err(e),
            }
        }
        let res = coupled_riccati_residuals(game, &p, &k)?
            .into_iter()
            .fold(T::zero(), |a, b| a.max(b));
        if !res.is_finite() {
            break;
        }
        if best.as_ref().map_or(true, |b| res < b.0) {
            best = Some((res, p.clone(), k.clone(), iter));
        }
        // Stop once converged and no longer improving by more than roundoff.
        if res <= opts.tol.ric && (res >= last * lit(0.5) || res <= opts.tol.ric * lit(1e-3)) {
            break;
        }
        last = res;
    }
    let Some((res, p, k, iterations)) = best else {
        return Err(Error::NoConvergence { iterations: opts.max_iter, last_residual: f64::NAN });
    };
    if res > opts.tol.ric {
        log::warn!("coupled Riccati stalled at residual {:.3e}", to_f64(res));
        return Err(Error::NoConvergence { iterations: opts.max_iter, last_residual: to_f64(res) });
    }
    log::trace!("coupled Riccati: residual {:.3e} after {iterations} sweeps", to_f64(res));
    let ac = closed_loop_matrix(dynamics, &k)?;
    if !linalg::is_hurwitz(&ac, T::zero()) {
        return Err(Error::NonStabilizable);
    }
    Ok(NashSolution { p, k, ac, iterations, residual: res })
}

/// Decoupled per-player LQR gains, or a joint LQR on the stacked inputs when some
/// player cannot stabilize the plant alone.
fn initial_gains<T: Real>(game: &DifferentialGame<T>) -> Result<Vec<DMatrix<T>>> {
    let dynamics = &game.dynamics;
    let per_player: Result<Vec<DMatrix<T>>> = game
        .costs
        .iter()
        .zip(&dynamics.b)
        .map(|(c, b)| solve_lqr(&dynamics.a, b, &c.q, c.r_own()).map(|(_, k)| k))
        .collect();
    if let Ok(k) = per_player {
        if linalg::is_hurwitz(&closed_loop_matrix(dynamics, &k)?, T::zero()) {
            return Ok(k);
        }
    }
    let mut q_sum = DMatrix::zeros(dynamics.state_dim(), dynamics.state_dim());
    for c in &game.costs {
        q_sum += &c.q;
    }
    let r_blocks: Vec<&DMatrix<T>> = game.costs.iter().map(|c| c.r_own()).collect();
    let (_, k) = solve_lqr(&dynamics.a, &dynamics.stacked_b(), &q_sum, &linalg::block_diag(&r_blocks))?;
    let mut out = Vec::with_capacity(dynamics.players());
    for i in 0..dynamics.players() {
        out.push(k.rows(dynamics.input_offset(i), dynamics.b[i].ncols()).into_owned());
    }
    Ok(out)
}

/// Samples `x(t) = e^{A_c (t - t_0)} x_0` on `times`; inputs are `-K_i x` when gains are given.
pub fn simulate_closed_loop<T: Real>(
    ac: &DMatrix<T>,
    x0: &DVector<T>,
    times: &[T],
    gains: Option<&[DMatrix<T>]>,
) -> Result<Trajectory<T>> {
    let n = check_square(ac, "A_c")?;
    if x0.len() != n {
        return Err(Error::ShapeMismatch(format!("x0 has {} entries, expected {n}", x0.len())));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParams("time grid must be strictly increasing".into()));
    }
    let len = times.len();
    let mut states = DMatrix::zeros(n, len);
    if len > 0 {
        states.set_column(0, x0);
    }
    let mut cached: Option<(T, DMatrix<T>)> = None;
    for k in 1..len {
        let h = times[k] - times[k - 1];
        let phi = match &cached {
            Some((hc, phi)) if (*hc - h).abs() <= T::default_epsilon() * lit(16.0) * h.abs() => phi,
            _ => {
                cached = Some((h, linalg::expm(&(ac * h))));
                &cached.as_ref().expect("just set").1
            }
        };
        let next = phi * states.column(k - 1);
        states.set_column(k, &next);
    }
    let inputs = match gains {
        Some(g) => g
            .iter()
            .map(|ki| {
                if ki.ncols() != n {
                    return Err(Error::ShapeMismatch("gain column count".into()));
                }
                Ok(-(ki * &states))
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    Ok(Trajectory { times: times.to_vec(), states, inputs })
}

/// `dH_i/du_i = R_ii u_i + B_i^T P_i x` for stacked input `u`.
pub fn player_hamiltonian_gradient<T: Real>(
    game: &DifferentialGame<T>,
    nash: &NashSolution<T>,
    x: &DVector<T>,
    u: &DVector<T>,
    i: usize,
) -> Result<DVector<T>> {
    let d = &game.dynamics;
    if i >= d.players() {
        return Err(Error::ShapeMismatch(format!("no player {i}")));
    }
    if x.len() != d.state_dim() || u.len() != d.total_inputs() {
        return Err(Error::ShapeMismatch("state or input length".into()));
    }
    let ui = u.rows(d.input_offset(i), d.b[i].ncols());
    Ok(game.costs[i].r_own() * ui + d.b[i].transpose() * (&nash.p[i] * x))
}
