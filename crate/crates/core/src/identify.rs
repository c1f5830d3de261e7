//! Feedback-gain estimation from trajectories and identification of a near potential
//! surrogate under linear matrix inequality constraints.
//!
//! The surrogate `(Qp, Rp, Pp)` must satisfy
//! * the surrogate Riccati equation with the estimated gain: `A^T Pp + Pp A + Qp - Pp B K = 0`,
//! * gain matching: `B^T Pp = Rp K`,
//! * normalization: `I <= blockdiag(Qp, Rp) <= beta I`,
//! * the distance bound: `max_i ||B_i^T Pp - s_i B_i^T P_i||_2 x_max < delta`,
//! * the scale guard: `||Rp^{-1}||_2 ||s_i R_ii||_2 >= 1` for every player,
//!
//! while `beta` is minimized. Scaling a player's whole cost by `s_i > 0` leaves the
//! Nash gains unchanged, so the factors `s_i` select the representative of each
//! player's cost class against which the surrogate is compared. The two equalities are linear; `Qp` is eliminated through
//! the Riccati equation and the gain equation is solved exactly through a null-space
//! parametrization of `(Pp, Rp)`. The remaining convex constraints are handled by
//! alternating projections inside a feasibility oracle and `beta` is found by bisection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, sym};
use crate::lqgame::{DifferentialGame, NashSolution, Trajectory};
use crate::potential::PotentialGame;
use crate::scalar::{lit, to_f64, Real};

/// Least-squares feedback gain `u ~ -K x` for every player.
#[derive(Debug, Clone, PartialEq)]
pub struct GainEstimate<T: Real> {
    /// Stacked gain `[K_1; ...; K_N]`.
    pub khat: DMatrix<T>,
    /// Root-mean-square fit residual per player.
    pub residual: Vec<T>,
    pub sample_count: usize,
}

impl<T: Real> GainEstimate<T> {
    /// Wraps a known gain (no fit residual).
    pub fn exact(khat: DMatrix<T>, players: usize) -> Self {
        Self { khat, residual: vec![T::zero(); players], sample_count: 0 }
    }
}

/// Regression used by [`estimate_feedback_gains_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GainEstimator {
    /// Ordinary least squares on the measured states.
    Ols,
    /// Instrumental variables with the state measured `lag` samples earlier as the
    /// instrument. Measurement noise on the regressor biases OLS towards zero; white
    /// noise is uncorrelated with the lagged instrument, so this estimator is consistent.
    InstrumentalVariable { lag: usize },
}

/// Ordinary least-squares gains from one trajectory.
pub fn estimate_feedback_gains<T: Real>(traj: &Trajectory<T>) -> Result<GainEstimate<T>> {
    estimate_feedback_gains_with(std::slice::from_ref(traj), GainEstimator::Ols)
}

/// Gains from one or more trajectory segments. Instruments never cross segment borders.
pub fn estimate_feedback_gains_with<T: Real>(segments: &[Trajectory<T>], estimator: GainEstimator) -> Result<GainEstimate<T>> {
    let first = segments
        .first()
        .ok_or(Error::RankDeficient { rank: 0, required: 1 })?;
    let n = first.states.nrows();
    let players = first.inputs.len();
    let dims: Vec<usize> = first.inputs.iter().map(|u| u.nrows()).collect();
    let m: usize = dims.iter().sum();
    let lag = match estimator {
        GainEstimator::Ols => 0,
        GainEstimator::InstrumentalVariable { lag } => lag.max(1),
    };
    let count: usize = segments.iter().map(|s| s.len().saturating_sub(lag)).sum();
    let mut x = DMatrix::<T>::zeros(n, count);
    let mut z = DMatrix::<T>::zeros(n, count);
    let mut u = DMatrix::<T>::zeros(m, count);
    let mut col = 0;
    for seg in segments {
        if seg.states.nrows() != n || seg.inputs.len() != players {
            return Err(Error::ShapeMismatch("segments disagree in dimensions".into()));
        }
        for k in lag..seg.len() {
            x.set_column(col, &seg.states.column(k));
            z.set_column(col, &seg.states.column(k - lag));
            u.set_column(col, &seg.stacked_input(k));
            col += 1;
        }
    }
    let xz = &x * z.transpose();
    let sv = linalg::singular_values(&xz);
    let smax = sv.first().copied().unwrap_or_else(T::zero);
    let rank = sv
        .iter()
        .filter(|&&s| s > smax * T::default_epsilon() * lit((n.max(count)) as f64) && s > T::zero())
        .count();
    if count < n || rank < n {
        return Err(Error::RankDeficient { rank, required: n });
    }
    // K^T solves (X Z^T)^T K^T = -(U Z^T)^T.
    let uz = &u * z.transpose();
    let kt = xz
        .transpose()
        .lu()
        .solve(&(-uz.transpose()))
        .ok_or(Error::RankDeficient { rank, required: n })?;
    let khat = kt.transpose();
    let fit = &u + &khat * &x;
    let mut residual = Vec::with_capacity(players);
    let mut off = 0;
    for &p in &dims {
        let r = fit.rows(off, p).norm() / lit::<T>((count.max(1)) as f64).sqrt();
        residual.push(r);
        off += p;
    }
    Ok(GainEstimate { khat, residual, sample_count: count })
}

/// Named residuals of the identification constraints; each is zero when satisfied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// `||A^T Pp + Pp A + Qp - Pp B K||_F`.
    pub riccati: f64,
    /// `||B^T Pp - Rp K||_F`.
    pub gain_match: f64,
    /// `max(0, 1 - lambda_min(blockdiag(Qp, Rp)))`.
    pub normalization_lower: f64,
    /// `max(0, lambda_max(blockdiag(Qp, Rp)) - beta)`.
    pub normalization_upper: f64,
    /// `max(0, bound - delta)` with `bound = max_i ||B_i^T Pp - s_i B_i^T P_i||_2 x_max`.
    pub distance_bound: f64,
    /// Value of the distance bound itself (must be strictly below delta).
    pub bound_value: f64,
    /// `max_i max(0, 1 - ||Rp^{-1}||_2 s_i ||R_ii||_2)` with the player scale factors `s_i`.
    pub scale_guard: f64,
    /// The same guard with every `s_i = 1`. Diagnostic only: it ignores that each player's
    /// cost is fixed only up to scale, and is not part of [`ConstraintReport::violations`].
    #[serde(default)]
    pub scale_guard_unscaled: f64,
    /// Asymmetry `||X - X^T||_F` summed over `Pp`, `Qp`, `Rp`.
    pub asymmetry: f64,
}

impl ConstraintReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.riccati,
            self.gain_match,
            self.normalization_lower,
            self.normalization_upper,
            self.distance_bound,
            self.scale_guard,
            self.asymmetry,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// Names of the constraints whose residual exceeds `tol` (the distance bound also
    /// fails when it is not strictly below delta).
    pub fn violations(&self, tol: f64, delta: f64) -> Vec<&'static str> {
        let mut out = Vec::new();
        let named = [
            ("riccati", self.riccati),
            ("gain_match", self.gain_match),
            ("normalization_lower", self.normalization_lower),
            ("normalization_upper", self.normalization_upper),
            ("distance_bound", self.distance_bound),
            ("scale_guard", self.scale_guard),
            ("asymmetry", self.asymmetry),
        ];
        for (name, v) in named {
            if !(v <= tol) {
                out.push(name);
            }
        }
        if !(self.bound_value < delta) && !out.contains(&"distance_bound") {
            out.push("distance_bound");
        }
        out
    }
}

/// Identified surrogate with its certificate data.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationResult<T: Real> {
    pub pot: PotentialGame<T>,
    pub beta: T,
    pub khat: DMatrix<T>,
    pub delta_used: T,
    pub x_max: T,
    pub residuals: ConstraintReport,
}

/// Recomputes every constraint residual from scratch.
pub fn check_identification<T: Real>(
    result: &IdentificationResult<T>,
    game: &DifferentialGame<T>,
    nash: &NashSolution<T>,
) -> ConstraintReport {
    constraint_report(
        game,
        nash,
        &result.khat,
        &result.pot.pp,
        &result.pot.qp,
        &result.pot.rp,
        &result.pot.scale,
        result.beta,
        result.delta_used,
        result.x_max,
    )
}

#[allow(clippy::too_many_arguments)]
fn constraint_report<T: Real>(
    game: &DifferentialGame<T>,
    nash: &NashSolution<T>,
    khat: &DMatrix<T>,
    pp: &DMatrix<T>,
    qp: &DMatrix<T>,
    rp: &DMatrix<T>,
    scale: &[T],
    beta: T,
    delta: T,
    x_max: T,
) -> ConstraintReport {
    let d = &game.dynamics;
    let a = &d.a;
    let b = d.stacked_b();
    let riccati = (a.transpose() * pp + pp * a + qp - pp * &b * khat).norm();
    let gain_match = (b.transpose() * pp - rp * khat).norm();
    let m = linalg::block_diag(&[qp, rp]);
    let eig = linalg::sym_eigenvalues(&m);
    let lmin = eig.first().copied().unwrap_or_else(T::zero);
    let lmax = eig.last().copied().unwrap_or_else(T::zero);
    let mut gap = T::zero();
    for i in 0..d.players() {
        let bt = d.b[i].transpose();
        gap = gap.max(linalg::spectral_norm(&(&bt * pp - &bt * &nash.p[i] * scale[i])));
    }
    let bound = gap * x_max;
    let rp_inv_norm = if lmin > T::zero() {
        T::one() / linalg::min_eigenvalue(rp)
    } else {
        T::max_value().unwrap_or_else(T::one)
    };
    let scale_guard = game
        .costs
        .iter()
        .zip(scale)
        .map(|(c, &s)| (T::one() - rp_inv_norm * s * linalg::spectral_norm(c.r_own())).max(T::zero()))
        .fold(T::zero(), |a, b| a.max(b));
    let scale_guard_unscaled = game
        .costs
        .iter()
        .map(|c| (T::one() - rp_inv_norm * linalg::spectral_norm(c.r_own())).max(T::zero()))
        .fold(T::zero(), |a, b| a.max(b));
    let asym = (pp - pp.transpose()).norm() + (qp - qp.transpose()).norm() + (rp - rp.transpose()).norm();
    ConstraintReport {
        riccati: to_f64(riccati),
        gain_match: to_f64(gain_match),
        normalization_lower: to_f64((T::one() - lmin).max(T::zero())),
        normalization_upper: to_f64((lmax - beta).max(T::zero())),
        distance_bound: to_f64((bound - delta).max(T::zero())),
        bound_value: to_f64(bound),
        scale_guard: to_f64(scale_guard),
        scale_guard_unscaled: to_f64(scale_guard_unscaled),
        asymmetry: to_f64(asym),
    }
}

/// Options for [`identify_npdg`].
#[derive(Debug, Clone, Copy)]
pub struct IdentifyOptions<T> {
    /// Upper end of the condition-number search.
    pub beta_max: T,
    /// Relative accuracy of the minimal beta.
    pub rtol_beta: T,
    /// Acceptance bound on every constraint residual.
    pub tol_sdp: T,
    /// Relative rank cutoff for the null-space parametrization.
    pub rank_rtol: T,
    /// Enforce the scale guard `||Rp^{-1}|| ||s_i R_ii|| >= 1`.
    pub scale_guard: bool,
    pub oracle: ProjectedDistanceDescent<T>,
}

impl<T: Real> Default for IdentifyOptions<T> {
    fn default() -> Self {
        Self {
            beta_max: lit(1e6),
            rtol_beta: lit(1e-3),
            tol_sdp: lit(1e-6),
            rank_rtol: lit(1e-10),
            scale_guard: true,
            oracle: ProjectedDistanceDescent::default(),
        }
    }
}

/// Lifted description of the convex feasibility problem.
///
/// The decision vector `y = [c; s]` holds null-space coordinates `c` of `(Pp, Rp)` and
/// the player scale factors `s`. The lifted point `w = F y + f0` stacks the weighted
/// half-vectorization of the normalization block, the gradient gaps
/// `E_i = B_i^T Pp - s_i B_i^T P_i` and the scale-guard slacks
/// `s_i ||R_ii|| + tau - (Rp)_kk`.
#[derive(Debug, Clone)]
pub struct LmiProblem<T: Real> {
    n: usize,
    m: usize,
    players: usize,
    /// `z = z0 + N c` parametrizes the entries of `(Pp, Rp)`.
    z0: DVector<T>,
    basis: DMatrix<T>,
    f: DMatrix<T>,
    f0: DVector<T>,
    f_pinv: DMatrix<T>,
    /// Indices of `blockdiag(Qp, Rp)` that enter the eigenvalue box.
    box_idx: Vec<usize>,
    e_dims: Vec<usize>,
    /// Present when the scale guard is imposed through slack variables.
    slack: bool,
    /// Radius of the gradient-gap balls, `delta / x_max`.
    pub rho: T,
    /// Weight of the gradient gaps in the lift, `1 / rho` when finite. It puts every block
    /// of the constraint set on a unit scale, so tiny radii do not vanish from the
    /// distance objective next to the normalization box.
    gap_weight: T,
    khat: DMatrix<T>,
    a: DMatrix<T>,
    b: Vec<DMatrix<T>>,
    bt_p: Vec<DMatrix<T>>,
    guard_index: usize,
    /// `||R_ii||_2` per player.
    r_norm: Vec<T>,
    /// Absolute slack granted to the normalization floor and the scale guard.
    tau: T,
}

/// Everything recovered from a feasible decision vector.
#[derive(Debug, Clone)]
pub struct Candidate<T: Real> {
    pub pp: DMatrix<T>,
    pub qp: DMatrix<T>,
    pub rp: DMatrix<T>,
    pub scale: Vec<T>,
    pub lambda_min: T,
    pub lambda_max: T,
    pub gap: T,
}

fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn unpack_sym<T: Real>(v: &[T], n: usize) -> DMatrix<T> {
    let mut m = DMatrix::zeros(n, n);
    let mut idx = 0;
    for j in 0..n {
        for i in 0..=j {
            m[(i, j)] = v[idx];
            m[(j, i)] = v[idx];
            idx += 1;
        }
    }
    m
}

/// Half-vectorization with `sqrt(2)` weights off the diagonal (Frobenius isometry).
fn pack_weighted<T: Real>(m: &DMatrix<T>, out: &mut [T]) {
    let s2 = lit::<T>(2.0).sqrt();
    let n = m.nrows();
    let mut idx = 0;
    for j in 0..n {
        for i in 0..=j {
            out[idx] = if i == j { m[(i, i)] } else { m[(i, j)] * s2 };
            idx += 1;
        }
    }
}

fn unpack_weighted<T: Real>(v: &[T], n: usize) -> DMatrix<T> {
    let s2 = lit::<T>(2.0).sqrt();
    let mut m = DMatrix::zeros(n, n);
    let mut idx = 0;
    for j in 0..n {
        for i in 0..=j {
            let x = if i == j { v[idx] } else { v[idx] / s2 };
            m[(i, j)] = x;
            m[(j, i)] = x;
            idx += 1;
        }
    }
    m
}

impl<T: Real> LmiProblem<T> {
    /// Assembles the lifted problem for estimated gain `khat` and radius `delta / x_max`.
    pub fn new(
        game: &DifferentialGame<T>,
        nash: &NashSolution<T>,
        khat: &DMatrix<T>,
        delta: T,
        x_max: T,
        rank_rtol: T,
        scale_guard: bool,
        tau: T,
    ) -> Result<Self> {
        let d = &game.dynamics;
        let n = d.state_dim();
        let m = d.total_inputs();
        let players = d.players();
        linalg::check_shape(khat, m, n, "estimated gain")?;
        if !(delta > T::zero()) {
            return Err(Error::InvalidParams("delta must be positive".into()));
        }
        if x_max < T::zero() {
            return Err(Error::NegativeXmax);
        }
        let rho = if x_max > T::zero() { delta / x_max } else { T::max_value().unwrap_or_else(T::one) };
        let b = d.stacked_b();

        // The scale guard lambda_min(Rp) <= s_i ||R_ii|| is enforced through one diagonal
        // entry: (Rp)_kk <= s_i ||R_ii|| implies it and is linear in (Pp, Rp, s). Pick the
        // entry whose own-player weight has the smallest ratio (R_ii)_kk / lambda_min(R_ii).
        let r_norm: Vec<T> = game.costs.iter().map(|c| linalg::spectral_norm(c.r_own())).collect();
        let mut guard_index = 0;
        let mut best_ratio = T::max_value().unwrap_or_else(T::one);
        for (i, c) in game.costs.iter().enumerate() {
            let r = c.r_own();
            let lmin = linalg::min_eigenvalue(r);
            for kk in 0..r.nrows() {
                let ratio = r[(kk, kk)] / lmin;
                if ratio < best_ratio * (T::one() - lit(1e-12)) {
                    best_ratio = ratio;
                    guard_index = d.input_offset(i) + kk;
                }
            }
        }

        let np = svec_len(n);
        let nr = svec_len(m);
        let nz = np + nr;
        let split = |z: &DVector<T>| -> (DMatrix<T>, DMatrix<T>) {
            (unpack_sym(&z.as_slice()[..np], n), unpack_sym(&z.as_slice()[np..], m))
        };
        let mut eq_rows: Vec<DVector<T>> = Vec::new();
        let mut rhs: Vec<T> = Vec::new();
        // Gain matching B^T Pp - Rp K = 0, probed column by column.
        let mut gm = DMatrix::<T>::zeros(m * n, nz);
        for l in 0..nz {
            let mut e = DVector::zeros(nz);
            e[l] = T::one();
            let (p, r) = split(&e);
            let g = b.transpose() * p - r * khat;
            gm.set_column(l, &DVector::from_column_slice(g.as_slice()));
        }
        for r in 0..gm.nrows() {
            eq_rows.push(gm.row(r).transpose());
            rhs.push(T::zero());
        }
        let g = DMatrix::from_rows(&eq_rows.iter().map(|r| r.transpose()).collect::<Vec<_>>());
        let h = DVector::from_vec(rhs);
        let (g_pinv, _) = linalg::pinv(&g, rank_rtol);
        let z0 = &g_pinv * &h;
        if (&g * &z0 - &h).norm() > lit::<T>(1e-9) * (T::one() + h.norm()) {
            return Err(Error::Infeasible { delta: to_f64(delta), constraint: "riccati and gain_match admit no common solution".into() });
        }
        let basis = linalg::null_space(&g, rank_rtol);

        let box_idx: Vec<usize> = (0..n + m).collect();
        let e_dims: Vec<usize> = d.b.iter().map(|bi| bi.ncols() * n).collect();
        let bt_p: Vec<DMatrix<T>> = (0..players).map(|i| d.b[i].transpose() * &nash.p[i]).collect();
        let mut prob = Self {
            n,
            m,
            players,
            z0,
            basis,
            f: DMatrix::zeros(0, 0),
            f0: DVector::zeros(0),
            f_pinv: DMatrix::zeros(0, 0),
            box_idx,
            e_dims,
            slack: scale_guard,
            tau,
            rho,
            gap_weight: if rho.is_finite() && rho > T::zero() && rho < T::max_value().unwrap_or_else(T::one) {
                T::one() / rho
            } else {
                T::one()
            },
            khat: khat.clone(),
            a: d.a.clone(),
            b: d.b.clone(),
            bt_p,
            guard_index,
            r_norm,
        };
        let dim_y = prob.basis.ncols() + players;
        let f0 = prob.lift(&DVector::zeros(dim_y));
        let mut f = DMatrix::zeros(f0.len(), dim_y);
        for l in 0..dim_y {
            let mut e = DVector::zeros(dim_y);
            e[l] = T::one();
            f.set_column(l, &(prob.lift(&e) - &f0));
        }
        let (f_pinv, _) = linalg::pinv(&f, rank_rtol);
        prob.f = f;
        prob.f0 = f0;
        prob.f_pinv = f_pinv;
        Ok(prob)
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols() + self.players
    }

    /// Dimension of the null space of the gain-matching equations.
    pub fn null_dim(&self) -> usize {
        self.basis.ncols()
    }

    fn matrices(&self, y: &DVector<T>) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>, Vec<T>) {
        let c = y.rows(0, self.basis.ncols());
        let z = &self.z0 + &self.basis * c;
        let np = svec_len(self.n);
        let pp = unpack_sym(&z.as_slice()[..np], self.n);
        let rp = unpack_sym(&z.as_slice()[np..], self.m);
        let qp = sym(&(self.khat.transpose() * &rp * &self.khat - self.a.transpose() * &pp - &pp * &self.a));
        let scale = y.rows(self.basis.ncols(), self.players).iter().copied().collect();
        (pp, qp, rp, scale)
    }

    fn box_block(&self, qp: &DMatrix<T>, rp: &DMatrix<T>) -> DMatrix<T> {
        let full = linalg::block_diag(&[qp, rp]);
        full.select_rows(&self.box_idx).select_columns(&self.box_idx)
    }

    fn lift(&self, y: &DVector<T>) -> DVector<T> {
        let (pp, qp, rp, scale) = self.matrices(y);
        let mb = self.box_block(&qp, &rp);
        let nb = self.box_idx.len();
        let len = svec_len(nb) + self.e_dims.iter().sum::<usize>() + if self.slack { self.players } else { 0 };
        let mut w = DVector::zeros(len);
        pack_weighted(&mb, &mut w.as_mut_slice()[..svec_len(nb)]);
        let mut off = svec_len(nb);
        for i in 0..self.players {
            let e = (self.b[i].transpose() * &pp - &self.bt_p[i] * scale[i]) * self.gap_weight;
            w.rows_mut(off, e.len()).copy_from_slice(e.as_slice());
            off += e.len();
        }
        if self.slack {
            let rkk = rp[(self.guard_index, self.guard_index)];
            for i in 0..self.players {
                w[off + i] = scale[i] * self.r_norm[i] + self.tau - rkk;
            }
        }
        w
    }

    /// Projection of a lifted point onto the affine image `{F y + f0}`; returns `y`.
    fn project_affine(&self, w: &DVector<T>) -> DVector<T> {
        &self.f_pinv * (w - &self.f0)
    }

    /// Projection onto the convex constraint set with the given margins.
    fn project_convex(&self, w: &DVector<T>, lo: T, hi: T, rho: T, slack_floor: T) -> DVector<T> {
        let nb = self.box_idx.len();
        let mut out = w.clone();
        let mb = unpack_weighted(&w.as_slice()[..svec_len(nb)], nb);
        let clamped = linalg::clamp_eigenvalues(&mb, lo, hi);
        pack_weighted(&clamped, &mut out.as_mut_slice()[..svec_len(nb)]);
        let mut off = svec_len(nb);
        for (i, &len) in self.e_dims.iter().enumerate() {
            let rows = self.b[i].ncols();
            let e = DMatrix::from_column_slice(rows, self.n, &w.as_slice()[off..off + len]);
            let c = linalg::clamp_singular_values(&e, rho);
            out.rows_mut(off, len).copy_from_slice(c.as_slice());
            off += len;
        }
        if self.slack {
            for v in out.as_mut_slice()[off..].iter_mut() {
                *v = (*v).max(slack_floor);
            }
        }
        out
    }

    /// Decodes `y` and measures it against the exact (margin-free) constraints.
    pub fn candidate(&self, y: &DVector<T>) -> Candidate<T> {
        let (pp, qp, rp, scale) = self.matrices(y);
        let full = linalg::block_diag(&[&qp, &rp]);
        let eig = linalg::sym_eigenvalues(&full);
        let mut gap = T::zero();
        for i in 0..self.players {
            let e = self.b[i].transpose() * &pp - &self.bt_p[i] * scale[i];
            gap = gap.max(linalg::spectral_norm(&e));
        }
        Candidate {
            lambda_min: eig.first().copied().unwrap_or_else(T::zero),
            lambda_max: eig.last().copied().unwrap_or_else(T::zero),
            pp,
            qp,
            rp,
            scale,
            gap,
        }
    }

    /// True when `y` meets every constraint exactly at condition bound `beta`.
    pub fn is_feasible(&self, y: &DVector<T>, beta: T) -> bool {
        let c = self.candidate(y);
        let tiny = T::default_epsilon() * lit(64.0);
        let rkk = c.rp[(self.guard_index, self.guard_index)];
        let guard = !self.slack || c.scale.iter().zip(&self.r_norm).all(|(&s, &r)| rkk <= s * r + self.tau);
        c.lambda_min >= T::one() - self.tau - tiny
            && c.lambda_max <= beta * (T::one() + tiny)
            && c.gap < self.rho
            && guard
            && c.scale.iter().all(|s| *s > T::zero())
    }

    /// Projection targets `(lo, hi, rho, slack_floor)` shrunk inward by `margin`.
    fn targets(&self, beta: T, margin: T) -> (T, T, T, T) {
        let one = T::one();
        let mu = margin;
        let lo = one - self.tau + mu;
        let hi = (beta * (one - margin)).max(lo);
        (lo, hi, self.rho * self.gap_weight * (one - margin), mu)
    }

    /// Affine projection of the box center with zero gradient gaps.
    fn initial_point(&self, lo: T, hi: T, rho: T, slack_floor: T) -> DVector<T> {
        let mut target = self.project_convex(&self.f0, lo, hi, rho, slack_floor);
        let nb = self.box_idx.len();
        let mid = ((lo + hi) * lit(0.5)).min(lo * lit(2.0));
        let center = DMatrix::<T>::identity(nb, nb) * mid;
        pack_weighted(&center, &mut target.as_mut_slice()[..svec_len(nb)]);
        let len = target.len();
        for v in target.as_mut_slice()[svec_len(nb)..len].iter_mut() {
            *v = T::zero();
        }
        let mut y = self.project_affine(&target);
        let nc = self.basis.ncols();
        for i in 0..self.players {
            if !(y[nc + i] > T::zero()) {
                y[nc + i] = T::one();
            }
        }
        y
    }

    /// Scales a homogeneous solution so that `lambda_min = 1` exactly. Points accepted
    /// within the absolute slack `tau` below the floor are scaled up, which grows the
    /// gradient gaps by the same factor, so the distance bound is checked again.
    fn normalize(&self, y: &DVector<T>) -> Option<DVector<T>> {
        let c = self.candidate(y);
        if !(c.lambda_min > T::zero()) {
            return None;
        }
        let z = y / c.lambda_min;
        (z == *y || self.candidate(&z).gap < self.rho).then_some(z)
    }

    /// The normalized decision vector when `y` is feasible at `beta`.
    fn accept(&self, y: &DVector<T>, beta: T) -> Option<DVector<T>> {
        if self.is_feasible(y, beta) {
            self.normalize(y)
        } else {
            None
        }
    }
}

/// A feasibility oracle for the lifted problem at a fixed condition bound.
pub trait FeasibilityOracle<T: Real> {
    /// Returns a decision vector satisfying all constraints with `lambda_max <= beta`,
    /// or `None` when none was found.
    fn find(&self, problem: &LmiProblem<T>, beta: T, warm: Option<&DVector<T>>) -> Option<DVector<T>>;
}

/// Alternating projections between the affine image and the convex constraint set.
///
/// Projections onto the convex set use small inward margins so that the affine
/// iterate lands strictly inside once the two sets are close. Infeasibility is
/// declared when the gap between the sets stops shrinking.
#[derive(Debug, Clone, Copy)]
pub struct AlternatingProjections<T> {
    pub max_iter: usize,
    /// Relative inward margin applied to every inequality.
    pub margin: T,
    /// Relative gap decrease over `stall_window` iterations below which the run stops.
    pub stall_ratio: T,
    pub stall_window: usize,
}

impl<T: Real> Default for AlternatingProjections<T> {
    fn default() -> Self {
        Self { max_iter: 20_000, margin: lit(2e-4), stall_ratio: lit(1e-3), stall_window: 200 }
    }
}

impl<T: Real> FeasibilityOracle<T> for AlternatingProjections<T> {
    fn find(&self, p: &LmiProblem<T>, beta: T, warm: Option<&DVector<T>>) -> Option<DVector<T>> {
        let one = T::one();
        let (lo, hi, rho, slack_floor) = p.targets(beta, self.margin);
        let mut y = match warm {
            Some(w) => w.clone(),
            None => p.initial_point(lo, hi, rho, slack_floor),
        };
        let mut history: Vec<T> = Vec::new();
        for it in 0..self.max_iter {
            let w = &p.f * &y + &p.f0;
            if let Some(y) = p.accept(&y, beta) {
                return Some(y);
            }
            let wc = p.project_convex(&w, lo, hi, rho, slack_floor);
            let gap = (&wc - &w).norm();
            if !gap.is_finite() {
                return None;
            }
            history.push(gap);
            if it >= self.stall_window {
                let old = history[it - self.stall_window];
                if gap > old * (one - self.stall_ratio) {
                    return None;
                }
            }
            y = p.project_affine(&wc);
        }
        None
    }
}

/// Quasi-Newton descent on the squared distance between the affine image and the
/// convex set.
///
/// The gradient of the squared distance is the alternating-projection residual pulled
/// back through the lift, so this is alternating projections with BFGS curvature
/// updates and a backtracking line search. The decision vector is small (null-space
/// coordinates plus one scale factor per player), which makes the dense inverse-Hessian
/// update cheap and removes the slow linear rate of plain projections.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedDistanceDescent<T> {
    pub max_iter: usize,
    /// Relative inward margin applied to every inequality.
    pub margin: T,
    /// Declare infeasible when the squared distance decreases by less than this
    /// fraction over `stall_window` iterations.
    pub stall_ratio: T,
    pub stall_window: usize,
}

impl<T: Real> Default for ProjectedDistanceDescent<T> {
    fn default() -> Self {
        Self { max_iter: 2000, margin: lit(2e-4), stall_ratio: lit(1e-4), stall_window: 60 }
    }
}

impl<T: Real> FeasibilityOracle<T> for ProjectedDistanceDescent<T> {
    fn find(&self, p: &LmiProblem<T>, beta: T, warm: Option<&DVector<T>>) -> Option<DVector<T>> {
        let one = T::one();
        let two = lit::<T>(2.0);
        let (lo, hi, rho, slack_floor) = p.targets(beta, self.margin);
        let y0 = match warm {
            Some(w) => w.clone(),
            None => p.initial_point(lo, hi, rho, slack_floor),
        };
        // Descend in orthonormal coordinates u = R y with F = Q R. The lift is then an
        // isometry, so the curvature is well scaled even when the gap weights make F
        // badly conditioned, and F^T F never has to be inverted.
        let qr = p.f.clone().qr();
        let (q, r) = (qr.q(), qr.r());
        let to_y = |u: &DVector<T>| r.solve_upper_triangular(u);
        let dist = |u: &DVector<T>| {
            let w = &q * u + &p.f0;
            let res = &w - p.project_convex(&w, lo, hi, rho, slack_floor);
            (res.norm_squared(), q.transpose() * res * two)
        };
        let dim = y0.len();
        let mut u = &r * &y0;
        let (mut f, mut g) = dist(&u);
        let h0 = DMatrix::<T>::identity(dim, dim) / two;
        let mut h = h0.clone();
        let mut restarted = false;
        let mut history = vec![f];
        let tiny = T::default_epsilon();
        let accept = |u: &DVector<T>| to_y(u).and_then(|y| p.accept(&y, beta));
        for _ in 0..self.max_iter {
            if let Some(y) = accept(&u) {
                return Some(y);
            }
            if !f.is_finite() {
                return None;
            }
            let mut dir = -(&h * &g);
            if dir.dot(&g) >= T::zero() {
                h = h0.clone();
                dir = -(&h * &g);
            }
            let slope = dir.dot(&g);
            let mut step = one;
            let mut accepted = None;
            for _ in 0..40 {
                let cand = &u + &dir * step;
                let (fc, gc) = dist(&cand);
                if fc.is_finite() && fc <= f + lit::<T>(1e-4) * step * slope {
                    accepted = Some((cand, fc, gc));
                    break;
                }
                step *= lit(0.5);
            }
            let Some((next, fn_, gn)) = accepted else {
                // No decrease along the quasi-Newton direction: restart curvature once.
                if !restarted {
                    restarted = true;
                    h = h0.clone();
                    continue;
                }
                return None;
            };
            restarted = false;
            let s = &next - &u;
            let yk = &gn - &g;
            let sy = s.dot(&yk);
            if sy > tiny * s.norm() * yk.norm() {
                let rho_k = one / sy;
                let eye = DMatrix::<T>::identity(dim, dim);
                let left = &eye - &s * yk.transpose() * rho_k;
                let right = &eye - &yk * s.transpose() * rho_k;
                h = &left * &h * &right + &s * s.transpose() * rho_k;
            }
            u = next;
            f = fn_;
            g = gn;
            history.push(f);
            if history.len() > self.stall_window {
                let old = history[history.len() - 1 - self.stall_window];
                if f > old * (one - self.stall_ratio) {
                    return accept(&u);
                }
            }
        }
        accept(&u)
    }
}

/// Identifies a surrogate at a fixed `delta` with minimal condition bound.
pub fn identify_npdg<T: Real>(
    game: &DifferentialGame<T>,
    nash: &NashSolution<T>,
    khat: &GainEstimate<T>,
    delta: T,
    x_max: T,
    opts: &IdentifyOptions<T>,
) -> Result<IdentificationResult<T>> {
    identify_npdg_with(game, nash, khat, delta, x_max, opts, &opts.oracle)
}

fn infeasible<T: Real>(delta: T) -> Error {
    Error::Infeasible {
        delta: to_f64(delta),
        constraint: "distance_bound conflicts with normalization_lower, normalization_upper and scale_guard".into(),
    }
}

/// [`identify_npdg`] with an explicit feasibility oracle.
pub fn identify_npdg_with<T: Real, O: FeasibilityOracle<T>>(
    game: &DifferentialGame<T>,
    nash: &NashSolution<T>,
    khat: &GainEstimate<T>,
    delta: T,
    x_max: T,
    opts: &IdentifyOptions<T>,
    oracle: &O,
) -> Result<IdentificationResult<T>> {
    let problem = LmiProblem::new(game, nash, &khat.khat, delta, x_max, opts.rank_rtol, opts.scale_guard, opts.tol_sdp * lit(0.5))?;
    let Some(mut y) = oracle.find(&problem, opts.beta_max, None) else {
        return Err(infeasible(delta));
    };
    let mut hi = problem.candidate(&y).lambda_max.max(T::one());
    let mut lo = T::one();
    while hi / lo - T::one() > opts.rtol_beta {
        let mid = (lo * hi).sqrt();
        match oracle.find(&problem, mid, Some(&y)) {
            Some(next) => {
                y = next;
                hi = problem.candidate(&y).lambda_max.max(T::one()).min(mid);
            }
            None => lo = mid,
        }
    }
    let cand = problem.candidate(&y);
    log::debug!("identified surrogate at delta {}: beta {}", to_f64(delta), to_f64(cand.lambda_max));
    let beta = cand.lambda_max.max(T::one());
    let pot = PotentialGame::from_solution(&game.dynamics, cand.qp, cand.rp, cand.pp, cand.scale)?;
    let mut result = IdentificationResult {
        pot,
        beta,
        khat: khat.khat.clone(),
        delta_used: delta,
        x_max,
        residuals: ConstraintReport {
            riccati: 0.0,
            gain_match: 0.0,
            normalization_lower: 0.0,
            normalization_upper: 0.0,
            distance_bound: 0.0,
            bound_value: 0.0,
            scale_guard: 0.0,
            scale_guard_unscaled: 0.0,
            asymmetry: 0.0,
        },
    };
    result.residuals = check_identification(&result, game, nash);
    let tol = to_f64(opts.tol_sdp);
    let bad = result.residuals.violations(tol, to_f64(delta));
    if !bad.is_empty() {
        return Err(Error::SolverStalled(format!("constraints not met: {}", bad.join(", "))));
    }
    Ok(result)
}

/// Outcome of the delta search.
#[derive(Debug, Clone)]
pub struct DeltaSearch<T: Real> {
    /// Smallest delta found feasible (after one refinement step).
    pub delta: T,
    /// Every delta tried, with its feasibility.
    pub trials: Vec<(T, bool)>,
    pub result: IdentificationResult<T>,
}

/// Tries `delta = delta0 * 2^k` until feasible, refines once by bisection, then
/// identifies with minimal beta at the chosen delta.
pub fn search_delta<T: Real>(
    game: &DifferentialGame<T>,
    nash: &NashSolution<T>,
    khat: &GainEstimate<T>,
    x_max: T,
    delta0: T,
    max_doublings: usize,
    opts: &IdentifyOptions<T>,
) -> Result<DeltaSearch<T>> {
    let feasible = |delta: T| -> bool {
        LmiProblem::new(game, nash, &khat.khat, delta, x_max, opts.rank_rtol, opts.scale_guard, opts.tol_sdp * lit(0.5))
            .map(|p| opts.oracle.find(&p, opts.beta_max, None).is_some())
            .unwrap_or(false)
    };
    let mut trials = Vec::new();
    let mut delta = delta0;
    let mut found = None;
    for k in 0..=max_doublings {
        let ok = feasible(delta);
        trials.push((delta, ok));
        if ok {
            found = Some(k);
            break;
        }
        delta *= lit(2.0);
    }
    let Some(k) = found else {
        return Err(infeasible(delta));
    };
    if k > 0 {
        let mid = delta * lit(0.75);
        let ok = feasible(mid);
        trials.push((mid, ok));
        if ok {
            delta = mid;
        }
    }
    let result = identify_npdg(game, nash, khat, delta, x_max, opts)?;
    Ok(DeltaSearch { delta, trials, result })
}
