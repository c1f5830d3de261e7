//! Cooperation state, extended system and the full/limited-information shared
//! controller designs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, sym};
use crate::lqgame::{solve_coupled_riccati, solve_lqr, DifferentialGame, LtiGameDynamics, NashSolution, PlayerCost};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::potential::PotentialGame;
use crate::scalar::{lit, to_f64, Real};

/// Split of the state into measurable (automation-side) and non-measurable (human-side) parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatePartition {
    pub measurable: Vec<usize>,
    pub nonmeasurable: Vec<usize>,
}

impl StatePartition {
    pub fn new(measurable: Vec<usize>, nonmeasurable: Vec<usize>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for &i in measurable.iter().chain(&nonmeasurable) {
            if i >= n || seen[i] {
                return Err(Error::InvalidParams(format!("partition index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParams("partition does not cover every state".into()));
        }
        Ok(Self { measurable, nonmeasurable })
    }

    /// Checks that non-measurable states do not drive the measurable ones.
    pub fn validate_structure<T: Real>(&self, a: &DMatrix<T>) -> Result<()> {
        for &i in &self.measurable {
            for &j in &self.nonmeasurable {
                if a[(i, j)] != T::zero() {
                    return Err(Error::InvalidParams(format!(
                        "A[{i}][{j}] couples a non-measurable state into a measurable one"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sign inside `M = Pp A + Qp (+/-) A^T Pp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsSign {
    /// `+ A^T Pp`, the standard adjoint; `M = Pp B K` by the surrogate Riccati equation.
    #[default]
    Corrected,
    /// `- A^T Pp`, the alternative sign; breaks the cooperation-state identity.
    Printed,
}

/// `x_kappa = Xi_a u_a + Xi_h u_h` reconstructs the non-measurable states.
#[derive(Debug, Clone, PartialEq)]
pub struct CooperationStateDesign<T: Real> {
    pub xi_a: DMatrix<T>,
    pub xi_h: DMatrix<T>,
}

/// Diagnostics of the cooperation-state derivation.
#[derive(Debug, Clone, PartialEq)]
pub struct CsReport<T: Real> {
    pub m: DMatrix<T>,
    pub m_pinv: DMatrix<T>,
    pub rank: usize,
    /// `||(Pp A + A^T Pp + Qp) - Pp B Rp^{-1} B^T Pp||_F`.
    pub are_identity: T,
    /// `||M M^+ M - M||_F`.
    pub pinv_contract: T,
}

/// `M = Pp A + Qp (+/-) A^T Pp`.
pub fn cs_matrix<T: Real>(pot: &PotentialGame<T>, dynamics: &LtiGameDynamics<T>, sign: CsSign) -> DMatrix<T> {
    let pa = &pot.pp * &dynamics.a;
    let atp = dynamics.a.transpose() * &pot.pp;
    match sign {
        CsSign::Corrected => pa + &pot.qp + atp,
        CsSign::Printed => pa + &pot.qp - atp,
    }
}

/// Derives `Xi_a`, `Xi_h` from the rows of `-M^+ Pp B` at the non-measurable states.
pub fn derive_cooperation_state<T: Real>(
    pot: &PotentialGame<T>,
    dynamics: &LtiGameDynamics<T>,
    partition: &StatePartition,
    sign: CsSign,
) -> Result<(CooperationStateDesign<T>, CsReport<T>)> {
    if dynamics.players() != 2 {
        return Err(Error::ShapeMismatch("cooperation state needs exactly two players".into()));
    }
    let m = cs_matrix(pot, dynamics, sign);
    let (m_pinv, rank) = linalg::pinv(&m, lit(1e-10));
    let k = partition.nonmeasurable.len();
    if rank < k {
        return Err(Error::SingularPencil { rank, required: k });
    }
    let b = dynamics.stacked_b();
    let g = -(&m_pinv * &pot.pp * &b);
    let rows = g.select_rows(&partition.nonmeasurable);
    let pa = dynamics.b[0].ncols();
    let ph = dynamics.b[1].ncols();
    let xi = CooperationStateDesign {
        xi_a: rows.columns(0, pa).into_owned(),
        xi_h: rows.columns(pa, ph).into_owned(),
    };
    let r_inv_bt = pot
        .rp
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IndefiniteWeight("Rp is not positive definite".into()))?
        .solve(&b.transpose());
    let are = (&pot.pp * &dynamics.a + dynamics.a.transpose() * &pot.pp + &pot.qp) - &pot.pp * &b * r_inv_bt * &pot.pp;
    let pinv_contract = (&m * &m_pinv * &m - &m).norm();
    Ok((xi, CsReport { m, m_pinv, rank, are_identity: are.norm(), pinv_contract }))
}

/// `max_t ||M x(t) + Pp B u(t)||` along a trajectory (states and stacked inputs).
pub fn cs_consistency_residual<T: Real>(
    pot: &PotentialGame<T>,
    dynamics: &LtiGameDynamics<T>,
    sign: CsSign,
    traj: &crate::lqgame::Trajectory<T>,
) -> T {
    let m = cs_matrix(pot, dynamics, sign);
    let pb = &pot.pp * dynamics.stacked_b();
    (0..traj.len())
        .map(|k| (&m * traj.state(k) + &pb * traj.stacked_input(k)).norm())
        .fold(T::zero(), |a, b| a.max(b))
}

/// Extended plant with state `[x_m; u_a; x_kappa]` driven by `u_a'` (and `u_h'`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSystem<T: Real> {
    pub ae: DMatrix<T>,
    pub be_a: DMatrix<T>,
    pub be_h: DMatrix<T>,
    pub measurable_dim: usize,
    pub automation_inputs: usize,
    pub nonmeasurable_dim: usize,
}

impl<T: Real> ExtendedSystem<T> {
    pub fn dim(&self) -> usize {
        self.ae.nrows()
    }
}

/// Assembles `[[A_m, B_a,m, 0], [0, 0, 0], [0, 0, 0]]`, `[0; I; Xi_a]`, `[0; 0; Xi_h]`.
pub fn build_extended_system<T: Real>(
    dynamics: &LtiGameDynamics<T>,
    partition: &StatePartition,
    xi: &CooperationStateDesign<T>,
) -> Result<ExtendedSystem<T>> {
    if dynamics.players() != 2 {
        return Err(Error::ShapeMismatch("extended system needs exactly two players".into()));
    }
    let nm = partition.measurable.len();
    let k = partition.nonmeasurable.len();
    let pa = dynamics.b[0].ncols();
    let ph = dynamics.b[1].ncols();
    linalg::check_shape(&xi.xi_a, k, pa, "Xi_a")?;
    linalg::check_shape(&xi.xi_h, k, ph, "Xi_h")?;
    let ne = nm + pa + k;
    let a_m = dynamics.a.select_rows(&partition.measurable).select_columns(&partition.measurable);
    let b_am = dynamics.b[0].select_rows(&partition.measurable);
    let mut ae = DMatrix::zeros(ne, ne);
    ae.view_mut((0, 0), (nm, nm)).copy_from(&a_m);
    ae.view_mut((0, nm), (nm, pa)).copy_from(&b_am);
    let mut be_a = DMatrix::zeros(ne, pa);
    be_a.view_mut((nm, 0), (pa, pa)).fill_with_identity();
    be_a.view_mut((nm + pa, 0), (k, pa)).copy_from(&xi.xi_a);
    let mut be_h = DMatrix::zeros(ne, ph);
    be_h.view_mut((nm + pa, 0), (k, ph)).copy_from(&xi.xi_h);
    Ok(ExtendedSystem { ae, be_a, be_h, measurable_dim: nm, automation_inputs: pa, nonmeasurable_dim: k })
}

/// LQR gain for the extended system.
///
/// The cooperation-state block is generally not fully controllable from `u_a'` alone:
/// the component of `x_kappa` outside the range reachable through `Xi_a` moves only
/// with `u_h` and has no dynamics of its own. In an orthonormal split `x_e = V z + W b`
/// (`V` spanning the controllable subspace) the Riccati problem is solved for `z`, and
/// `b` is handled as a neutral exogenous state: its gain is the feedforward
/// `R^{-1} B_z^T X` with `A_cz^T X + X A_bb + P A_zb + Q_zb = 0`, the limit of a
/// discounted LQR on the full extended state as the discount vanishes.
pub fn extended_lqr_gain<T: Real>(ext: &ExtendedSystem<T>, q: &DMatrix<T>, r: &DMatrix<T>) -> Result<DMatrix<T>> {
    let v = linalg::controllable_basis(&ext.ae, &ext.be_a, lit(1e-9));
    if v.ncols() == 0 {
        return Err(Error::NonStabilizable);
    }
    let vt = v.transpose();
    let ar = &vt * &ext.ae * &v;
    let br = &vt * &ext.be_a;
    let qr = sym(&(&vt * q * &v));
    let (p, kr) = solve_lqr(&ar, &br, &qr, r)?;
    let mut k = kr.clone() * &vt;
    let w = linalg::null_space(&vt, lit(1e-9));
    if w.ncols() > 0 {
        let acz = &ar - &br * &kr;
        let a_zb = &vt * &ext.ae * &w;
        let a_bb = w.transpose() * &ext.ae * &w;
        let q_zb = &vt * q * &w;
        let x = linalg::sylvester(&acz.transpose(), &a_bb, &(&p * a_zb + q_zb))?;
        let rinv_bt = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::IndefiniteWeight("R_LI is not positive definite".into()))?
            .solve(&br.transpose());
        k += rinv_bt * x * w.transpose();
    }
    Ok(k)
}

/// Limited-information controller: integrates `u_a' = -K_LI [x_m; u_a; x_kappa]` and
/// never reads the non-measurable states.
#[derive(Debug, Clone, PartialEq)]
pub struct LiscController<T: Real> {
    pub k_li: DMatrix<T>,
    pub xi: CooperationStateDesign<T>,
    pub q_li: DMatrix<T>,
    pub r_li: DMatrix<T>,
    /// Current integrator output `u_a`.
    pub integrator_state: DVector<T>,
    last_rate: Option<DVector<T>>,
}

impl<T: Real> LiscController<T> {
    pub fn new(k_li: DMatrix<T>, xi: CooperationStateDesign<T>, q_li: DMatrix<T>, r_li: DMatrix<T>) -> Self {
        let pa = k_li.nrows();
        Self { k_li, xi, q_li, r_li, integrator_state: DVector::zeros(pa), last_rate: None }
    }

    /// Resets the integrator to zero.
    pub fn reset(&mut self) {
        self.integrator_state.fill(T::zero());
        self.last_rate = None;
    }

    /// Rate command `-K_LI x_e` for the current integrator state.
    pub fn rate(&self, x_m: &DVector<T>, u_h: &DVector<T>) -> DVector<T> {
        let u_a = &self.integrator_state;
        let x_kappa = &self.xi.xi_a * u_a + &self.xi.xi_h * u_h;
        let mut xe = DVector::zeros(x_m.len() + u_a.len() + x_kappa.len());
        xe.rows_mut(0, x_m.len()).copy_from(x_m);
        xe.rows_mut(x_m.len(), u_a.len()).copy_from(u_a);
        xe.rows_mut(x_m.len() + u_a.len(), x_kappa.len()).copy_from(&x_kappa);
        -(&self.k_li * xe)
    }

    /// One controller period: trapezoidal integration of the rate command (rectangle
    /// rule on the first call) and the new `u_a`.
    pub fn step(&mut self, x_m: &DVector<T>, u_h: &DVector<T>, dt: T) -> DVector<T> {
        let rate = self.rate(x_m, u_h);
        let incr = match &self.last_rate {
            Some(prev) => (prev + &rate) * (dt * lit(0.5)),
            None => &rate * dt,
        };
        self.integrator_state += incr;
        self.last_rate = Some(rate);
        self.integrator_state.clone()
    }
}

/// `lisc_control_step` in free-function form.
pub fn lisc_control_step<T: Real>(ctrl: &mut LiscController<T>, x_m: &DVector<T>, u_h: &DVector<T>, dt: T) -> DVector<T> {
    ctrl.step(x_m, u_h, dt)
}

/// Result of the FISC weight optimization.
#[derive(Debug, Clone)]
pub struct FiscDesign<T: Real> {
    /// Optimizer output `[diag Q_a, diag R_aa, diag R_ah]` before normalization.
    pub theta: DVector<T>,
    /// Automation state weight scaled so that `||R_aa||_2 = 1`.
    pub q_fi: DMatrix<T>,
    /// Automation input weights `[R_aa, R_ah]` with the same scaling.
    pub r_fi: Vec<DMatrix<T>>,
    pub k_fi: DMatrix<T>,
    pub global_cost: T,
    pub initial_cost: T,
    pub game: DifferentialGame<T>,
    pub nash: NashSolution<T>,
    pub history: Vec<T>,
}

/// Automation cost from `theta = [diag Q (n), diag R_aa (p_a), diag R_ah (p_h)]`,
/// clamped to nonnegative entries with `R_aa >= 1e-3`.
pub fn automation_cost_from_theta<T: Real>(theta: &DVector<T>, n: usize, pa: usize, ph: usize) -> Result<PlayerCost<T>> {
    if theta.len() != n + pa + ph {
        return Err(Error::ShapeMismatch(format!("theta has {} entries, expected {}", theta.len(), n + pa + ph)));
    }
    let clamp = |v: T| v.max(T::zero());
    let q = DMatrix::from_diagonal(&DVector::from_iterator(n, theta.rows(0, n).iter().map(|&v| clamp(v))));
    let raa = DMatrix::from_diagonal(&DVector::from_iterator(pa, theta.rows(n, pa).iter().map(|&v| v.max(lit(1e-3)))));
    let rah = DMatrix::from_diagonal(&DVector::from_iterator(ph, theta.rows(n + pa, ph).iter().map(|&v| clamp(v))));
    Ok(PlayerCost::new(0, q, vec![raa, rah]))
}

/// `J_g = 1/2 tr(X) / n` with `A_c^T X + X A_c + Q_g + K^T R_g K = 0`: the global cost
/// averaged over unit initial states along the canonical axes.
pub fn global_cost<T: Real>(nash: &NashSolution<T>, q_g: &DMatrix<T>, r_g: &DMatrix<T>) -> Result<T> {
    let k = nash.stacked_k();
    let x = linalg::lyap(&nash.ac, &sym(&(q_g + k.transpose() * r_g * &k)))?;
    Ok(x.trace() * lit(0.5) / lit(nash.ac.nrows() as f64))
}

/// Options for the nested designs.
#[derive(Debug, Clone, Copy)]
pub struct DesignOptions<T> {
    pub simplex: NelderMeadOptions<T>,
}

impl<T: Real> Default for DesignOptions<T> {
    fn default() -> Self {
        Self { simplex: NelderMeadOptions::default() }
    }
}

/// Chooses the automation weights that minimize the global cost of the resulting Nash
/// closed loop against a fixed human cost (player 0 is the automation).
pub fn design_fisc<T: Real>(
    dynamics: &LtiGameDynamics<T>,
    human_cost: &PlayerCost<T>,
    q_g: &DMatrix<T>,
    r_g: &DMatrix<T>,
    theta0: &DVector<T>,
    opts: &DesignOptions<T>,
) -> Result<FiscDesign<T>> {
    let n = dynamics.state_dim();
    let dims = dynamics.input_dims();
    if dims.len() != 2 {
        return Err(Error::ShapeMismatch("FISC design needs exactly two players".into()));
    }
    let (pa, ph) = (dims[0], dims[1]);
    let evaluate = |theta: &DVector<T>| -> Option<(T, DifferentialGame<T>, NashSolution<T>)> {
        let ca = automation_cost_from_theta(theta, n, pa, ph).ok()?;
        let game = DifferentialGame::new(dynamics.clone(), vec![ca, human_cost.clone()]).ok()?;
        let nash = solve_coupled_riccati(&game).ok()?;
        let j = global_cost(&nash, q_g, r_g).ok()?;
        Some((j, game, nash))
    };
    let initial_cost = evaluate(theta0).map(|e| e.0).unwrap_or_else(|| T::max_value().unwrap_or_else(T::one));
    let penalty = T::max_value().unwrap_or_else(T::one);
    let min = nelder_mead(|th| evaluate(th).map(|e| e.0).unwrap_or(penalty), theta0, &opts.simplex);
    let (global, game, nash) = evaluate(&min.x).ok_or(Error::NoDescent)?;
    // Store the weights actually used: diagonal of Q, then R_aa, then R_ah.
    let theta = DVector::from_iterator(
        min.x.len(),
        game.costs[0].q.diagonal().iter().chain(game.costs[0].r[0].diagonal().iter()).chain(game.costs[0].r[1].diagonal().iter()).copied(),
    );
    log::debug!("FISC design: J_g {} -> {} after {} simplex iterations", to_f64(initial_cost), to_f64(global), min.history.len());
    let ca = &game.costs[0];
    let scale = T::one() / linalg::spectral_norm(ca.r_own());
    let normalized = ca.scaled(scale);
    Ok(FiscDesign {
        theta,
        q_fi: normalized.q.clone(),
        r_fi: normalized.r.clone(),
        k_fi: nash.k[0].clone(),
        global_cost: global,
        initial_cost,
        game,
        nash,
        history: min.history,
    })
}

/// How the extended-system weights are encoded for the LISC search. The all-zero
/// parameter vector gives identity weights in both encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightParametrization {
    /// `Q_LI = diag(exp(q))`, `R_LI = diag(exp(r))`.
    Diagonal,
    /// `Q_LI = L L^T` with `L` lower triangular, `exp` on its diagonal (row-major
    /// order of the lower triangle); `R_LI = diag(exp(r))`.
    #[default]
    Cholesky,
}

impl WeightParametrization {
    /// Number of parameters for extended dimension `ne` and `pa` automation inputs.
    pub fn len(self, ne: usize, pa: usize) -> usize {
        match self {
            Self::Diagonal => ne + pa,
            Self::Cholesky => ne * (ne + 1) / 2 + pa,
        }
    }

    /// Decodes `(Q_LI, R_LI)`.
    pub fn weights<T: Real>(self, params: &DVector<T>, ne: usize, pa: usize) -> Result<(DMatrix<T>, DMatrix<T>)> {
        if params.len() != self.len(ne, pa) {
            return Err(Error::ShapeMismatch(format!(
                "weight vector has {} entries, expected {}",
                params.len(),
                self.len(ne, pa)
            )));
        }
        let nq = self.len(ne, pa) - pa;
        let q = match self {
            Self::Diagonal => DMatrix::from_diagonal(&DVector::from_iterator(ne, params.rows(0, ne).iter().map(|v| v.exp()))),
            Self::Cholesky => {
                let mut l = DMatrix::zeros(ne, ne);
                let mut idx = 0;
                for i in 0..ne {
                    for j in 0..=i {
                        l[(i, j)] = if i == j { params[idx].exp() } else { params[idx] };
                        idx += 1;
                    }
                }
                &l * l.transpose()
            }
        };
        let r = DMatrix::from_diagonal(&DVector::from_iterator(pa, params.rows(nq, pa).iter().map(|v| v.exp())));
        Ok((q, r))
    }
}

/// Outcome of the LISC weight search.
#[derive(Debug, Clone)]
pub struct LiscDesign<T: Real> {
    pub controller: LiscController<T>,
    pub parametrization: WeightParametrization,
    /// Weight parameters found by the search.
    pub params: DVector<T>,
    pub objective: T,
    pub initial_objective: T,
    pub history: Vec<T>,
}

/// Builds the controller for encoded weights.
pub fn lisc_from_params<T: Real>(
    ext: &ExtendedSystem<T>,
    xi: &CooperationStateDesign<T>,
    parametrization: WeightParametrization,
    params: &DVector<T>,
) -> Result<LiscController<T>> {
    let (q, r) = parametrization.weights(params, ext.dim(), ext.automation_inputs)?;
    let k = extended_lqr_gain(ext, &q, &r)?;
    Ok(LiscController::new(k, xi.clone(), q, r))
}

/// Chooses LQR weights for the extended system so that the controller's automation
/// input matches a reference FISC input.
///
/// `mismatch` runs a candidate controller and returns the relative L2 distance of its
/// automation input from the reference; candidates whose LQR problem fails or whose
/// run is rejected receive an infinite penalty.
pub fn design_lisc<T: Real, F>(
    ext: &ExtendedSystem<T>,
    xi: &CooperationStateDesign<T>,
    parametrization: WeightParametrization,
    init: &DVector<T>,
    opts: &DesignOptions<T>,
    mut mismatch: F,
) -> Result<LiscDesign<T>>
where
    F: FnMut(&LiscController<T>) -> Option<T>,
{
    let penalty = T::max_value().unwrap_or_else(T::one);
    let mut objective = |w: &DVector<T>| -> T {
        match lisc_from_params(ext, xi, parametrization, w) {
            Ok(c) => mismatch(&c).unwrap_or(penalty),
            Err(_) => penalty,
        }
    };
    let initial_objective = objective(init);
    let min = nelder_mead(&mut objective, init, &opts.simplex);
    if !(min.f < penalty) {
        return Err(Error::NoDescent);
    }
    log::debug!("LISC design: mismatch {} -> {}", to_f64(initial_objective), to_f64(min.f));
    let controller = lisc_from_params(ext, xi, parametrization, &min.x)?;
    Ok(LiscDesign {
        controller,
        parametrization,
        params: min.x,
        objective: min.f,
        initial_objective,
        history: min.history,
    })
}
