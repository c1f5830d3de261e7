//! Derivative-free simplex minimization used by the nested controller designs.

use nalgebra::DVector;

use crate::scalar::{lit, Real};

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions<T> {
    pub max_evals: usize,
    /// Stop when the simplex objective spread falls below this value.
    pub f_tol: T,
    /// Stop when the simplex diameter falls below this value.
    pub x_tol: T,
    /// Relative size of the initial simplex (absolute for zero coordinates).
    pub initial_step: T,
    /// Number of restarts from the incumbent after convergence.
    pub restarts: usize,
}

impl<T: Real> Default for NelderMeadOptions<T> {
    fn default() -> Self {
        Self {
            max_evals: 4000,
            f_tol: lit(1e-12),
            x_tol: lit(1e-9),
            initial_step: lit(0.1),
            restarts: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum<T: Real> {
    pub x: DVector<T>,
    pub f: T,
    pub evaluations: usize,
    /// Best objective after each iteration; nonincreasing by construction.
    pub history: Vec<T>,
}

/// Minimizes `f` with the adaptive Nelder-Mead method.
///
/// Coefficients scale with the dimension, which keeps the simplex from collapsing on
/// the 5-7 dimensional weight searches. Non-finite objective values count as +inf.
pub fn nelder_mead<T: Real, F>(mut f: F, x0: &DVector<T>, opts: &NelderMeadOptions<T>) -> Minimum<T>
where
    F: FnMut(&DVector<T>) -> T,
{
    let n = x0.len();
    let inf = T::max_value().unwrap_or_else(|| lit(1e300));
    let mut eval = |x: &DVector<T>, count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            inf
        }
    };
    let mut evals = 0usize;
    let mut best_x = x0.clone();
    let mut best_f = eval(x0, &mut evals);
    let mut history = vec![best_f];
    if n == 0 {
        return Minimum { x: best_x, f: best_f, evaluations: evals, history };
    }

    let nf = lit::<T>(n as f64);
    let alpha = T::one();
    let gamma = T::one() + lit::<T>(2.0) / nf;
    let rho = lit::<T>(0.75) - lit::<T>(0.5) / nf;
    let sigma = T::one() - T::one() / nf;

    for _round in 0..=opts.restarts {
        let start = best_x.clone();
        let mut simplex: Vec<(DVector<T>, T)> = Vec::with_capacity(n + 1);
        simplex.push((start.clone(), best_f));
        for i in 0..n {
            let mut v = start.clone();
            let step = if v[i] != T::zero() { v[i] * opts.initial_step } else { opts.initial_step * lit(0.25) };
            v[i] += step;
            let fv = eval(&v, &mut evals);
            simplex.push((v, fv));
        }
        while evals < opts.max_evals {
            simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
            if simplex[0].1 < best_f {
                best_f = simplex[0].1;
                best_x = simplex[0].0.clone();
            }
            history.push(best_f);
            let spread = simplex[n].1 - simplex[0].1;
            let diam = simplex[1..]
                .iter()
                .map(|(v, _)| (v - &simplex[0].0).amax())
                .fold(T::zero(), |a, b| a.max(b));
            if spread.abs() <= opts.f_tol && diam <= opts.x_tol.max(opts.x_tol * simplex[0].0.amax()) {
                break;
            }
            if diam <= opts.x_tol * lit(1e-3) {
                break;
            }
            let mut centroid = DVector::zeros(n);
            for (v, _) in &simplex[..n] {
                centroid += v;
            }
            centroid /= nf;
            let worst = simplex[n].clone();
            let xr = &centroid + (&centroid - &worst.0) * alpha;
            let fr = eval(&xr, &mut evals);
            if fr < simplex[0].1 {
                let xe = &centroid + (&xr - &centroid) * gamma;
                let fe = eval(&xe, &mut evals);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let outside = fr < worst.1;
                let xc = if outside {
                    &centroid + (&xr - &centroid) * rho
                } else {
                    &centroid + (&worst.0 - &centroid) * rho
                };
                let fc = eval(&xc, &mut evals);
                if fc < fr.min(worst.1) {
                    simplex[n] = (xc, fc);
                } else {
                    let x0 = simplex[0].0.clone();
                    for item in simplex.iter_mut().skip(1) {
                        let v = &x0 + (&item.0 - &x0) * sigma;
                        let fv = eval(&v, &mut evals);
                        *item = (v, fv);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        if simplex[0].1 < best_f {
            best_f = simplex[0].1;
            best_x = simplex[0].0.clone();
        }
        history.push(best_f);
        if evals >= opts.max_evals {
            break;
        }
    }
    Minimum { x: best_x, f: best_f, evaluations: evals, history }
}
