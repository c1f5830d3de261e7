//! Seeded game generators shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use npdg::lqgame::{DifferentialGame, LtiGameDynamics, PlayerCost};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `L L^T + floor I` with a Gaussian `L`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let l = gaussian(rng, n, n) * 0.5;
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

/// Random 4-state game, one input per player. `A` has Gaussian entries scaled by 1/2,
/// so it is usually unstable; the inputs are dense, so the pair is controllable almost
/// surely. State weights are positive definite, own input weights lie in [0.5, 2] and
/// cross weights are zero or a small positive scalar.
pub fn random_game(seed: u64) -> DifferentialGame<f64> {
    let mut r = rng(seed);
    let n = 4;
    let a = gaussian(&mut r, n, n) * 0.5;
    let b = vec![gaussian(&mut r, n, 1), gaussian(&mut r, n, 1)];
    let dynamics = LtiGameDynamics::new(a, b).unwrap();
    let costs = (0..2)
        .map(|i| {
            let q = spd(&mut r, n, 0.1);
            let own = DMatrix::from_element(1, 1, r.random_range(0.5..2.0));
            let cross = DMatrix::from_element(1, 1, if r.random_bool(0.5) { r.random_range(0.0..0.3) } else { 0.0 });
            let blocks = if i == 0 { vec![own, cross] } else { vec![cross, own] };
            PlayerCost::new(i, q, blocks)
        })
        .collect();
    DifferentialGame::new(dynamics, costs).unwrap()
}

/// Two independent 2-state subsystems, one per player: block-diagonal `A`, each player's
/// input and state weight confined to its own block, zero cross input weights. Such a
/// game is an exact potential game.
pub fn decoupled_game(seed: u64) -> DifferentialGame<f64> {
    let mut r = rng(seed);
    let mut a = DMatrix::zeros(4, 4);
    let mut b = vec![DMatrix::zeros(4, 1), DMatrix::zeros(4, 1)];
    let mut q = vec![DMatrix::zeros(4, 4), DMatrix::zeros(4, 4)];
    for i in 0..2 {
        let off = 2 * i;
        a.view_mut((off, off), (2, 2)).copy_from(&(gaussian(&mut r, 2, 2) * 0.5));
        b[i].view_mut((off, 0), (2, 1)).copy_from(&gaussian(&mut r, 2, 1));
        q[i].view_mut((off, off), (2, 2)).copy_from(&spd(&mut r, 2, 0.2));
    }
    let dynamics = LtiGameDynamics::new(a, b).unwrap();
    let costs = (0..2)
        .map(|i| {
            let own = DMatrix::from_element(1, 1, r.random_range(0.5..2.0));
            let zero = DMatrix::zeros(1, 1);
            let blocks = if i == 0 { vec![own, zero] } else { vec![zero, own] };
            PlayerCost::new(i, q[i].clone(), blocks)
        })
        .collect();
    DifferentialGame::new(dynamics, costs).unwrap()
}

/// Random initial state of unit norm.
pub fn unit_state(seed: u64, n: usize) -> DVector<f64> {
    let mut r = rng(seed ^ 0x5eed);
    let v = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
    &v / v.norm()
}
