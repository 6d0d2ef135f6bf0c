//! Shared helpers for the in-crate unit tests.

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

use crate::dynamics::Exogenous;
use crate::grid::Grid;

pub(crate) fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (rng.next_u32() as f64 / u32::MAX as f64)
}

/// Random state with physically plausible per-block magnitudes.
pub(crate) fn random_state(grid: &Grid, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let l = &grid.layout;
    let mut x = DVector::zeros(l.dim());
    for i in 0..l.n_conv {
        x[l.delta(i)] = uniform(rng, -0.5, 0.5);
        x[l.p(i)] = uniform(rng, -2e6, 2e6);
        x[l.q(i)] = uniform(rng, -2e6, 2e6);
        x[l.phi_d(i)] = uniform(rng, -1.0, 1.0);
        x[l.phi_q(i)] = uniform(rng, -1.0, 1.0);
        x[l.gamma_d(i)] = uniform(rng, -1.0, 1.0);
        x[l.gamma_q(i)] = uniform(rng, -1.0, 1.0);
        x[l.i_ld(i)] = uniform(rng, -200.0, 200.0);
        x[l.i_lq(i)] = uniform(rng, -200.0, 200.0);
        x[l.v_od(i)] = uniform(rng, -15e3, 15e3);
        x[l.v_oq(i)] = uniform(rng, -15e3, 15e3);
        x[l.i_od(i)] = uniform(rng, -200.0, 200.0);
        x[l.i_oq(i)] = uniform(rng, -200.0, 200.0);
    }
    for j in 0..l.n_load {
        x[l.load_i_d(j)] = uniform(rng, -200.0, 200.0);
        x[l.load_i_q(j)] = uniform(rng, -200.0, 200.0);
    }
    for k in 0..l.n_branch {
        x[l.branch_i_d(k)] = uniform(rng, -400.0, 400.0);
        x[l.branch_i_q(k)] = uniform(rng, -400.0, 400.0);
    }
    x
}

/// Random setpoints; forecast error only on non-storage converters.
pub(crate) fn random_exo(grid: &Grid, rng: &mut ChaCha8Rng) -> Exogenous {
    let n = grid.layout.n_conv;
    let mut exo = Exogenous::zero(n, grid.omega_n);
    for i in 0..n {
        exo.p_star[i] = uniform(rng, 0.0, 1e6);
        exo.q_star[i] = uniform(rng, -5e5, 5e5);
        exo.u_star[i] = uniform(rng, 0.95, 1.05) * 10336.0;
        if !grid.topology.converters[i].params.is_storage() {
            exo.xi[i] = uniform(rng, -1e5, 1e5);
        }
    }
    exo
}
