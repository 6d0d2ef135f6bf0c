//! Right-hand sides of the reduced converter model, the constant-impedance
//! load model, and the branch model, all expressed in the common dq frame
//! rotating at the nominal frequency.
//!
//! The reduced converter equations are the single source of truth for the
//! simulation; the pre-elimination per-converter algebraic quantities
//! (instantaneous frequency, voltage/current/modulation references) are kept
//! only as a diagnostics path and as an independent cross-check of the
//! elimination.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::{Grid, LoadParams};

/// Secondary control inputs, one pair per converter: `u_p` shifts the droop
/// frequency (rad/s), `u_q` shifts the droop voltage magnitude (V).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlInput {
    pub u_p: DVector<f64>,
    pub u_q: DVector<f64>,
}

impl ControlInput {
    pub fn zero(n_conv: usize) -> Self {
        ControlInput {
            u_p: DVector::zeros(n_conv),
            u_q: DVector::zeros(n_conv),
        }
    }

    /// Stacked [u_p; u_q], the ordering used by the affine input matrix g(x).
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.u_p.len();
        let mut u = DVector::zeros(2 * n);
        u.rows_mut(0, n).copy_from(&self.u_p);
        u.rows_mut(n, n).copy_from(&self.u_q);
        u
    }
}

/// Exogenous quantities of one operating interval: renewable forecast error,
/// converter setpoints, and the droop frequency reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Exogenous {
    /// Renewable forecast error (W); identically zero for storage units.
    pub xi: DVector<f64>,
    pub p_star: DVector<f64>,
    pub q_star: DVector<f64>,
    pub u_star: DVector<f64>,
    /// Frequency reference subtracted in the droop equation (rad/s).
    /// Defaults to the nominal frequency, which makes the droop law vanish
    /// at exact setpoint tracking.
    pub omega_ref: f64,
}

impl Exogenous {
    pub fn zero(n_conv: usize, omega_ref: f64) -> Self {
        Exogenous {
            xi: DVector::zeros(n_conv),
            p_star: DVector::zeros(n_conv),
            q_star: DVector::zeros(n_conv),
            u_star: DVector::zeros(n_conv),
            omega_ref,
        }
    }
}

/// Bus voltage components, length n_bus per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct BusVoltages {
    pub v_bd: DVector<f64>,
    pub v_bq: DVector<f64>,
}

/// The per-converter algebraic quantities eliminated from the reduced model,
/// reconstructed for logging and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConverterAlgebraics {
    /// Instantaneous frequency (rad/s), with the common-frame convention
    /// delta_dot = omega - omega_n.
    pub omega: f64,
    pub v_od_star: f64,
    pub v_oq_star: f64,
    pub i_ld_star: f64,
    pub i_lq_star: f64,
    pub v_id_star: f64,
    pub v_iq_star: f64,
}

/// One converter's states pulled out of the state vector, in storage order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConverterState {
    pub delta: f64,
    pub p: f64,
    pub q: f64,
    pub phi_d: f64,
    pub phi_q: f64,
    pub gamma_d: f64,
    pub gamma_q: f64,
    pub i_ld: f64,
    pub i_lq: f64,
    pub v_od: f64,
    pub v_oq: f64,
    pub i_od: f64,
    pub i_oq: f64,
}

impl ConverterState {
    pub fn extract(grid: &Grid, x: &DVector<f64>, i: usize) -> Self {
        let l = &grid.layout;
        ConverterState {
            delta: x[l.delta(i)],
            p: x[l.p(i)],
            q: x[l.q(i)],
            phi_d: x[l.phi_d(i)],
            phi_q: x[l.phi_q(i)],
            gamma_d: x[l.gamma_d(i)],
            gamma_q: x[l.gamma_q(i)],
            i_ld: x[l.i_ld(i)],
            i_lq: x[l.i_lq(i)],
            v_od: x[l.v_od(i)],
            v_oq: x[l.v_oq(i)],
            i_od: x[l.i_od(i)],
            i_oq: x[l.i_oq(i)],
        }
    }
}

/// Checks every state component for NaN/inf, naming the offending entry.
pub fn check_state_finite(grid: &Grid, x: &DVector<f64>) -> Result<()> {
    if x.len() != grid.layout.dim() {
        return Err(Error::NonFinite(format!(
            "state dimension {} does not match the grid's {}",
            x.len(),
            grid.layout.dim()
        )));
    }
    if x.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let labels = grid.state_labels();
    let idx = x.iter().position(|v| !v.is_finite()).unwrap();
    Err(Error::NonFinite(format!(
        "state component {} is {}",
        labels[idx], x[idx]
    )))
}

fn check_inputs_finite(grid: &Grid, exo: &Exogenous, u: &ControlInput) -> Result<()> {
    let n = grid.layout.n_conv;
    let fields: [(&str, &DVector<f64>); 6] = [
        ("xi", &exo.xi),
        ("p_star", &exo.p_star),
        ("q_star", &exo.q_star),
        ("u_star", &exo.u_star),
        ("u_p", &u.u_p),
        ("u_q", &u.u_q),
    ];
    for (name, v) in fields {
        if v.len() != n {
            return Err(Error::NonFinite(format!(
                "{name} has length {}, expected {n}",
                v.len()
            )));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{name} of converter {} is {}",
                grid.topology.converters[i].id, v[i]
            )));
        }
    }
    if !exo.omega_ref.is_finite() {
        return Err(Error::NonFinite(format!("omega_ref is {}", exo.omega_ref)));
    }
    Ok(())
}

/// Evaluates the reduced converter dynamics and writes the thirteen
/// derivative blocks into `out`. All other rows of `out` are untouched.
///
/// The droop voltage magnitude U* - K_q (Q - Q*) + u_q is used as-is, with
/// no clamping, and no P/Q limit is enforced here.
pub fn converter_rhs_into(
    grid: &Grid,
    x: &DVector<f64>,
    bus: &BusVoltages,
    exo: &Exogenous,
    u: &ControlInput,
    out: &mut DVector<f64>,
) {
    let l = &grid.layout;
    for (i, conv) in grid.topology.converters.iter().enumerate() {
        let p = &conv.params;
        let s = ConverterState::extract(grid, x, i);
        let vb_d = bus.v_bd[grid.conv_bus[i]];
        let vb_q = bus.v_bq[grid.conv_bus[i]];

        let v_mag = exo.u_star[i] - p.k_q * (s.q - exo.q_star[i]) + u.u_q[i];
        let (sin_d, cos_d) = s.delta.sin_cos();
        let v_ref_d = cos_d * v_mag;
        let v_ref_q = sin_d * v_mag;

        let i_ld_star = p.feed_forward * s.i_od - p.omega_n * p.c_f * s.v_oq
            + p.k_pv * (v_ref_d - s.v_od)
            + p.k_iv * s.phi_d;
        let i_lq_star = p.feed_forward * s.i_oq + p.omega_n * p.c_f * s.v_od
            + p.k_pv * (v_ref_q - s.v_oq)
            + p.k_iv * s.phi_q;

        out[l.delta(i)] =
            p.omega_star - p.k_p * (s.p - (exo.p_star[i] + exo.xi[i])) + u.u_p[i] - exo.omega_ref;
        out[l.p(i)] = p.omega_c * (-s.p + s.v_od * s.i_od + s.v_oq * s.i_oq);
        out[l.q(i)] = p.omega_c * (-s.q + s.v_oq * s.i_od - s.v_od * s.i_oq);
        out[l.phi_d(i)] = v_ref_d - s.v_od;
        out[l.phi_q(i)] = v_ref_q - s.v_oq;
        out[l.gamma_d(i)] = i_ld_star - s.i_ld;
        out[l.gamma_q(i)] = i_lq_star - s.i_lq;
        out[l.i_ld(i)] =
            (-p.r_f * s.i_ld + p.k_pc * (i_ld_star - s.i_ld) + p.k_ic * s.gamma_d - s.v_od) / p.l_f;
        out[l.i_lq(i)] =
            (-p.r_f * s.i_lq + p.k_pc * (i_lq_star - s.i_lq) + p.k_ic * s.gamma_q - s.v_oq) / p.l_f;
        out[l.v_od(i)] = p.omega_n * s.v_oq + s.i_ld / p.c_f - s.i_od / p.c_f;
        out[l.v_oq(i)] = -p.omega_n * s.v_od + s.i_lq / p.c_f - s.i_oq / p.c_f;
        out[l.i_od(i)] =
            (-p.r_c * s.i_od + p.omega_n * s.i_oq * p.l_c + s.v_od - vb_d) / p.l_c;
        out[l.i_oq(i)] =
            (-p.r_c * s.i_oq - p.omega_n * s.i_od * p.l_c + s.v_oq - vb_q) / p.l_c;
    }
}

/// Checked wrapper around [`converter_rhs_into`] returning a fresh vector
/// with only the converter rows populated.
pub fn converter_rhs(
    grid: &Grid,
    x: &DVector<f64>,
    bus: &BusVoltages,
    exo: &Exogenous,
    u: &ControlInput,
) -> Result<DVector<f64>> {
    check_state_finite(grid, x)?;
    check_inputs_finite(grid, exo, u)?;
    let mut out = DVector::zeros(grid.layout.dim());
    converter_rhs_into(grid, x, bus, exo, u, &mut out);
    Ok(out)
}

/// Load current dynamics: series RL at the attachment bus voltage.
pub fn load_rhs_into(
    grid: &Grid,
    loads: &[LoadParams],
    x: &DVector<f64>,
    bus: &BusVoltages,
    out: &mut DVector<f64>,
) {
    let l = &grid.layout;
    let omega_n = grid.omega_n;
    for (j, lp) in loads.iter().enumerate() {
        let i_d = x[l.load_i_d(j)];
        let i_q = x[l.load_i_q(j)];
        let v_d = bus.v_bd[grid.load_bus[j]];
        let v_q = bus.v_bq[grid.load_bus[j]];
        out[l.load_i_d(j)] = -lp.r_l / lp.l_l * i_d + omega_n * i_q + v_d / lp.l_l;
        out[l.load_i_q(j)] = -lp.r_l / lp.l_l * i_q - omega_n * i_d + v_q / lp.l_l;
    }
}

pub fn load_rhs(
    grid: &Grid,
    loads: &[LoadParams],
    x: &DVector<f64>,
    bus: &BusVoltages,
) -> Result<DVector<f64>> {
    check_state_finite(grid, x)?;
    let mut out = DVector::zeros(grid.layout.dim());
    load_rhs_into(grid, loads, x, bus, &mut out);
    Ok(out)
}

/// Branch current dynamics: series RL driven by the endpoint voltage
/// difference (from-bus minus to-bus).
pub fn branch_rhs_into(grid: &Grid, x: &DVector<f64>, bus: &BusVoltages, out: &mut DVector<f64>) {
    let l = &grid.layout;
    let omega_n = grid.omega_n;
    for (k, br) in grid.topology.branches.iter().enumerate() {
        let bp = &br.params;
        let i_d = x[l.branch_i_d(k)];
        let i_q = x[l.branch_i_q(k)];
        let v_d = bus.v_bd[grid.branch_from[k]] - bus.v_bd[grid.branch_to[k]];
        let v_q = bus.v_bq[grid.branch_from[k]] - bus.v_bq[grid.branch_to[k]];
        out[l.branch_i_d(k)] = -bp.r_b / bp.l_b * i_d + omega_n * i_q + v_d / bp.l_b;
        out[l.branch_i_q(k)] = -bp.r_b / bp.l_b * i_q - omega_n * i_d + v_q / bp.l_b;
    }
}

pub fn branch_rhs(grid: &Grid, x: &DVector<f64>, bus: &BusVoltages) -> Result<DVector<f64>> {
    check_state_finite(grid, x)?;
    let mut out = DVector::zeros(grid.layout.dim());
    branch_rhs_into(grid, x, bus, &mut out);
    Ok(out)
}

/// Reconstructs the eliminated per-converter algebraic variables.
///
/// The instantaneous frequency uses the common-frame convention: the droop
/// law gives the angle drift delta_dot directly, and omega = omega_n +
/// delta_dot. With omega_ref at its default omega_n this reduces to
/// omega = omega* - K_p (P - P* - xi) + u_p.
pub fn reconstruct_algebraics(
    grid: &Grid,
    x: &DVector<f64>,
    exo: &Exogenous,
    u: &ControlInput,
) -> Vec<ConverterAlgebraics> {
    let mut result = Vec::with_capacity(grid.layout.n_conv);
    for (i, conv) in grid.topology.converters.iter().enumerate() {
        let p = &conv.params;
        let s = ConverterState::extract(grid, x, i);
        let delta_dot =
            p.omega_star - p.k_p * (s.p - (exo.p_star[i] + exo.xi[i])) + u.u_p[i] - exo.omega_ref;
        let omega = p.omega_n + delta_dot;
        let v_mag = exo.u_star[i] - p.k_q * (s.q - exo.q_star[i]) + u.u_q[i];
        let (sin_d, cos_d) = s.delta.sin_cos();
        let v_od_star = cos_d * v_mag;
        let v_oq_star = sin_d * v_mag;
        let i_ld_star = p.feed_forward * s.i_od - p.omega_n * p.c_f * s.v_oq
            + p.k_pv * (v_od_star - s.v_od)
            + p.k_iv * s.phi_d;
        let i_lq_star = p.feed_forward * s.i_oq + p.omega_n * p.c_f * s.v_od
            + p.k_pv * (v_oq_star - s.v_oq)
            + p.k_iv * s.phi_q;
        let v_id_star = -p.omega_n * p.l_f * s.i_lq + p.k_pc * (i_ld_star - s.i_ld) + p.k_ic * s.gamma_d;
        let v_iq_star = p.omega_n * p.l_f * s.i_ld + p.k_pc * (i_lq_star - s.i_lq) + p.k_ic * s.gamma_q;
        result.push(ConverterAlgebraics {
            omega,
            v_od_star,
            v_oq_star,
            i_ld_star,
            i_lq_star,
            v_id_star,
            v_iq_star,
        });
    }
    result
}

/// Full right-hand side evaluated through the pre-elimination equations:
/// the algebraic intermediates are computed explicitly and the state
/// derivatives assembled from them. Used only to cross-check the reduced
/// implementation; the two paths agree up to floating-point reassociation.
pub fn full_rhs_unreduced(
    grid: &Grid,
    loads: &[LoadParams],
    x: &DVector<f64>,
    bus: &BusVoltages,
    exo: &Exogenous,
    u: &ControlInput,
) -> DVector<f64> {
    let l = &grid.layout;
    let mut out = DVector::zeros(l.dim());
    let algebraics = reconstruct_algebraics(grid, x, exo, u);
    for (i, conv) in grid.topology.converters.iter().enumerate() {
        let p = &conv.params;
        let s = ConverterState::extract(grid, x, i);
        let a = &algebraics[i];
        let vb_d = bus.v_bd[grid.conv_bus[i]];
        let vb_q = bus.v_bq[grid.conv_bus[i]];
        out[l.delta(i)] = a.omega - p.omega_n;
        out[l.p(i)] = p.omega_c * (-s.p + s.v_od * s.i_od + s.v_oq * s.i_oq);
        out[l.q(i)] = p.omega_c * (-s.q + s.v_oq * s.i_od - s.v_od * s.i_oq);
        out[l.phi_d(i)] = a.v_od_star - s.v_od;
        out[l.phi_q(i)] = a.v_oq_star - s.v_oq;
        out[l.gamma_d(i)] = a.i_ld_star - s.i_ld;
        out[l.gamma_q(i)] = a.i_lq_star - s.i_lq;
        out[l.i_ld(i)] = -p.r_f / p.l_f * s.i_ld + p.omega_n * s.i_lq + a.v_id_star / p.l_f
            - s.v_od / p.l_f;
        out[l.i_lq(i)] = -p.r_f / p.l_f * s.i_lq - p.omega_n * s.i_ld + a.v_iq_star / p.l_f
            - s.v_oq / p.l_f;
        out[l.v_od(i)] = p.omega_n * s.v_oq + s.i_ld / p.c_f - s.i_od / p.c_f;
        out[l.v_oq(i)] = -p.omega_n * s.v_od + s.i_lq / p.c_f - s.i_oq / p.c_f;
        out[l.i_od(i)] = -p.r_c / p.l_c * s.i_od + p.omega_n * s.i_oq + s.v_od / p.l_c - vb_d / p.l_c;
        out[l.i_oq(i)] = -p.r_c / p.l_c * s.i_oq - p.omega_n * s.i_od + s.v_oq / p.l_c - vb_q / p.l_c;
    }
    load_rhs_into(grid, loads, x, bus, &mut out);
    branch_rhs_into(grid, x, bus, &mut out);
    out
}
