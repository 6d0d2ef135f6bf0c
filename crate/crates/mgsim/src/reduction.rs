//! DAE-to-ODE reduction: assembles the differentiated KCL constraint
//! M1 x2 + M2 z = 0, eliminates the bus voltages z through it, and exposes
//! the resulting ODE together with its affine decomposition in the renewable
//! uncertainty and the secondary control.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::dynamics::{
    branch_rhs_into, check_state_finite, converter_rhs_into, full_rhs_unreduced, load_rhs_into,
    BusVoltages, ControlInput, Exogenous,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, LoadParams};

/// The reduced state-space model for one operating interval.
///
/// M2 depends on the load inductances and is therefore refactorized exactly
/// when the load parameters change (once per scenario point), never per
/// integration step. Immutable after assembly; solves do not mutate the
/// factorization.
#[derive(Clone, Debug)]
pub struct ReducedModel {
    pub grid: Arc<Grid>,
    pub loads: Vec<LoadParams>,
    /// Constraint coefficient on the electrical partition, 2 n_bus x dim(x2).
    pub m1: DMatrix<f64>,
    /// Bus-voltage coefficient, 2 n_bus x 2 n_bus: block-diagonal with two
    /// identical negative-definite axis blocks.
    pub m2: DMatrix<f64>,
    /// Precomputed M2^-1 M1; bus voltages are z = -(M2^-1 M1) x2.
    pub m2_inv_m1: DMatrix<f64>,
    /// Constant uncertainty-injection matrix: K[delta_i, i] = K_p,i.
    pub k: DMatrix<f64>,
}

/// Builds (M1, M2) by substituting the current-derivative equations into the
/// time derivative of the KCL constraint. The d-axis and q-axis blocks of M2
/// are identical: -(E_C^T diag(1/L_c) E_C + E_L^T diag(1/L_L) E_L +
/// E_B^T diag(1/L_B) E_B).
pub fn assemble_constraint(
    grid: &Grid,
    loads: &[LoadParams],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let l = &grid.layout;
    if loads.len() != l.n_load {
        return Err(Error::Assembly(format!(
            "expected {} load parameter sets, got {}",
            l.n_load,
            loads.len()
        )));
    }
    let n_bus = l.n_bus;
    let omega_n = grid.omega_n;

    let mut a = DMatrix::zeros(n_bus, n_bus);
    for (i, conv) in grid.topology.converters.iter().enumerate() {
        let b = grid.conv_bus[i];
        a[(b, b)] += 1.0 / conv.params.l_c;
    }
    for (j, lp) in loads.iter().enumerate() {
        if !(lp.r_l > 0.0 && lp.l_l > 0.0) {
            return Err(Error::Assembly(format!(
                "load {} has non-positive impedance (r_l = {}, l_l = {})",
                grid.topology.loads[j].id, lp.r_l, lp.l_l
            )));
        }
        let b = grid.load_bus[j];
        a[(b, b)] += 1.0 / lp.l_l;
    }
    for (k, br) in grid.topology.branches.iter().enumerate() {
        let w = 1.0 / br.params.l_b;
        let f = grid.branch_from[k];
        let t = grid.branch_to[k];
        a[(f, f)] += w;
        a[(t, t)] += w;
        a[(f, t)] -= w;
        a[(t, f)] -= w;
    }

    let mut m2 = DMatrix::zeros(2 * n_bus, 2 * n_bus);
    m2.view_mut((0, 0), (n_bus, n_bus)).copy_from(&(-&a));
    m2.view_mut((n_bus, n_bus), (n_bus, n_bus)).copy_from(&(-&a));

    let mut m1 = DMatrix::zeros(2 * n_bus, l.x2_dim());
    for (i, conv) in grid.topology.converters.iter().enumerate() {
        let p = &conv.params;
        let b = grid.conv_bus[i];
        m1[(b, l.x2_v_od(i))] += 1.0 / p.l_c;
        m1[(b, l.x2_i_od(i))] += -p.r_c / p.l_c;
        m1[(b, l.x2_i_oq(i))] += omega_n;
        m1[(n_bus + b, l.x2_v_oq(i))] += 1.0 / p.l_c;
        m1[(n_bus + b, l.x2_i_oq(i))] += -p.r_c / p.l_c;
        m1[(n_bus + b, l.x2_i_od(i))] += -omega_n;
    }
    for (j, lp) in loads.iter().enumerate() {
        let b = grid.load_bus[j];
        m1[(b, l.x2_load_i_d(j))] += lp.r_l / lp.l_l;
        m1[(b, l.x2_load_i_q(j))] += -omega_n;
        m1[(n_bus + b, l.x2_load_i_q(j))] += lp.r_l / lp.l_l;
        m1[(n_bus + b, l.x2_load_i_d(j))] += omega_n;
    }
    for (k, br) in grid.topology.branches.iter().enumerate() {
        let w = br.params.r_b / br.params.l_b;
        for (&bus, sign) in [(&grid.branch_from[k], 1.0), (&grid.branch_to[k], -1.0)] {
            m1[(bus, l.x2_branch_i_d(k))] += sign * w;
            m1[(bus, l.x2_branch_i_q(k))] += -sign * omega_n;
            m1[(n_bus + bus, l.x2_branch_i_q(k))] += sign * w;
            m1[(n_bus + bus, l.x2_branch_i_d(k))] += sign * omega_n;
        }
    }
    Ok((m1, m2))
}

impl ReducedModel {
    /// Assembles the constraint matrices and precomputes the elimination map
    /// for one scenario point's load parameters.
    pub fn assemble(grid: Arc<Grid>, loads: Vec<LoadParams>) -> Result<ReducedModel> {
        let (m1, m2) = assemble_constraint(&grid, &loads)?;
        let n_bus = grid.layout.n_bus;
        let neg_a = -m2.view((0, 0), (n_bus, n_bus)).clone_owned();
        let chol_neg_a = Cholesky::new(neg_a).ok_or_else(|| {
            // A singular axis block means some bus contributes no inductive
            // path at all: no converter, no load, no connected branch.
            let isolated: Vec<u32> = (0..n_bus)
                .filter(|&b| m2[(b, b)] == 0.0)
                .map(|b| grid.topology.bus_ids[b])
                .collect();
            if isolated.is_empty() {
                Error::Assembly("M2 is singular".into())
            } else {
                Error::Assembly(format!(
                    "M2 is singular: buses {isolated:?} have no converter, load, or connected branch"
                ))
            }
        })?;
        // M2^-1 M1 block-wise: M2 = diag(-A, -A).
        let top = -chol_neg_a.solve(&m1.rows(0, n_bus).clone_owned());
        let bottom = -chol_neg_a.solve(&m1.rows(n_bus, n_bus).clone_owned());
        let mut m2_inv_m1 = DMatrix::zeros(2 * n_bus, grid.layout.x2_dim());
        m2_inv_m1.rows_mut(0, n_bus).copy_from(&top);
        m2_inv_m1.rows_mut(n_bus, n_bus).copy_from(&bottom);

        let mut k = DMatrix::zeros(grid.layout.dim(), grid.layout.n_conv);
        for (i, conv) in grid.topology.converters.iter().enumerate() {
            k[(grid.layout.delta(i), i)] = conv.params.k_p;
        }
        Ok(ReducedModel {
            grid,
            loads,
            m1,
            m2,
            m2_inv_m1,
            k,
        })
    }

    /// Bus voltages from the electrical partition: z = -M2^-1 M1 x2.
    pub fn solve_bus_voltages(&self, x2: nalgebra::DVectorView<f64>) -> BusVoltages {
        let n_bus = self.grid.layout.n_bus;
        let mut z = DVector::zeros(2 * n_bus);
        z.gemv(-1.0, &self.m2_inv_m1, &x2, 0.0);
        BusVoltages {
            v_bd: z.rows(0, n_bus).into_owned(),
            v_bq: z.rows(n_bus, n_bus).into_owned(),
        }
    }

    /// Bus voltages for a full state vector.
    pub fn bus_voltages(&self, x: &DVector<f64>) -> BusVoltages {
        let l = &self.grid.layout;
        self.solve_bus_voltages(x.rows(l.x2_offset(), l.x2_dim()))
    }

    /// Right-hand side of the reduced ODE.
    pub fn ode_rhs(&self, x: &DVector<f64>, exo: &Exogenous, u: &ControlInput) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.grid.layout.dim());
        self.ode_rhs_into(x, exo, u, &mut out)?;
        Ok(out)
    }

    pub fn ode_rhs_into(
        &self,
        x: &DVector<f64>,
        exo: &Exogenous,
        u: &ControlInput,
        out: &mut DVector<f64>,
    ) -> Result<()> {
        check_state_finite(&self.grid, x)?;
        let bus = self.bus_voltages(x);
        converter_rhs_into(&self.grid, x, &bus, exo, u, out);
        load_rhs_into(&self.grid, &self.loads, x, &bus, out);
        branch_rhs_into(&self.grid, x, &bus, out);
        Ok(())
    }

    /// Unchecked fast path used inside integrators (dimensions already
    /// validated, finiteness guarded by the caller's error control).
    pub(crate) fn rhs_unchecked(
        &self,
        x: &DVector<f64>,
        exo: &Exogenous,
        u: &ControlInput,
        out: &mut DVector<f64>,
    ) {
        let bus = self.bus_voltages(x);
        converter_rhs_into(&self.grid, x, &bus, exo, u, out);
        load_rhs_into(&self.grid, &self.loads, x, &bus, out);
        branch_rhs_into(&self.grid, x, &bus, out);
    }

    /// The drift term of the affine form: f(x) = ode_rhs(x) with zero
    /// forecast error and zero control (setpoints kept).
    pub fn affine_f(&self, x: &DVector<f64>, exo: &Exogenous) -> Result<DVector<f64>> {
        let mut exo0 = exo.clone();
        exo0.xi.fill(0.0);
        self.ode_rhs(x, &exo0, &ControlInput::zero(self.grid.layout.n_conv))
    }

    /// The control input matrix g(x), dim x 2 n_conv, columns ordered
    /// [u_p rows; u_q rows]. u_p acts constantly on the angle rows; u_q acts
    /// through the cos/sin angle projection of the voltage reference, so g
    /// depends on the state only through the angles.
    pub fn affine_g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let l = &self.grid.layout;
        let n = l.n_conv;
        let mut g = DMatrix::zeros(l.dim(), 2 * n);
        for (i, conv) in self.grid.topology.converters.iter().enumerate() {
            let p = &conv.params;
            let (sin_d, cos_d) = x[l.delta(i)].sin_cos();
            g[(l.delta(i), i)] = 1.0;
            g[(l.phi_d(i), n + i)] = cos_d;
            g[(l.phi_q(i), n + i)] = sin_d;
            g[(l.gamma_d(i), n + i)] = p.k_pv * cos_d;
            g[(l.gamma_q(i), n + i)] = p.k_pv * sin_d;
            g[(l.i_ld(i), n + i)] = p.k_pc * p.k_pv * cos_d / p.l_f;
            g[(l.i_lq(i), n + i)] = p.k_pc * p.k_pv * sin_d / p.l_f;
        }
        g
    }

    /// Both affine pieces at once: ode_rhs(x, xi, u) = f(x) + K xi + g(x) u.
    pub fn affine_decompose(
        &self,
        x: &DVector<f64>,
        exo: &Exogenous,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.affine_f(x, exo)?, self.affine_g(x)))
    }

    /// Diagnostic evaluation through the pre-elimination equations.
    pub fn ode_rhs_unreduced(
        &self,
        x: &DVector<f64>,
        exo: &Exogenous,
        u: &ControlInput,
    ) -> Result<DVector<f64>> {
        check_state_finite(&self.grid, x)?;
        let bus = self.bus_voltages(x);
        Ok(full_rhs_unreduced(&self.grid, &self.loads, x, &bus, exo, u))
    }

    /// Writes M1, M2, and K as dense CSV files (`m1.csv`, `m2.csv`, `k.csv`)
    /// into `dir`, row-major with a header row of column labels.
    pub fn dump_matrices(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let x2_labels: Vec<String> = {
            let all = self.grid.state_labels();
            all[self.grid.layout.x2_offset()..].to_vec()
        };
        let bus_labels = self.grid.bus_labels();
        let conv_labels: Vec<String> = self
            .grid
            .topology
            .converters
            .iter()
            .map(|c| c.id.clone())
            .collect();
        write_matrix_csv(&dir.join("m1.csv"), &x2_labels, &self.m1)?;
        write_matrix_csv(&dir.join("m2.csv"), &bus_labels, &self.m2)?;
        write_matrix_csv(&dir.join("k.csv"), &conv_labels, &self.k)?;
        Ok(())
    }
}

fn write_matrix_csv(path: &Path, col_labels: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "{}", col_labels.join(","));
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.16e}", m[(r, c)])).collect();
        let _ = writeln!(text, "{}", row.join(","));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{
        default_converter_params, Branch, BranchParams, Converter, GridTopology, Load,
    };
    use rand_core::{RngCore, SeedableRng};

    /// Two-bus toy: converter at bus 1, load at bus 2, one branch between.
    /// L_c = 1e-3 (built-in), L_L = 1e-2, L_B = 1e-3.
    fn toy() -> (Arc<Grid>, Vec<LoadParams>) {
        let grid = Grid::new(GridTopology {
            bus_ids: vec![1, 2],
            branches: vec![Branch {
                from: 1,
                to: 2,
                params: BranchParams { r_b: 0.1, l_b: 1e-3 },
            }],
            converters: vec![Converter {
                id: "G1".into(),
                bus: 1,
                params: default_converter_params(0),
            }],
            loads: vec![Load { id: "L1".into(), bus: 2 }],
        })
        .unwrap();
        let loads = vec![LoadParams { r_l: 1.0, l_l: 1e-2 }];
        (grid, loads)
    }

    fn default_model() -> ReducedModel {
        let grid = Grid::new(GridTopology::default_33bus()).unwrap();
        let loads = nominal_loads(&grid);
        ReducedModel::assemble(grid, loads).unwrap()
    }

    pub(crate) fn nominal_loads(grid: &Grid) -> Vec<LoadParams> {
        (0..grid.layout.n_load)
            .map(|j| LoadParams {
                r_l: 450.0 + 15.0 * j as f64,
                l_l: 0.5 + 0.02 * j as f64,
            })
            .collect()
    }

    #[test]
    fn toy_m2_matches_hand_assembly() {
        let (grid, loads) = toy();
        let (_, m2) = assemble_constraint(&grid, &loads).unwrap();
        // Hand assembly: -[[1/L_c + 1/L_B, -1/L_B], [-1/L_B, 1/L_L + 1/L_B]]
        let expected = [
            [-(1.0 / 1e-3 + 1.0 / 1e-3), 1.0 / 1e-3],
            [1.0 / 1e-3, -(1.0 / 1e-2 + 1.0 / 1e-3)],
        ];
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(m2[(r, c)], expected[r][c], "entry ({r},{c})");
                assert_eq!(m2[(r + 2, c + 2)], expected[r][c], "q entry ({r},{c})");
                assert_eq!(m2[(r, c + 2)], 0.0);
                assert_eq!(m2[(r + 2, c)], 0.0);
            }
        }
        assert_eq!(m2[(0, 0)], -2000.0);
        assert_eq!(m2[(0, 1)], 1000.0);
        assert_eq!(m2[(1, 1)], -1100.0);
    }

    #[test]
    fn m2_is_symmetric_with_identical_axis_blocks() {
        let model = default_model();
        let m2 = &model.m2;
        assert_eq!((m2 - m2.transpose()).abs().max(), 0.0);
        let n = model.grid.layout.n_bus;
        let d = m2.view((0, 0), (n, n));
        let q = m2.view((n, n), (n, n));
        assert_eq!(d, q);
        assert_eq!(m2.view((0, n), (n, n)).abs().max(), 0.0);
        // -M2 axis block passes Cholesky.
        assert!(Cholesky::new(-d.clone_owned()).is_some());
    }

    #[test]
    fn singular_m2_names_the_isolated_bus() {
        // Built by hand (bypassing topology validation) so that bus 3 has
        // no converter, load, or branch.
        let topo = GridTopology {
            bus_ids: vec![1, 2, 3],
            branches: vec![Branch {
                from: 1,
                to: 2,
                params: BranchParams { r_b: 0.1, l_b: 1e-3 },
            }],
            converters: vec![Converter {
                id: "G1".into(),
                bus: 1,
                params: default_converter_params(0),
            }],
            loads: vec![Load { id: "L1".into(), bus: 2 }],
        };
        let incidence = crate::grid::build_incidence(&topo);
        let layout = crate::state::StateLayout::new(1, 1, 1, 3);
        let grid = Grid {
            conv_bus: vec![0],
            load_bus: vec![1],
            branch_from: vec![0],
            branch_to: vec![1],
            omega_n: topo.converters[0].params.omega_n,
            kcl: DMatrix::zeros(6, layout.dim()),
            kcl_null: DMatrix::zeros(layout.dim(), layout.dim() - 6),
            incidence,
            layout,
            topology: topo,
        };
        let loads = vec![LoadParams { r_l: 1.0, l_l: 1e-2 }];
        let err = ReducedModel::assemble(Arc::new(grid), loads).unwrap_err();
        assert!(err.to_string().contains('3'), "{err}");
    }

    #[test]
    fn bus_voltage_solve_satisfies_constraint() {
        let model = default_model();
        let l = &model.grid.layout;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = crate::testutil::random_state(&model.grid, &mut rng);
        let x2 = x.rows(l.x2_offset(), l.x2_dim()).into_owned();
        let bus = model.solve_bus_voltages(x.rows(l.x2_offset(), l.x2_dim()));
        let mut z = DVector::zeros(2 * l.n_bus);
        z.rows_mut(0, l.n_bus).copy_from(&bus.v_bd);
        z.rows_mut(l.n_bus, l.n_bus).copy_from(&bus.v_bq);
        let residual = &model.m1 * &x2 + &model.m2 * &z;
        let rhs_norm = (&model.m1 * &x2).abs().max();
        assert!(residual.abs().max() <= 1e-9 * rhs_norm);
        // Zero in, zero out.
        let zero = DVector::zeros(l.x2_dim());
        let bus0 = model.solve_bus_voltages(zero.rows(0, l.x2_dim()));
        assert_eq!(bus0.v_bd.abs().max(), 0.0);
        assert_eq!(bus0.v_bq.abs().max(), 0.0);
    }

    #[test]
    fn toy_bus_voltages_match_hand_solve() {
        let (grid, loads) = toy();
        let model = ReducedModel::assemble(grid, loads).unwrap();
        let l = &model.grid.layout;
        let mut x = DVector::zeros(l.dim());
        x[l.v_od(0)] = 10000.0;
        x[l.i_od(0)] = 50.0;
        x[l.load_i_d(0)] = 45.0;
        x[l.branch_i_d(0)] = 40.0;
        let x2 = x.rows(l.x2_offset(), l.x2_dim()).into_owned();
        let rhs = &model.m1 * &x2;
        // Hand solve of A z_d = rhs_d with A = [[2000, -1000], [-1000, 1100]].
        let det = 2000.0 * 1100.0 - 1000.0 * 1000.0;
        let zd0 = (1100.0 * rhs[0] + 1000.0 * rhs[1]) / det;
        let zd1 = (1000.0 * rhs[0] + 2000.0 * rhs[1]) / det;
        let bus = model.solve_bus_voltages(x.rows(l.x2_offset(), l.x2_dim()));
        assert!((bus.v_bd[0] - zd0).abs() <= 1e-9 * zd0.abs().max(1.0));
        assert!((bus.v_bd[1] - zd1).abs() <= 1e-9 * zd1.abs().max(1.0));
    }

    #[test]
    fn state_dimension_is_225_and_zero_is_fixed_point() {
        let model = default_model();
        assert_eq!(model.grid.layout.dim(), 225);
        let n = model.grid.layout.n_conv;
        let exo = Exogenous::zero(n, model.grid.omega_n);
        let u = ControlInput::zero(n);
        let x = DVector::zeros(225);
        let r = model.ode_rhs(&x, &exo, &u).unwrap();
        assert_eq!(r.abs().max(), 0.0);
    }

    #[test]
    fn elimination_matches_generic_linear_solve() {
        let model = default_model();
        let l = &model.grid.layout;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let x = crate::testutil::random_state(&model.grid, &mut rng);
            let x2 = x.rows(l.x2_offset(), l.x2_dim()).into_owned();
            // Generic route: solve M2 z = -M1 x2 with LU, no structure used.
            let rhs = -(&model.m1 * &x2);
            let z = model.m2.clone().lu().solve(&rhs).unwrap();
            let bus = model.solve_bus_voltages(x.rows(l.x2_offset(), l.x2_dim()));
            let scale = z.abs().max().max(1.0);
            for b in 0..l.n_bus {
                assert!((bus.v_bd[b] - z[b]).abs() <= 1e-9 * scale);
                assert!((bus.v_bq[b] - z[l.n_bus + b]).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn elimination_is_linear() {
        let model = default_model();
        let l = &model.grid.layout;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let xa = crate::testutil::random_state(&model.grid, &mut rng);
        let xb = crate::testutil::random_state(&model.grid, &mut rng);
        let (a, b) = (0.7, -1.3);
        let combo = &xa * a + &xb * b;
        let za = model.bus_voltages(&xa);
        let zb = model.bus_voltages(&xb);
        let zc = model.bus_voltages(&combo);
        let scale = zc.v_bd.abs().max().max(zc.v_bq.abs().max()).max(1.0);
        for i in 0..l.n_bus {
            assert!((zc.v_bd[i] - (a * za.v_bd[i] + b * zb.v_bd[i])).abs() <= 1e-12 * scale);
            assert!((zc.v_bq[i] - (a * za.v_bq[i] + b * zb.v_bq[i])).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn affine_identity_holds() {
        let model = default_model();
        let l = &model.grid.layout;
        let n = l.n_conv;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let x = crate::testutil::random_state(&model.grid, &mut rng);
            let exo = crate::testutil::random_exo(&model.grid, &mut rng);
            let mut u = ControlInput::zero(n);
            for i in 0..n {
                u.u_p[i] = (rng.next_u32() as f64 / u32::MAX as f64) * 2.0 - 1.0;
                u.u_q[i] = (rng.next_u32() as f64 / u32::MAX as f64) * 200.0 - 100.0;
            }
            let full = model.ode_rhs(&x, &exo, &u).unwrap();
            let (f, g) = model.affine_decompose(&x, &exo).unwrap();
            let reconstructed = &f + &model.k * &exo.xi + &g * u.stacked();
            let scale = full.abs().max().max(1.0);
            let diff = (&full - &reconstructed).abs().max();
            assert!(diff <= 1e-12 * scale, "diff {diff} vs scale {scale}");
        }
    }

    #[test]
    fn k_matrix_has_single_droop_entry_per_column() {
        let model = default_model();
        let l = &model.grid.layout;
        let mut nonzero = 0;
        for r in 0..l.dim() {
            for c in 0..l.n_conv {
                if model.k[(r, c)] != 0.0 {
                    nonzero += 1;
                    assert_eq!(r, l.delta(c));
                }
            }
        }
        assert_eq!(nonzero, l.n_conv);
        // G2's column carries its droop gain at the G2 angle row.
        assert_eq!(model.k[(l.delta(1), 1)], 1.0e-6);
    }

    #[test]
    fn u_p_columns_of_g_are_state_independent() {
        let model = default_model();
        let l = &model.grid.layout;
        let n = l.n_conv;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let g0 = model.affine_g(&crate::testutil::random_state(&model.grid, &mut rng));
        for _ in 0..5 {
            let g = model.affine_g(&crate::testutil::random_state(&model.grid, &mut rng));
            for c in 0..n {
                let diff = (g.column(c) - g0.column(c)).abs().max();
                assert!(diff <= 1e-12);
            }
        }
    }

    #[test]
    fn kcl_residual_is_conserved_by_the_rhs() {
        // The differentiated constraint makes C * rhs vanish identically,
        // for any state, not just on the constraint manifold.
        let model = default_model();
        let n = model.grid.layout.n_conv;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let exo = crate::testutil::random_exo(&model.grid, &mut rng);
        let u = ControlInput::zero(n);
        for _ in 0..5 {
            let x = crate::testutil::random_state(&model.grid, &mut rng);
            let r = model.ode_rhs(&x, &exo, &u).unwrap();
            let c_r = (&model.grid.kcl * &r).abs().max();
            let scale = r.abs().max();
            assert!(c_r <= 1e-12 * scale, "C*rhs = {c_r} at scale {scale}");
        }
    }

    #[test]
    fn dump_matrices_writes_parseable_csv() {
        let model = default_model();
        let dir = tempfile::tempdir().unwrap();
        model.dump_matrices(dir.path()).unwrap();
        for (name, rows, cols) in [
            ("m1.csv", 64, model.grid.layout.x2_dim()),
            ("m2.csv", 64, 64),
            ("k.csv", 225, 9),
        ] {
            let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
            let mut lines = text.lines();
            let header = lines.next().unwrap();
            assert_eq!(header.split(',').count(), cols, "{name} header");
            let data: Vec<&str> = lines.collect();
            assert_eq!(data.len(), rows, "{name} rows");
            for line in data {
                for field in line.split(',') {
                    field.parse::<f64>().unwrap();
                }
            }
        }
    }
}
