//! Layout of the reduced-model state vector.
//!
//! The state is stored block-by-symbol: first all converter angles, then all
//! filtered active powers, and so on through the thirteen converter blocks,
//! followed by load currents (d then q) and branch currents (d then q).
//! For the default grid this gives 13*9 + 2*23 + 2*31 = 225 states.

use nalgebra::DVector;

/// Number of scalar states per converter.
pub const CONVERTER_STATES: usize = 13;

/// Converter state blocks, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConverterBlock {
    Delta = 0,
    P = 1,
    Q = 2,
    PhiD = 3,
    PhiQ = 4,
    GammaD = 5,
    GammaQ = 6,
    ILd = 7,
    ILq = 8,
    VOd = 9,
    VOq = 10,
    IOd = 11,
    IOq = 12,
}

/// Index map from physical quantities to positions in the state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateLayout {
    pub n_conv: usize,
    pub n_load: usize,
    pub n_branch: usize,
    pub n_bus: usize,
}

impl StateLayout {
    pub fn new(n_conv: usize, n_load: usize, n_branch: usize, n_bus: usize) -> Self {
        StateLayout {
            n_conv,
            n_load,
            n_branch,
            n_bus,
        }
    }

    /// Total state dimension.
    pub fn dim(&self) -> usize {
        CONVERTER_STATES * self.n_conv + 2 * self.n_load + 2 * self.n_branch
    }

    /// Dimension of the slow partition (delta .. i_lq).
    pub fn x1_dim(&self) -> usize {
        9 * self.n_conv
    }

    /// Offset of the electrical partition (v_od .. i_Bq) inside the state.
    pub fn x2_offset(&self) -> usize {
        9 * self.n_conv
    }

    /// Dimension of the electrical partition.
    pub fn x2_dim(&self) -> usize {
        4 * self.n_conv + 2 * self.n_load + 2 * self.n_branch
    }

    #[inline]
    pub fn conv(&self, block: ConverterBlock, i: usize) -> usize {
        debug_assert!(i < self.n_conv);
        block as usize * self.n_conv + i
    }

    #[inline]
    pub fn delta(&self, i: usize) -> usize {
        self.conv(ConverterBlock::Delta, i)
    }

    #[inline]
    pub fn p(&self, i: usize) -> usize {
        self.conv(ConverterBlock::P, i)
    }

    #[inline]
    pub fn q(&self, i: usize) -> usize {
        self.conv(ConverterBlock::Q, i)
    }

    #[inline]
    pub fn phi_d(&self, i: usize) -> usize {
        self.conv(ConverterBlock::PhiD, i)
    }

    #[inline]
    pub fn phi_q(&self, i: usize) -> usize {
        self.conv(ConverterBlock::PhiQ, i)
    }

    #[inline]
    pub fn gamma_d(&self, i: usize) -> usize {
        self.conv(ConverterBlock::GammaD, i)
    }

    #[inline]
    pub fn gamma_q(&self, i: usize) -> usize {
        self.conv(ConverterBlock::GammaQ, i)
    }

    #[inline]
    pub fn i_ld(&self, i: usize) -> usize {
        self.conv(ConverterBlock::ILd, i)
    }

    #[inline]
    pub fn i_lq(&self, i: usize) -> usize {
        self.conv(ConverterBlock::ILq, i)
    }

    #[inline]
    pub fn v_od(&self, i: usize) -> usize {
        self.conv(ConverterBlock::VOd, i)
    }

    #[inline]
    pub fn v_oq(&self, i: usize) -> usize {
        self.conv(ConverterBlock::VOq, i)
    }

    #[inline]
    pub fn i_od(&self, i: usize) -> usize {
        self.conv(ConverterBlock::IOd, i)
    }

    #[inline]
    pub fn i_oq(&self, i: usize) -> usize {
        self.conv(ConverterBlock::IOq, i)
    }

    #[inline]
    pub fn load_i_d(&self, j: usize) -> usize {
        debug_assert!(j < self.n_load);
        CONVERTER_STATES * self.n_conv + j
    }

    #[inline]
    pub fn load_i_q(&self, j: usize) -> usize {
        debug_assert!(j < self.n_load);
        CONVERTER_STATES * self.n_conv + self.n_load + j
    }

    #[inline]
    pub fn branch_i_d(&self, k: usize) -> usize {
        debug_assert!(k < self.n_branch);
        CONVERTER_STATES * self.n_conv + 2 * self.n_load + k
    }

    #[inline]
    pub fn branch_i_q(&self, k: usize) -> usize {
        debug_assert!(k < self.n_branch);
        CONVERTER_STATES * self.n_conv + 2 * self.n_load + self.n_branch + k
    }

    // Positions inside the electrical partition x2 = [v_od; v_oq; i_od; i_oq;
    // i_Ld; i_Lq; i_Bd; i_Bq], used when assembling the constraint matrices.

    #[inline]
    pub fn x2_v_od(&self, i: usize) -> usize {
        i
    }

    #[inline]
    pub fn x2_v_oq(&self, i: usize) -> usize {
        self.n_conv + i
    }

    #[inline]
    pub fn x2_i_od(&self, i: usize) -> usize {
        2 * self.n_conv + i
    }

    #[inline]
    pub fn x2_i_oq(&self, i: usize) -> usize {
        3 * self.n_conv + i
    }

    #[inline]
    pub fn x2_load_i_d(&self, j: usize) -> usize {
        4 * self.n_conv + j
    }

    #[inline]
    pub fn x2_load_i_q(&self, j: usize) -> usize {
        4 * self.n_conv + self.n_load + j
    }

    #[inline]
    pub fn x2_branch_i_d(&self, k: usize) -> usize {
        4 * self.n_conv + 2 * self.n_load + k
    }

    #[inline]
    pub fn x2_branch_i_q(&self, k: usize) -> usize {
        4 * self.n_conv + 2 * self.n_load + self.n_branch + k
    }

    /// All (d, q) index pairs of the state vector, in storage order.
    pub fn dq_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(5 * self.n_conv + self.n_load + self.n_branch);
        for i in 0..self.n_conv {
            pairs.push((self.phi_d(i), self.phi_q(i)));
            pairs.push((self.gamma_d(i), self.gamma_q(i)));
            pairs.push((self.i_ld(i), self.i_lq(i)));
            pairs.push((self.v_od(i), self.v_oq(i)));
            pairs.push((self.i_od(i), self.i_oq(i)));
        }
        for j in 0..self.n_load {
            pairs.push((self.load_i_d(j), self.load_i_q(j)));
        }
        for k in 0..self.n_branch {
            pairs.push((self.branch_i_d(k), self.branch_i_q(k)));
        }
        pairs
    }

    /// Per-state representative magnitude, used for finite-difference step
    /// selection: every state in a block shares max(1, |block|_inf).
    pub fn block_scales(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut scales = DVector::zeros(self.dim());
        let mut apply = |start: usize, len: usize| {
            let mut m: f64 = 1.0;
            for i in start..start + len {
                m = m.max(x[i].abs());
            }
            for i in start..start + len {
                scales[i] = m;
            }
        };
        for b in 0..CONVERTER_STATES {
            apply(b * self.n_conv, self.n_conv);
        }
        apply(self.load_i_d(0), self.n_load);
        apply(self.load_i_q(0), self.n_load);
        apply(self.branch_i_d(0), self.n_branch);
        apply(self.branch_i_q(0), self.n_branch);
        scales
    }
}

/// Applies the global frame rotation R_alpha: every (d, q) pair is rotated by
/// `alpha` and every converter angle is shifted by `alpha`.
pub fn rotate_state(layout: &StateLayout, x: &DVector<f64>, alpha: f64) -> DVector<f64> {
    let (sin_a, cos_a) = alpha.sin_cos();
    let mut out = x.clone();
    for i in 0..layout.n_conv {
        out[layout.delta(i)] = x[layout.delta(i)] + alpha;
    }
    for (di, qi) in layout.dq_pairs() {
        out[di] = cos_a * x[di] - sin_a * x[qi];
        out[qi] = sin_a * x[di] + cos_a * x[qi];
    }
    out
}

/// Applies the rotation to a tangent vector (a state derivative): (d, q)
/// pairs rotate while the delta, P, and Q rows are left unchanged.
pub fn rotate_tangent(layout: &StateLayout, v: &DVector<f64>, alpha: f64) -> DVector<f64> {
    let (sin_a, cos_a) = alpha.sin_cos();
    let mut out = v.clone();
    for (di, qi) in layout.dq_pairs() {
        out[di] = cos_a * v[di] - sin_a * v[qi];
        out[qi] = sin_a * v[di] + cos_a * v[qi];
    }
    out
}

/// Infinitesimal generator of the rotation family at `x`:
/// d/d(alpha) rotate_state(x, alpha) at alpha = 0.
pub fn rotation_generator(layout: &StateLayout, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(layout.dim());
    for i in 0..layout.n_conv {
        g[layout.delta(i)] = 1.0;
    }
    for (di, qi) in layout.dq_pairs() {
        g[di] = -x[qi];
        g[qi] = x[di];
    }
    g
}
