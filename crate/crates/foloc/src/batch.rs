//! Stacked batch-model matrices over a measurement horizon.
//!
//! For a horizon of `N+1` steps the model reads
//! `y = O x0 + sum_j J_j u_j + v`, with `O` the observability matrix and
//! `J_j` the lower block-Toeplitz impulse-response matrix of channel `j`.
//! For an active set `S` the grouped matrix `J_S` interleaves the active
//! channels time-major, and `Psi_S = [O, J_S]` is the design matrix of the
//! active subsystem.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::system::LtiSystem;

/// Lower block-Toeplitz impulse-response matrix of the channels in `sources`
/// over horizon `N`: block `(k, l)` is `H^{(S)}_{k-l}` for `k >= l`, zero
/// otherwise, with `H^{(S)}_0 = 0` and `H^{(S)}_l = C A^{l-1} B_S`.
pub(crate) fn block_toeplitz(sys: &LtiSystem, sources: &[usize], n_horizon: usize) -> DMatrix<f64> {
    let p = sys.p();
    let w = sources.len();
    let rows = p * (n_horizon + 1);
    let cols = w * (n_horizon + 1);
    let mut out = DMatrix::zeros(rows, cols);
    if w == 0 {
        return out;
    }
    // H_l = C A^{l-1} B_S computed by iterating the state map on B_S.
    let b_s = DMatrix::from_fn(sys.n(), w, |i, k| sys.b()[(i, sources[k])]);
    let mut powered = b_s;
    for lag in 1..=n_horizon {
        let h = sys.c() * &powered;
        for col_block in 0..=(n_horizon - lag) {
            let row_block = col_block + lag;
            out.view_mut((row_block * p, col_block * w), (p, w)).copy_from(&h);
        }
        if lag < n_horizon {
            powered = sys.a() * powered;
        }
    }
    out
}

/// Permutation relating the source-grouped input stacking
/// `[u_{s1}; ...; u_{sm*}]` to the time-interleaved stacking
/// `[u_S[0]; ...; u_S[N]]` used by the grouped matrix `J_S`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPermutation {
    // forward[i] = interleaved index holding source-grouped entry i.
    forward: Vec<usize>,
    group_count: usize,
    group_len: usize,
}

impl GroupPermutation {
    fn new(group_count: usize, group_len: usize) -> Self {
        let mut forward = vec![0; group_count * group_len];
        for g in 0..group_count {
            for k in 0..group_len {
                forward[g * group_len + k] = k * group_count + g;
            }
        }
        Self { forward, group_count, group_len }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Dense matrix `P` with `source_grouped = P * interleaved`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.len(), self.len());
        for (i, &j) in self.forward.iter().enumerate() {
            p[(i, j)] = 1.0;
        }
        p
    }

    pub fn source_grouped_from_interleaved(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.forward.iter().map(|&j| v[j]))
    }

    pub fn interleaved_from_source_grouped(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        for (i, &j) in self.forward.iter().enumerate() {
            out[j] = v[i];
        }
        out
    }

    /// Splits a time-interleaved vector (length divisible by `m*`) into one
    /// series per source, in active-set order.
    pub fn groups_from_interleaved(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        let steps = v.len() / self.group_count;
        (0..self.group_count)
            .map(|g| DVector::from_iterator(steps, (0..steps).map(|k| v[k * self.group_count + g])))
            .collect()
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn group_len(&self) -> usize {
        self.group_len
    }
}

/// All horizon-`N` stacked matrices for a system and an active set.
#[derive(Debug, Clone)]
pub struct BatchModel {
    n: usize,
    m: usize,
    p: usize,
    n_horizon: usize,
    active_set: Vec<usize>,
    obs: DMatrix<f64>,
    impulse: Vec<DMatrix<f64>>,
    j_group: DMatrix<f64>,
    psi: DMatrix<f64>,
    perm: GroupPermutation,
}

impl BatchModel {
    /// Builds the observability matrix, every per-channel impulse matrix,
    /// the grouped `J_S`, and `Psi_S = [O, J_S]` for the given active set.
    pub fn build(sys: &LtiSystem, active_set: &[usize], n_horizon: usize) -> Result<Self> {
        if active_set.is_empty() {
            return Err(Error::InvalidArgument("active set must be non-empty".into()));
        }
        let mut seen = vec![false; sys.m()];
        for &j in active_set {
            if j >= sys.m() {
                return Err(Error::InvalidArgument(format!(
                    "active-set index {j} out of range (m = {})",
                    sys.m()
                )));
            }
            if seen[j] {
                return Err(Error::InvalidArgument(format!("duplicate active-set index {j}")));
            }
            seen[j] = true;
        }

        let (n, m, p) = (sys.n(), sys.m(), sys.p());
        let obs = sys.observability(n_horizon);
        let impulse: Vec<DMatrix<f64>> =
            (0..m).map(|j| block_toeplitz(sys, &[j], n_horizon)).collect();
        let j_group = block_toeplitz(sys, active_set, n_horizon);

        let t = p * (n_horizon + 1);
        let mut psi = DMatrix::zeros(t, n + j_group.ncols());
        psi.view_mut((0, 0), (t, n)).copy_from(&obs);
        psi.view_mut((0, n), (t, j_group.ncols())).copy_from(&j_group);

        let perm = GroupPermutation::new(active_set.len(), n_horizon + 1);
        Ok(Self {
            n,
            m,
            p,
            n_horizon,
            active_set: active_set.to_vec(),
            obs,
            impulse,
            j_group,
            psi,
            perm,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m_star(&self) -> usize {
        self.active_set.len()
    }

    pub fn n_horizon(&self) -> usize {
        self.n_horizon
    }

    /// Stacked measurement dimension `T = p(N+1)`.
    pub fn t(&self) -> usize {
        self.p * (self.n_horizon + 1)
    }

    /// Samples per input group, `N+1`.
    pub fn group_dim(&self) -> usize {
        self.n_horizon + 1
    }

    pub fn active_set(&self) -> &[usize] {
        &self.active_set
    }

    pub fn inactive_set(&self) -> Vec<usize> {
        (0..self.m).filter(|j| !self.active_set.contains(j)).collect()
    }

    pub fn obs(&self) -> &DMatrix<f64> {
        &self.obs
    }

    pub fn impulse(&self, source: usize) -> &DMatrix<f64> {
        &self.impulse[source]
    }

    pub fn impulse_all(&self) -> &[DMatrix<f64>] {
        &self.impulse
    }

    /// Time-interleaved grouped impulse matrix `J_S`.
    pub fn j_group(&self) -> &DMatrix<f64> {
        &self.j_group
    }

    /// Design matrix `Psi_S = [O, J_S]` of the active subsystem.
    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn perm(&self) -> &GroupPermutation {
        &self.perm
    }

    /// Concatenation `[J_1, ..., J_m]` of all channels (source-grouped
    /// column layout); this is the regression matrix of the full problem.
    pub fn j_concat(&self) -> DMatrix<f64> {
        let t = self.t();
        let g = self.group_dim();
        let mut j = DMatrix::zeros(t, self.m * g);
        for (idx, jj) in self.impulse.iter().enumerate() {
            j.view_mut((0, idx * g), (t, g)).copy_from(jj);
        }
        j
    }

    /// Noise-free stacked output `O x0 + sum_j J_j u_j` (the matrix form of
    /// the recursion).
    pub fn stacked_output(&self, x0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<DVector<f64>> {
        if x0.len() != self.n || inputs.len() != self.m {
            return Err(Error::Dimension("x0 or input channel count mismatch".into()));
        }
        let mut y = &self.obs * x0;
        for (j, u) in inputs.iter().enumerate() {
            if u.len() != self.group_dim() {
                return Err(Error::Dimension(format!(
                    "input channel {j} has {} samples, expected {}",
                    u.len(),
                    self.group_dim()
                )));
            }
            y += &self.impulse[j] * u;
        }
        Ok(y)
    }
}
