//! Theorem preconditions and constants for support recovery: group
//! normalization, least singular value of the projected design, time- and
//! frequency-domain mutual incoherence, the regularization weight, the
//! minimum detectable input magnitude, the stacked noise covariance under
//! process noise, and the two closed-form error bounds.

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;
use serde::Serialize;

use crate::batch::BatchModel;
use crate::error::{Error, Result};
use crate::linalg::{
    induced_inf_norm, induced_one_norm, numerical_rank_complex, pinv, pinv_complex,
    smallest_nonzero_eigenvalue, spectral_norm, spectral_norm_complex, to_complex,
};
use crate::structure::input_delay;
use crate::system::LtiSystem;

/// Group normalization constant: the largest spectral norm among `O` and the
/// per-channel impulse matrices, divided by `sqrt(T)`.
pub fn group_norm_constant(batch: &BatchModel) -> Result<f64> {
    let mut worst = spectral_norm(batch.obs())?;
    for j in 0..batch.m() {
        worst = worst.max(spectral_norm(batch.impulse(j))?);
    }
    Ok(worst / (batch.t() as f64).sqrt())
}

/// Least singular value of the projected normalized Gram matrix
/// `Psi_high^T M Psi_high / T` with `M` the annihilator of `Psi_low`;
/// returns the smallest nonzero eigenvalue, plus a flag telling whether the
/// projected block kept full column rank.
pub fn least_singular(batch: &BatchModel, d: usize) -> Result<(f64, bool)> {
    let (high, low) = crate::structure::split_psi(batch, d)?;
    let projected = if low.ncols() == 0 {
        high.clone()
    } else {
        let low_pinv = pinv(&low, None)?;
        &high - &low * (low_pinv * &high)
    };
    let gram = high.tr_mul(&projected) / batch.t() as f64;
    smallest_nonzero_eigenvalue(&gram, None)
}

/// Time-domain mutual incoherence in the spectral and induced-1 norms.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TdMic {
    pub l2: f64,
    pub l1: f64,
}

impl TdMic {
    /// The incoherence condition asks for `m* * l2 < 1`.
    pub fn implied_alpha(&self, m_star: usize) -> f64 {
        m_star as f64 * self.l2
    }
}

fn mic_over(batch: &BatchModel, design: &DMatrix<f64>) -> Result<TdMic> {
    let inactive = batch.inactive_set();
    if inactive.is_empty() {
        return Err(Error::Precondition("inactive set is empty".into()));
    }
    // J_j^T Psi (Psi^T Psi)^+ = J_j^T (Psi^+)^T.
    let k = pinv(design, None)?.transpose();
    let mut l2 = 0.0_f64;
    let mut l1 = 0.0_f64;
    for j in inactive {
        let m = batch.impulse(j).tr_mul(&k);
        l2 = l2.max(spectral_norm(&m)?);
        l1 = l1.max(induced_one_norm(&m));
    }
    Ok(TdMic { l2, l1 })
}

/// Maximum correlation between any inactive channel and the active design
/// `Psi_S = [O, J_S]`: `max_j ||J_j^T Psi_S (Psi_S^T Psi_S)^+||`.
pub fn mic_time(batch: &BatchModel) -> Result<TdMic> {
    mic_over(batch, batch.psi())
}

/// Time-domain incoherence with the initial state excluded (`Psi_S = J_S`),
/// the configuration in which the frequency-domain value is an upper bound.
pub fn mic_time_inputs_only(batch: &BatchModel) -> Result<TdMic> {
    mic_over(batch, batch.j_group())
}

/// Transfer matrix `C (zI - A)^{-1} B_cols` evaluated by a linear solve.
pub fn transfer_matrix(
    sys: &LtiSystem,
    cols: &[usize],
    z: Complex<f64>,
) -> Result<DMatrix<Complex<f64>>> {
    let tol = 1e-8 * sys.spectral_radius().max(1.0);
    if sys.eigenvalues().iter().any(|l| (z - l).norm() <= tol) {
        return Err(Error::Numerical(format!(
            "evaluation point {z} is within tolerance of an eigenvalue of A"
        )));
    }
    let b_cols = to_complex(&sys.b_columns(cols)?);
    let mut zi_a = to_complex(&(-sys.a()));
    for i in 0..sys.n() {
        zi_a[(i, i)] += z;
    }
    let x = zi_a
        .lu()
        .solve(&b_cols)
        .ok_or_else(|| Error::Numerical(format!("zI - A is singular at z = {z}")))?;
    Ok(to_complex(sys.c()) * x)
}

/// One evaluated point of the frequency-domain incoherence scan.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FreqPoint {
    pub omega: f64,
    pub source: usize,
    pub gain: f64,
    /// `G_S` lost column rank at this frequency.
    pub rank_deficient: bool,
}

/// Frequency-domain mutual incoherence result.
#[derive(Debug, Clone, Serialize)]
pub struct FdMic {
    pub value: f64,
    pub argmax_omega: f64,
    pub argmax_source: usize,
    /// Whether the pencil normal rank attains `n + m*` (a precondition of
    /// the frequency-domain bound; the value is still reported otherwise).
    pub nrank_full: bool,
    pub grid_points: usize,
    pub rank_deficient_points: usize,
}

fn unit_circle_check(sys: &LtiSystem) -> Result<()> {
    let tol = 1e-6;
    if sys.eigenvalues().iter().any(|l| (l.norm() - 1.0).abs() <= tol) {
        return Err(Error::Numerical(
            "an eigenvalue of A lies on (or within tolerance of) the unit circle".into(),
        ));
    }
    Ok(())
}

fn fd_gains_at(
    sys: &LtiSystem,
    active: &[usize],
    inactive: &[usize],
    omega: f64,
) -> Result<Vec<FreqPoint>> {
    let z = Complex::new(omega.cos(), omega.sin());
    let g_all = transfer_matrix(sys, &(0..sys.m()).collect::<Vec<_>>(), z)?;
    let g_s = DMatrix::from_fn(sys.p(), active.len(), |i, k| g_all[(i, active[k])]);
    let rank_deficient = numerical_rank_complex(&g_s, None)? < active.len();
    let g_s_pinv = pinv_complex(&g_s, None)?;
    inactive
        .iter()
        .map(|&j| {
            let prod = &g_s_pinv * g_all.column(j);
            let gain = spectral_norm_complex(&DMatrix::from_column_slice(prod.len(), 1, prod.as_slice()))?;
            Ok(FreqPoint { omega, source: j, gain, rank_deficient })
        })
        .collect()
}

/// Evaluates `||G_S^+[z] G_j[z]||` for every inactive channel over a uniform
/// grid of the upper half unit circle (conjugate symmetry covers the rest).
pub fn mic_freq_trace(
    sys: &LtiSystem,
    active: &[usize],
    grid_points: usize,
) -> Result<Vec<FreqPoint>> {
    if grid_points < 2 {
        return Err(Error::InvalidArgument("need at least 2 grid points".into()));
    }
    unit_circle_check(sys)?;
    let inactive: Vec<usize> = (0..sys.m()).filter(|j| !active.contains(j)).collect();
    if inactive.is_empty() {
        return Err(Error::Precondition("inactive set is empty".into()));
    }
    let step = std::f64::consts::PI / (grid_points - 1) as f64;
    let per_omega: Vec<Result<Vec<FreqPoint>>> = (0..grid_points)
        .into_par_iter()
        .map(|i| fd_gains_at(sys, active, &inactive, i as f64 * step))
        .collect();
    let mut out = Vec::with_capacity(grid_points * inactive.len());
    for chunk in per_omega {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Maximum of the frequency-domain incoherence over the grid, with one 4x
/// refinement pass around the argmax.
pub fn mic_freq(sys: &LtiSystem, active: &[usize], grid_points: usize) -> Result<FdMic> {
    let trace = mic_freq_trace(sys, active, grid_points)?;
    let mut best = &trace[0];
    for pt in &trace {
        if pt.gain > best.gain {
            best = pt;
        }
    }
    let mut value = best.gain;
    let mut argmax_omega = best.omega;
    let mut argmax_source = best.source;
    let inactive_count = (sys.m() - active.len()).max(1);
    let rank_deficient_points = trace.iter().filter(|p| p.rank_deficient).count() / inactive_count;

    let inactive: Vec<usize> = (0..sys.m()).filter(|j| !active.contains(j)).collect();
    let step = std::f64::consts::PI / (grid_points - 1) as f64;
    for k in -4i32..=4 {
        if k == 0 {
            continue;
        }
        let omega = (best.omega + k as f64 * step / 4.0).clamp(0.0, std::f64::consts::PI);
        for pt in fd_gains_at(sys, active, &inactive, omega)? {
            if pt.gain > value {
                value = pt.gain;
                argmax_omega = pt.omega;
                argmax_source = pt.source;
            }
        }
    }

    let nrank_full = crate::structure::normal_rank_z(sys, active, 7)? == sys.n() + active.len();
    Ok(FdMic { value, argmax_omega, argmax_source, nrank_full, grid_points, rank_deficient_points })
}

/// Regularization weight from the location-consistency analysis:
/// `sqrt(32) C sigma / (1 - alpha) * (sqrt(((N+1) ln 5 + ln(m - m*)) / T) + delta / 2)`.
#[allow(clippy::too_many_arguments)]
pub fn lambda_t(
    c_norm: f64,
    sigma: f64,
    alpha: f64,
    n_horizon: usize,
    m: usize,
    m_star: usize,
    t: usize,
    delta: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0, 1), got {alpha}")));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("T must be positive".into()));
    }
    if m_star > m {
        return Err(Error::InvalidArgument("m* cannot exceed m".into()));
    }
    let inactive_count = (m - m_star).max(1) as f64;
    let log_term = ((n_horizon + 1) as f64 * 5.0_f64.ln() + inactive_count.ln()) / t as f64;
    Ok(32.0_f64.sqrt() * c_norm * sigma / (1.0 - alpha) * (log_term.sqrt() + delta / 2.0))
}

/// Minimum detectable input magnitude: inputs weaker than this (in the
/// sup norm over the delayed window) can be missed by the estimator.
pub fn beta_min(
    batch: &BatchModel,
    d: usize,
    lambda_t: f64,
    sigma: f64,
    c_min: f64,
    delta: f64,
) -> Result<f64> {
    if c_min <= 0.0 {
        return Err(Error::InvalidArgument("c_min must be positive".into()));
    }
    let n_horizon = batch.n_horizon();
    if d > n_horizon {
        return Err(Error::InvalidArgument(format!("delay {d} exceeds horizon {n_horizon}")));
    }
    let t = batch.t() as f64;
    let t_s = (n_horizon - d + 1) * batch.m_star();
    let n = batch.n();

    let gram_pinv = pinv(&(batch.psi().tr_mul(batch.psi()) / t), None)?;
    // Selection [0_{t_S x n}, I_{t_S}, 0_{t_S x d m*}] keeps rows n..n+t_S.
    let selected = gram_pinv.rows(n, t_s).into_owned();
    let noise_term = sigma / c_min.sqrt() * ((2.0 * (t_s as f64).ln() / t).sqrt() + delta);
    Ok(noise_term + lambda_t * induced_inf_norm(&selected))
}

/// Covariance of the stacked effective noise `J_w w + v` under process noise
/// `Q` and measurement noise `R`, together with its spectral norm.
pub fn noise_covariance(sys: &LtiSystem, n_horizon: usize) -> Result<(DMatrix<f64>, f64)> {
    let q = sys
        .q()
        .ok_or_else(|| Error::Precondition("process-noise covariance Q is not set".into()))?;
    let r = sys
        .r()
        .ok_or_else(|| Error::Precondition("measurement-noise covariance R is not set".into()))?;
    let (n, p) = (sys.n(), sys.p());
    let t = p * (n_horizon + 1);

    // J_w is the impulse matrix with the input map replaced by the identity:
    // block (k, l) is C A^{k-l-1} for k > l, zero otherwise.
    let mut j_w = DMatrix::zeros(t, n * (n_horizon + 1));
    let mut powered = DMatrix::identity(n, n);
    for lag in 1..=n_horizon {
        let h = sys.c() * &powered;
        for col_block in 0..=(n_horizon - lag) {
            let row_block = col_block + lag;
            j_w.view_mut((row_block * p, col_block * n), (p, n)).copy_from(&h);
        }
        if lag < n_horizon {
            powered = sys.a() * powered;
        }
    }

    // J_w (I ⊗ Q) J_w^T: scale each block column of J_w by Q first.
    let mut j_w_q = DMatrix::zeros(t, n * (n_horizon + 1));
    for k in 0..=n_horizon {
        let block = j_w.view((0, k * n), (t, n)) * q;
        j_w_q.view_mut((0, k * n), (t, n)).copy_from(&block);
    }
    let mut cov = j_w_q * j_w.transpose();
    for k in 0..=n_horizon {
        let mut diag = cov.view_mut((k * p, k * p), (p, p));
        diag += r;
    }

    let sym = (&cov + cov.transpose()).scale(0.5);
    let sigma_tilde_sq = nalgebra::SymmetricEigen::new(sym).eigenvalues.max();
    Ok((cov, sigma_tilde_sq))
}

/// Inputs of the two closed-form error bounds.
#[derive(Debug, Clone, Copy)]
pub struct ErrorBoundInputs {
    pub sigma: f64,
    pub c_min: f64,
    pub n: usize,
    pub t_s: usize,
    pub t: usize,
    pub m_star: usize,
    pub lambda_t: f64,
    pub delta: f64,
    pub delta1: f64,
}

/// Evaluates the L2-consistency bound of the penalized estimate and the
/// oracle bound of the refitted least-squares estimate.
pub fn error_bounds(inp: &ErrorBoundInputs) -> Result<(f64, f64)> {
    if inp.c_min <= 0.0 {
        return Err(Error::InvalidArgument("c_min must be positive".into()));
    }
    if !(0.0..1.0).contains(&inp.delta1) || inp.delta1 == 0.0 {
        return Err(Error::InvalidArgument("delta1 must lie in (0, 1)".into()));
    }
    if inp.delta < 0.0 {
        return Err(Error::InvalidArgument("delta must be nonnegative".into()));
    }
    let t = inp.t as f64;
    let dim = (inp.n + inp.t_s) as f64;
    let scale = inp.sigma / inp.c_min.sqrt();
    let corollary = 2.0 * scale * ((2.0 * 5.0_f64.ln() * dim / t).sqrt() + inp.delta)
        + inp.lambda_t * (inp.m_star as f64 / (t * inp.c_min)).sqrt();
    let oracle =
        4.0 * scale * (dim / t).sqrt() + 2.0 * scale * ((1.0 / inp.delta1).ln() / t).sqrt();
    Ok((corollary, oracle))
}

/// Configuration of [`incoherence_report`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IncoherenceParams {
    /// Measurement-noise standard deviation entering the bound formulas.
    pub sigma: f64,
    /// Confidence slack of the location-consistency statement.
    pub delta: f64,
    /// Failure probability of the oracle bound.
    pub delta1: f64,
    /// Frequency grid density on the upper half circle.
    pub grid_points: usize,
    /// Split delay; defaults to the input delay of the active set.
    pub d: Option<usize>,
}

impl Default for IncoherenceParams {
    fn default() -> Self {
        Self { sigma: 0.0, delta: 0.05, delta1: 0.05, grid_points: 512, d: None }
    }
}

/// All theorem constants for one system/active-set/horizon configuration.
/// Quantities whose preconditions fail are reported as absent rather than
/// fabricated (for example `lambda_t` when the implied alpha reaches one).
#[derive(Debug, Clone, Serialize)]
pub struct IncoherenceReport {
    pub c_norm: f64,
    pub mic_td_l2: f64,
    pub mic_td_l1: f64,
    pub alpha_implied: f64,
    pub a3_satisfied: bool,
    pub mic_fd: Option<f64>,
    pub fd_nrank_full: Option<bool>,
    pub fd_warning: Option<String>,
    pub d: Option<usize>,
    pub c_min: Option<f64>,
    pub c_min_full_rank: Option<bool>,
    pub lambda_t: Option<f64>,
    pub beta_min: Option<f64>,
    pub corollary_bound: Option<f64>,
    pub oracle_bound: Option<f64>,
    pub sigma_tilde_sq: Option<f64>,
    pub sigma: f64,
    pub delta: f64,
    pub delta1: f64,
    pub grid_points: usize,
    pub t_s: Option<usize>,
    pub stable: bool,
}

/// Measures every constant of the support-recovery guarantees for the given
/// batch model.
pub fn incoherence_report(
    sys: &LtiSystem,
    batch: &BatchModel,
    params: &IncoherenceParams,
) -> Result<IncoherenceReport> {
    let c_norm = group_norm_constant(batch)?;
    let td = mic_time(batch)?;
    let m_star = batch.m_star();
    let alpha_implied = td.implied_alpha(m_star);
    let a3_satisfied = alpha_implied < 1.0;

    let (mic_fd, fd_nrank_full, fd_warning) =
        match mic_freq(sys, batch.active_set(), params.grid_points) {
            Ok(fd) => {
                let warning = (!fd.nrank_full).then(|| {
                    "pencil normal rank below n + m*; frequency-domain bound not certified"
                        .to_string()
                });
                (Some(fd.value), Some(fd.nrank_full), warning)
            }
            Err(Error::Numerical(msg)) => (None, None, Some(msg)),
            Err(e) => return Err(e),
        };

    let d = match params.d {
        Some(d) => Some(d),
        None => input_delay(sys, batch.active_set(), sys.n())?.finite(),
    }
    .filter(|&d| d <= batch.n_horizon());

    let mut c_min = None;
    let mut c_min_full_rank = None;
    let mut lambda = None;
    let mut beta = None;
    let mut corollary = None;
    let mut oracle = None;
    let mut t_s = None;
    if let Some(d) = d {
        let (cm, full) = least_singular(batch, d)?;
        c_min = Some(cm);
        c_min_full_rank = Some(full);
        t_s = Some((batch.n_horizon() - d + 1) * m_star);
        if a3_satisfied {
            let lam = lambda_t(
                c_norm,
                params.sigma,
                alpha_implied,
                batch.n_horizon(),
                batch.m(),
                m_star,
                batch.t(),
                params.delta,
            )?;
            lambda = Some(lam);
            if cm > 0.0 {
                beta = Some(beta_min(batch, d, lam, params.sigma, cm, params.delta)?);
                let (cor, ora) = error_bounds(&ErrorBoundInputs {
                    sigma: params.sigma,
                    c_min: cm,
                    n: batch.n(),
                    t_s: t_s.unwrap(),
                    t: batch.t(),
                    m_star,
                    lambda_t: lam,
                    delta: params.delta,
                    delta1: params.delta1,
                })?;
                corollary = Some(cor);
                oracle = Some(ora);
            }
        }
    }

    let sigma_tilde_sq = if sys.q().is_some() && sys.r().is_some() {
        Some(noise_covariance(sys, batch.n_horizon())?.1)
    } else {
        None
    };

    Ok(IncoherenceReport {
        c_norm,
        mic_td_l2: td.l2,
        mic_td_l1: td.l1,
        alpha_implied,
        a3_satisfied,
        mic_fd,
        fd_nrank_full,
        fd_warning,
        d,
        c_min,
        c_min_full_rank,
        lambda_t: lambda,
        beta_min: beta,
        corollary_bound: corollary,
        oracle_bound: oracle,
        sigma_tilde_sq,
        sigma: params.sigma,
        delta: params.delta,
        delta1: params.delta1,
        grid_points: params.grid_points,
        t_s,
        stable: sys.is_stable(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stable(n: usize, m: usize, p: usize, seed: u64, radius: f64) -> LtiSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        a.scale_mut(radius / rho.max(1e-12));
        let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        LtiSystem::new(a, b, c).unwrap()
    }

    #[test]
    fn group_norm_zero_system() {
        let sys =
            LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), DMatrix::zeros(1, 2))
                .unwrap();
        let batch = BatchModel::build(&sys, &[0], 3).unwrap();
        assert_eq!(group_norm_constant(&batch).unwrap(), 0.0);
    }

    #[test]
    fn group_norm_dominant_observability() {
        // N = 0, C = sqrt(p) I: the observability block alone has spectral
        // norm sqrt(T), so the constant is exactly one.
        let p = 3;
        let sys = LtiSystem::new(
            DMatrix::zeros(p, p),
            DMatrix::from_element(p, 1, 1e-3),
            DMatrix::identity(p, p).scale((p as f64).sqrt()),
        )
        .unwrap();
        let batch = BatchModel::build(&sys, &[0], 0).unwrap();
        assert_relative_eq!(group_norm_constant(&batch).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn group_norm_matches_power_iteration() {
        let sys = random_stable(4, 3, 2, 2, 0.8);
        let batch = BatchModel::build(&sys, &[0, 1], 6).unwrap();
        // Independent largest-singular-value estimate by power iteration on
        // X^T X for each block.
        let power = |x: &DMatrix<f64>| -> f64 {
            let mut v = DVector::from_element(x.ncols(), 1.0).normalize();
            for _ in 0..2000 {
                v = (x.transpose() * (x * &v)).normalize();
            }
            (x * v).norm()
        };
        let mut expected = power(batch.obs());
        for j in 0..batch.m() {
            expected = expected.max(power(batch.impulse(j)));
        }
        expected /= (batch.t() as f64).sqrt();
        assert_relative_eq!(group_norm_constant(&batch).unwrap(), expected, epsilon = 1e-8);
    }

    #[test]
    fn least_singular_identity_design() {
        // Scalar delay line: at d = 1 the high block is exactly I_3, the low
        // block is the zero column, so the Gram matrix is I/T.
        let sys = LtiSystem::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let batch = BatchModel::build(&sys, &[0], 2).unwrap();
        let (c_min, full) = least_singular(&batch, 1).unwrap();
        assert_relative_eq!(c_min, 1.0 / 3.0, epsilon = 1e-12);
        assert!(full);
    }

    #[test]
    fn least_singular_matches_pinv_route() {
        let sys = random_stable(3, 2, 2, 5, 0.7);
        let batch = BatchModel::build(&sys, &[0], 5).unwrap();
        let (c_min, _) = least_singular(&batch, 1).unwrap();
        // Independent route: 1 / ||G^+||_2 through the pseudoinverse.
        let (high, low) = crate::structure::split_psi(&batch, 1).unwrap();
        let m_proj = &high - &low * (pinv(&low, None).unwrap() * &high);
        let gram = high.tr_mul(&m_proj) / batch.t() as f64;
        let oracle = 1.0 / spectral_norm(&pinv(&gram, None).unwrap()).unwrap();
        assert_relative_eq!(c_min, oracle, epsilon = 1e-8 * oracle.max(1.0));
    }

    #[test]
    fn mic_time_orthogonal_channels() {
        // A = 0 with identity sensing and orthogonal input columns: the
        // inactive impulse matrix is orthogonal to the whole active design.
        let n = 3;
        let sys =
            LtiSystem::new(DMatrix::zeros(n, n), DMatrix::identity(n, 2), DMatrix::identity(n, n))
                .unwrap();
        let batch = BatchModel::build(&sys, &[0], 4).unwrap();
        let td = mic_time(&batch).unwrap();
        assert_relative_eq!(td.l2, 0.0, epsilon = 1e-12);
        assert_relative_eq!(td.l1, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mic_time_duplicate_source_violates_a3() {
        // The inactive channel duplicates the active one; with the initial
        // state excluded the correlation is a projection of norm one.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.4..0.4));
        let b1 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let mut b = DMatrix::zeros(2, 2);
        b.set_column(0, &b1);
        b.set_column(1, &b1);
        let c = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let sys = LtiSystem::new(a, b, c).unwrap();
        let batch = BatchModel::build(&sys, &[0], 5).unwrap();
        let td = mic_time_inputs_only(&batch).unwrap();
        assert_relative_eq!(td.l2, 1.0, epsilon = 1e-10);
        assert!(td.implied_alpha(1) >= 1.0);
    }

    #[test]
    fn mic_norm_equivalence_band() {
        let sys = random_stable(4, 4, 3, 13, 0.75);
        let batch = BatchModel::build(&sys, &[0, 2], 6).unwrap();
        let td = mic_time(&batch).unwrap();
        let rows = batch.group_dim() as f64;
        let cols = (batch.n() + batch.m_star() * batch.group_dim()) as f64;
        assert!(td.l1 <= rows.sqrt() * td.l2 + 1e-12);
        assert!(td.l2 <= cols.sqrt() * td.l1 + 1e-12);
    }

    #[test]
    fn transfer_matrix_static_cases() {
        let sys =
            LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2))
                .unwrap();
        let g = transfer_matrix(&sys, &[0, 1], Complex::new(2.0, 0.0)).unwrap();
        assert_relative_eq!(g[(0, 0)].re, 0.5, epsilon = 1e-14);
        assert_relative_eq!(g[(1, 1)].re, 0.5, epsilon = 1e-14);
        assert_relative_eq!(g[(0, 1)].norm(), 0.0, epsilon = 1e-14);

        let scalar = LtiSystem::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let g = transfer_matrix(&scalar, &[0], Complex::new(1.0, 0.0)).unwrap();
        assert_relative_eq!(g[(0, 0)].re, 2.0, epsilon = 1e-14);

        let err = transfer_matrix(&scalar, &[0], Complex::new(0.5, 0.0));
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn transfer_matrix_conjugate_symmetry() {
        let sys = random_stable(3, 2, 2, 31, 0.6);
        let z = Complex::new(0.3, 1.1);
        let g = transfer_matrix(&sys, &[0, 1], z).unwrap();
        let g_conj = transfer_matrix(&sys, &[0, 1], z.conj()).unwrap();
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                assert_relative_eq!(g[(i, j)].conj().re, g_conj[(i, j)].re, epsilon = 1e-12);
                assert_relative_eq!(g[(i, j)].conj().im, g_conj[(i, j)].im, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mic_freq_scaled_copy_gives_alpha() {
        // Inactive channel transfer = 0.4 * active channel transfer at every
        // frequency, so the scan returns exactly 0.4.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_partial_diagonal(3, 3, &[0.3, -0.5, 0.6]);
        let b1 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let mut b = DMatrix::zeros(3, 2);
        b.set_column(0, &b1);
        b.set_column(1, &b1.scale(0.4));
        let c = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let sys = LtiSystem::new(a, b, c).unwrap();
        let fd = mic_freq(&sys, &[0], 64).unwrap();
        assert_relative_eq!(fd.value, 0.4, epsilon = 1e-9);
    }

    #[test]
    fn mic_freq_decoupled_blocks_is_zero() {
        // Block-diagonal dynamics and sensing: the inactive transfer lies in
        // the left nullspace of the active one at every frequency.
        let a = DMatrix::from_partial_diagonal(2, 2, &[0.4, -0.3]);
        let b = DMatrix::identity(2, 2);
        let c = DMatrix::identity(2, 2);
        let sys = LtiSystem::new(a, b, c).unwrap();
        let fd = mic_freq(&sys, &[0], 32).unwrap();
        assert_relative_eq!(fd.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mic_freq_rejects_unit_circle_eigenvalue() {
        let sys = LtiSystem::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!(matches!(mic_freq(&sys, &[0], 16), Err(Error::Numerical(_))));
    }

    #[test]
    fn lambda_t_frozen_spot_value() {
        // sqrt(32 ln 5), checked against an independent high-precision
        // evaluation.
        let v = lambda_t(1.0, 1.0, 0.0, 0, 2, 1, 1, 0.0).unwrap();
        assert_relative_eq!(v, 7.176490311976406, epsilon = 1e-12);
    }

    #[test]
    fn lambda_t_scalings() {
        assert_eq!(lambda_t(1.0, 0.0, 0.3, 4, 6, 2, 40, 0.1).unwrap(), 0.0);
        let base = lambda_t(1.2, 0.5, 0.3, 4, 6, 2, 40, 0.1).unwrap();
        let doubled = lambda_t(1.2, 1.0, 0.3, 4, 6, 2, 40, 0.1).unwrap();
        assert_relative_eq!(doubled, 2.0 * base, epsilon = 1e-12);
        assert!(lambda_t(1.0, 1.0, 1.0, 4, 6, 2, 40, 0.1).is_err());
        // Monotone in alpha, C and decreasing in T.
        let more_alpha = lambda_t(1.2, 0.5, 0.6, 4, 6, 2, 40, 0.1).unwrap();
        assert!(more_alpha > base);
        let more_c = lambda_t(2.4, 0.5, 0.3, 4, 6, 2, 40, 0.1).unwrap();
        assert!(more_c > base);
        let more_t = lambda_t(1.2, 0.5, 0.3, 4, 6, 2, 160, 0.1).unwrap();
        assert!(more_t < base);
    }

    #[test]
    fn beta_min_degenerate_cases() {
        let sys = random_stable(2, 2, 2, 40, 0.7);
        let batch = BatchModel::build(&sys, &[0], 0).unwrap();
        // t_S = 1 and lambda = delta = 0: log(1) = 0 kills the noise term.
        let b = beta_min(&batch, 0, 0.0, 1.0, 0.5, 0.0).unwrap();
        assert_eq!(b, 0.0);

        let batch = BatchModel::build(&sys, &[0], 4).unwrap();
        let only_noise = beta_min(&batch, 1, 0.0, 2.0, 0.25, 0.1).unwrap();
        let t = batch.t() as f64;
        let t_s = 4.0_f64;
        let expected = 2.0 / 0.25_f64.sqrt() * ((2.0 * t_s.ln() / t).sqrt() + 0.1);
        assert_relative_eq!(only_noise, expected, epsilon = 1e-12);
    }

    #[test]
    fn beta_min_full_assembly_matches_oracle() {
        let sys = random_stable(3, 2, 2, 41, 0.7);
        let batch = BatchModel::build(&sys, &[0], 5).unwrap();
        let (c_min, _) = least_singular(&batch, 1).unwrap();
        let lam = 0.37;
        let got = beta_min(&batch, 1, lam, 0.8, c_min, 0.05).unwrap();
        // Independent assembly: explicit selection matrix times the Gram
        // pseudoinverse, max-row-sum norm by hand.
        let t = batch.t() as f64;
        let t_s = 5;
        let gram_pinv = pinv(&(batch.psi().tr_mul(batch.psi()) / t), None).unwrap();
        let mut pi = DMatrix::<f64>::zeros(t_s, gram_pinv.nrows());
        for i in 0..t_s {
            pi[(i, batch.n() + i)] = 1.0;
        }
        let prod = pi * gram_pinv;
        let inf_norm = (0..prod.nrows())
            .map(|i| prod.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let expected =
            0.8 / c_min.sqrt() * ((2.0 * (t_s as f64).ln() / t).sqrt() + 0.05) + lam * inf_norm;
        assert_relative_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn noise_covariance_pure_measurement() {
        let sigma_sq = 0.04;
        let sys = random_stable(3, 2, 2, 50, 0.7)
            .with_process_noise(DMatrix::zeros(3, 3))
            .unwrap()
            .with_measurement_noise(DMatrix::identity(2, 2).scale(sigma_sq))
            .unwrap();
        let (cov, s2) = noise_covariance(&sys, 3).unwrap();
        assert_relative_eq!(cov, DMatrix::identity(8, 8).scale(sigma_sq), epsilon = 1e-14);
        assert_relative_eq!(s2, sigma_sq, epsilon = 1e-12);
    }

    #[test]
    fn noise_covariance_is_psd_and_dominates_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let root = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let q = &root * root.transpose();
        let r = DMatrix::identity(2, 2).scale(0.3);
        let sys = random_stable(3, 2, 2, 52, 0.7)
            .with_process_noise(q)
            .unwrap()
            .with_measurement_noise(r)
            .unwrap();
        let (cov, s2) = noise_covariance(&sys, 4).unwrap();
        let eig = nalgebra::SymmetricEigen::new((&cov + cov.transpose()).scale(0.5));
        assert!(eig.eigenvalues.min() >= -1e-10 * s2);
        assert!(s2 >= 0.3 - 1e-12);
    }

    #[test]
    fn error_bounds_values() {
        let zero = error_bounds(&ErrorBoundInputs {
            sigma: 0.0,
            c_min: 1.0,
            n: 2,
            t_s: 3,
            t: 10,
            m_star: 2,
            lambda_t: 0.0,
            delta: 0.0,
            delta1: 0.5,
        })
        .unwrap();
        assert_eq!(zero, (0.0, 0.0));

        // Frozen against an independent high-precision evaluation.
        let (cor, ora) = error_bounds(&ErrorBoundInputs {
            sigma: 1.0,
            c_min: 0.25,
            n: 2,
            t_s: 3,
            t: 10,
            m_star: 2,
            lambda_t: 0.3,
            delta: 0.1,
            delta1: 0.05,
        })
        .unwrap();
        assert_relative_eq!(cor, 5.742873122018053, epsilon = 1e-12);
        assert_relative_eq!(ora, 7.846185571537170, epsilon = 1e-12);

        // Bounds shrink as T grows.
        let (cor4, ora4) = error_bounds(&ErrorBoundInputs {
            sigma: 1.0,
            c_min: 0.25,
            n: 2,
            t_s: 3,
            t: 40,
            m_star: 2,
            lambda_t: 0.3,
            delta: 0.1,
            delta1: 0.05,
        })
        .unwrap();
        assert!(cor4 < cor && ora4 < ora);
    }

    #[test]
    fn report_on_well_posed_system() {
        let sys = random_stable(4, 3, 3, 60, 0.7);
        let batch = BatchModel::build(&sys, &[0], 8).unwrap();
        let report = incoherence_report(
            &sys,
            &batch,
            &IncoherenceParams { sigma: 0.1, ..Default::default() },
        )
        .unwrap();
        assert!(report.c_norm > 0.0);
        assert!(report.mic_fd.is_some());
        assert_eq!(report.d, Some(1));
        assert!(report.c_min.unwrap() > 0.0);
        if report.a3_satisfied {
            assert!(report.lambda_t.unwrap() > 0.0);
            assert!(report.beta_min.unwrap() > 0.0);
            assert!(report.corollary_bound.unwrap() > 0.0);
        }
        assert!(report.sigma_tilde_sq.is_none());
    }
}
