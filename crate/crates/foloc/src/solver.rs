//! Group-LASSO estimation of the initial state and sparse inputs.
//!
//! The joint problem
//! `min (1/2T) ||y - O x0 - J u||^2 + lambda * sum_j ||u_j||_2`
//! decouples: with `Pi = I - O O^+` the input solves
//! `min (1/2T) ||Pi (y - J u)||^2 + lambda * sum_j ||u_j||_2`
//! and the state follows as `x0 = O^+ (y - J u)`. The input subproblem is
//! solved by ADMM with a cached symmetric-PD factorization for the
//! quadratic step and per-group soft thresholding for the proximal step.
//! Support is read off the thresholded iterate, which carries exact zeros.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::batch::BatchModel;
use crate::error::{Error, Result};
use crate::linalg::{pinv, pinv_with_rank};
use crate::structure::{input_delay, verify_prop1};
use crate::system::LtiSystem;

/// Solver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupLassoConfig {
    /// Regularization weight; zero switches to a direct least-squares solve.
    pub lambda: f64,
    /// ADMM penalty parameter.
    pub rho: f64,
    pub max_iter: usize,
    pub tol_abs: f64,
    pub tol_rel: f64,
    /// Secondary guard for support extraction: groups below this fraction of
    /// the largest group norm are treated as inactive.
    pub support_rel_threshold: f64,
    /// Residual-balancing adaptation of rho (factor 2, trigger ratio 10).
    pub adaptive_rho: bool,
}

impl Default for GroupLassoConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            rho: 1.0,
            max_iter: 10_000,
            tol_abs: 1e-7,
            tol_rel: 1e-5,
            support_rel_threshold: 1e-3,
            adaptive_rho: true,
        }
    }
}

impl GroupLassoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument("lambda must be finite and nonnegative".into()));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::InvalidArgument("rho must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be positive".into()));
        }
        for (name, v) in [
            ("tol_abs", self.tol_abs),
            ("tol_rel", self.tol_rel),
            ("support_rel_threshold", self.support_rel_threshold),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Solver output. `objective` is recomputed from the reported fields, so it
/// always matches `(1/2T)||y - O x0 - J u||^2 + lambda sum ||u_j||`.
#[derive(Debug, Clone, Serialize)]
pub struct EstimationResult {
    pub x0_hat: DVector<f64>,
    pub u_hat: Vec<DVector<f64>>,
    pub support: Vec<usize>,
    pub group_norms: Vec<f64>,
    pub iterations: usize,
    pub primal_res: f64,
    pub dual_res: f64,
    pub objective: f64,
    pub kkt_violation: f64,
    pub converged: bool,
    /// The observability matrix was column-rank deficient and the state was
    /// returned as the minimum-norm solution.
    pub x0_min_norm: bool,
    pub rho_final: f64,
    /// Largest observed objective increase between consecutive iterations
    /// after burn-in (ADMM is not a descent method; large values flag
    /// trouble).
    pub max_objective_increase: f64,
    /// The lambda = 0 direct least-squares path was taken.
    pub least_squares_path: bool,
}

/// Projector onto the orthogonal complement of the column space of `O`.
pub fn annihilator(obs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let obs_pinv = pinv(obs, None)?;
    Ok(DMatrix::identity(obs.nrows(), obs.nrows()) - obs * obs_pinv)
}

/// Proximal operator of `t * ||.||_2`: scales `v` toward zero and returns
/// exact zero once `||v|| <= t`.
pub fn block_soft_threshold(v: &DVector<f64>, t: f64) -> DVector<f64> {
    let norm = v.norm();
    if norm <= t || norm == 0.0 {
        DVector::zeros(v.len())
    } else {
        v.scale(1.0 - t / norm)
    }
}

/// Warm-start state carried between solves of the same problem at different
/// regularization weights.
#[derive(Debug, Clone)]
pub struct WarmStart {
    z: DVector<f64>,
    w: DVector<f64>,
    rho: f64,
}

/// Precomputed quadratic data for one `(batch, y)` pair. Building this once
/// and solving across a whole lambda grid amortizes the Gram matrix and its
/// factorizations.
pub struct GroupLassoProblem {
    t: usize,
    n: usize,
    m: usize,
    group_dim: usize,
    y: DVector<f64>,
    obs: DMatrix<f64>,
    obs_pinv: DMatrix<f64>,
    obs_full_rank: bool,
    j: DMatrix<f64>,
    pj: DMatrix<f64>,
    pi_y: DVector<f64>,
    qvec: DVector<f64>,
    gram: DMatrix<f64>,
    factors: HashMap<u64, Cholesky<f64, Dyn>>,
}

impl GroupLassoProblem {
    pub fn new(batch: &BatchModel, y: &DVector<f64>) -> Result<Self> {
        if y.len() != batch.t() {
            return Err(Error::Dimension(format!(
                "measurement length {} does not match T = {}",
                y.len(),
                batch.t()
            )));
        }
        let t = batch.t();
        let obs = batch.obs().clone();
        let (obs_pinv, obs_rank) = pinv_with_rank(&obs, None)?;
        let j = batch.j_concat();
        // Pi J = J - O (O^+ J) without materializing the T x T projector.
        let pj = &j - &obs * (&obs_pinv * &j);
        let pi_y = y - &obs * (&obs_pinv * y);
        let qvec = pj.tr_mul(y) / t as f64;
        let gram = pj.tr_mul(&pj) / t as f64;
        Ok(Self {
            t,
            n: batch.n(),
            m: batch.m(),
            group_dim: batch.group_dim(),
            y: y.clone(),
            obs,
            obs_full_rank: obs_rank == batch.n(),
            obs_pinv,
            j,
            pj,
            pi_y,
            qvec,
            gram,
            factors: HashMap::new(),
        })
    }

    /// Smallest weight at which the all-zero input vector is optimal:
    /// `max_j ||J_j^T Pi y|| / T`.
    pub fn lambda_max(&self) -> f64 {
        let g = self.group_dim;
        let corr = self.pj.tr_mul(&self.pi_y) / self.t as f64;
        (0..self.m).map(|j| corr.rows(j * g, g).norm()).fold(0.0, f64::max)
    }

    fn factor(&mut self, rho: f64) -> Result<&Cholesky<f64, Dyn>> {
        let key = rho.to_bits();
        if !self.factors.contains_key(&key) {
            if self.factors.len() >= 6 {
                self.factors.clear();
            }
            let mut k = self.gram.clone();
            for i in 0..k.nrows() {
                k[(i, i)] += rho;
            }
            let chol = Cholesky::new(k).ok_or_else(|| {
                Error::Numerical("ADMM quadratic step factorization failed".into())
            })?;
            self.factors.insert(key, chol);
        }
        Ok(&self.factors[&key])
    }

    fn group_norms(&self, v: &DVector<f64>) -> Vec<f64> {
        let g = self.group_dim;
        (0..self.m).map(|j| v.rows(j * g, g).norm()).collect()
    }

    fn objective_of(&self, z: &DVector<f64>, lambda: f64) -> f64 {
        let fit = (&self.pi_y - &self.pj * z).norm_squared() / (2.0 * self.t as f64);
        fit + lambda * self.group_norms(z).iter().sum::<f64>()
    }

    fn finish(
        &self,
        z: DVector<f64>,
        cfg: &GroupLassoConfig,
        iterations: usize,
        primal_res: f64,
        dual_res: f64,
        converged: bool,
        rho_final: f64,
        max_objective_increase: f64,
        least_squares_path: bool,
        x0_min_norm_hint: Option<DVector<f64>>,
    ) -> EstimationResult {
        let g = self.group_dim;
        let group_norms = self.group_norms(&z);
        let max_norm = group_norms.iter().cloned().fold(0.0, f64::max);
        let support: Vec<usize> = (0..self.m)
            .filter(|&j| group_norms[j] > 0.0 && group_norms[j] > cfg.support_rel_threshold * max_norm)
            .collect();
        let x0_hat = match x0_min_norm_hint {
            Some(x0) => x0,
            None => &self.obs_pinv * (&self.y - &self.j * &z),
        };
        let u_hat: Vec<DVector<f64>> = (0..self.m).map(|j| z.rows(j * g, g).into_owned()).collect();

        let residual = &self.y - &self.obs * &x0_hat - &self.j * &z;
        let objective = residual.norm_squared() / (2.0 * self.t as f64)
            + cfg.lambda * group_norms.iter().sum::<f64>();
        let kkt_violation = kkt_residual_parts(
            &self.obs,
            &self.j,
            self.group_dim,
            self.m,
            &residual,
            &u_hat,
            cfg.lambda,
            self.t,
        );

        EstimationResult {
            x0_hat,
            u_hat,
            support,
            group_norms,
            iterations,
            primal_res,
            dual_res,
            objective,
            kkt_violation,
            converged,
            x0_min_norm: !self.obs_full_rank,
            rho_final,
            max_objective_increase,
            least_squares_path,
        }
    }

    /// Solves at the configured lambda, optionally starting from the state
    /// of a previous solve, and returns the warm-start state for the next
    /// grid point.
    pub fn solve_warm(
        &mut self,
        cfg: &GroupLassoConfig,
        warm: Option<&WarmStart>,
    ) -> Result<(EstimationResult, WarmStart)> {
        cfg.validate()?;
        let mg = self.m * self.group_dim;

        if cfg.lambda == 0.0 {
            // Unregularized limit: one minimum-norm least-squares solve of
            // the joint system.
            let mut design = DMatrix::zeros(self.t, self.n + mg);
            design.view_mut((0, 0), (self.t, self.n)).copy_from(&self.obs);
            design.view_mut((0, self.n), (self.t, mg)).copy_from(&self.j);
            let beta = pinv(&design, None)? * &self.y;
            let x0 = beta.rows(0, self.n).into_owned();
            let z = beta.rows(self.n, mg).into_owned();
            let warm_out = WarmStart { z: z.clone(), w: DVector::zeros(mg), rho: cfg.rho };
            let res = self.finish(z, cfg, 0, 0.0, 0.0, true, cfg.rho, 0.0, true, Some(x0));
            return Ok((res, warm_out));
        }

        let mut rho = warm.map(|w| w.rho).unwrap_or(cfg.rho);
        let mut z = warm.map(|w| w.z.clone()).unwrap_or_else(|| DVector::zeros(mg));
        let mut w = warm.map(|w| w.w.clone()).unwrap_or_else(|| DVector::zeros(mg));

        let g = self.group_dim;
        let sqrt_dim = (mg as f64).sqrt();
        let mut primal_res = f64::INFINITY;
        let mut dual_res = f64::INFINITY;
        let mut converged = false;
        let mut iterations = 0;
        let mut adaptations = 0;
        let mut prev_objective = f64::INFINITY;
        let mut max_objective_increase = 0.0_f64;

        for it in 1..=cfg.max_iter {
            iterations = it;
            let rhs = &self.qvec + (&z - &w).scale(rho);
            let u = self.factor(rho)?.solve(&rhs);

            let z_prev = z.clone();
            let tau = cfg.lambda / rho;
            for j in 0..self.m {
                let seg = u.rows(j * g, g) + w.rows(j * g, g);
                z.rows_mut(j * g, g)
                    .copy_from(&block_soft_threshold(&seg.into_owned(), tau));
            }
            w += &u - &z;

            primal_res = (&u - &z).norm();
            dual_res = rho * (&z - &z_prev).norm();
            let eps_pri = sqrt_dim * cfg.tol_abs + cfg.tol_rel * u.norm().max(z.norm());
            let eps_dual = sqrt_dim * cfg.tol_abs + cfg.tol_rel * rho * w.norm();

            let objective = self.objective_of(&z, cfg.lambda);
            if it > 10 && objective > prev_objective {
                max_objective_increase = max_objective_increase.max(objective - prev_objective);
            }
            prev_objective = objective;

            if primal_res <= eps_pri && dual_res <= eps_dual {
                converged = true;
                break;
            }

            if cfg.adaptive_rho && adaptations < 40 {
                if primal_res > 10.0 * dual_res {
                    rho *= 2.0;
                    w.scale_mut(0.5);
                    adaptations += 1;
                } else if dual_res > 10.0 * primal_res {
                    rho *= 0.5;
                    w.scale_mut(2.0);
                    adaptations += 1;
                }
            }
        }

        let warm_out = WarmStart { z: z.clone(), w, rho };
        let res = self.finish(
            z,
            cfg,
            iterations,
            primal_res,
            dual_res,
            converged,
            rho,
            max_objective_increase,
            false,
            None,
        );
        Ok((res, warm_out))
    }

    pub fn solve(&mut self, cfg: &GroupLassoConfig) -> Result<EstimationResult> {
        self.solve_warm(cfg, None).map(|(res, _)| res)
    }
}

/// One-shot group-LASSO solve for a batch model and measurement vector.
pub fn solve_group_lasso(
    batch: &BatchModel,
    y: &DVector<f64>,
    cfg: &GroupLassoConfig,
) -> Result<EstimationResult> {
    GroupLassoProblem::new(batch, y)?.solve(cfg)
}

/// Smallest regularization weight at which the zero input is optimal.
pub fn lambda_max(batch: &BatchModel, y: &DVector<f64>) -> Result<f64> {
    Ok(GroupLassoProblem::new(batch, y)?.lambda_max())
}

#[allow(clippy::too_many_arguments)]
fn kkt_residual_parts(
    obs: &DMatrix<f64>,
    j: &DMatrix<f64>,
    group_dim: usize,
    m: usize,
    residual: &DVector<f64>,
    u_hat: &[DVector<f64>],
    lambda: f64,
    t: usize,
) -> f64 {
    let t = t as f64;
    let mut worst = (obs.tr_mul(residual) / t).norm();
    let corr = j.tr_mul(residual) / t;
    for idx in 0..m {
        let grad = corr.rows(idx * group_dim, group_dim).into_owned();
        let norm = u_hat[idx].norm();
        let violation = if norm > 0.0 {
            (grad - u_hat[idx].scale(lambda / norm)).norm()
        } else {
            (grad.norm() - lambda).max(0.0)
        };
        worst = worst.max(violation);
    }
    worst
}

/// First-order optimality residual of a candidate `(x0, u)` pair: the
/// largest violation among the state stationarity condition and the
/// per-group subgradient conditions.
pub fn kkt_residual(
    batch: &BatchModel,
    y: &DVector<f64>,
    x0_hat: &DVector<f64>,
    u_hat: &[DVector<f64>],
    lambda: f64,
) -> Result<f64> {
    if u_hat.len() != batch.m() {
        return Err(Error::Dimension(format!(
            "expected {} input groups, got {}",
            batch.m(),
            u_hat.len()
        )));
    }
    let mut residual = y - batch.obs() * x0_hat;
    for (idx, u) in u_hat.iter().enumerate() {
        if u.len() != batch.group_dim() {
            return Err(Error::Dimension(format!("group {idx} has wrong length")));
        }
        residual -= batch.impulse(idx) * u;
    }
    let j = batch.j_concat();
    Ok(kkt_residual_parts(
        batch.obs(),
        &j,
        batch.group_dim(),
        batch.m(),
        &residual,
        u_hat,
        lambda,
        batch.t(),
    ))
}

/// Output of the restricted least-squares refit.
#[derive(Debug, Clone, Serialize)]
pub struct RefitResult {
    pub x0: DVector<f64>,
    /// One delayed series per recovered source (`N - d + 1` samples each),
    /// in `support` order.
    pub u_delayed_groups: Vec<DVector<f64>>,
    pub support: Vec<usize>,
    pub d: usize,
    pub t_s: usize,
    /// Whether the delayed-recovery certificates held at `d`; the projection
    /// is still returned when they fail, but exactness is not guaranteed.
    pub prop1_ok: bool,
}

/// Ordinary least-squares refit on an estimated support: the delayed
/// selection of `Psi^+ y`, removing the shrinkage bias of the penalized
/// estimate. An empty support reduces to the pure initial-state fit.
pub fn ols_refit(
    sys: &LtiSystem,
    s_hat: &[usize],
    y: &DVector<f64>,
    n_horizon: usize,
    d: Option<usize>,
) -> Result<RefitResult> {
    if s_hat.is_empty() {
        let obs = sys.observability(n_horizon);
        if y.len() != obs.nrows() {
            return Err(Error::Dimension("measurement length mismatch".into()));
        }
        let x0 = pinv(&obs, None)? * y;
        return Ok(RefitResult {
            x0,
            u_delayed_groups: Vec::new(),
            support: Vec::new(),
            d: 0,
            t_s: 0,
            prop1_ok: true,
        });
    }
    let batch = BatchModel::build(sys, s_hat, n_horizon)?;
    if y.len() != batch.t() {
        return Err(Error::Dimension("measurement length mismatch".into()));
    }
    let d = match d {
        Some(d) => d,
        None => input_delay(sys, s_hat, sys.n())?.finite().ok_or_else(|| {
            Error::Precondition("no finite input delay for the estimated support".into())
        })?,
    };
    if d > n_horizon {
        return Err(Error::InvalidArgument(format!("delay {d} exceeds horizon {n_horizon}")));
    }
    let prop1_ok = verify_prop1(&batch, d)?.passed();
    let m_star = s_hat.len();
    let t_s = (n_horizon - d + 1) * m_star;
    let beta = pinv(batch.psi(), None)? * y;
    let x0 = beta.rows(0, batch.n()).into_owned();
    let u_delayed = beta.rows(batch.n(), t_s).into_owned();
    let steps = t_s / m_star;
    let u_delayed_groups = (0..m_star)
        .map(|g| DVector::from_iterator(steps, (0..steps).map(|k| u_delayed[k * m_star + g])))
        .collect();
    Ok(RefitResult { x0, u_delayed_groups, support: s_hat.to_vec(), d, t_s, prop1_ok })
}

/// Result of the exhaustive subset-selection search.
#[derive(Debug, Clone)]
pub struct SubsetSelection {
    pub support: Vec<usize>,
    pub x0: DVector<f64>,
    pub u_groups: Vec<DVector<f64>>,
    pub residual_norm: f64,
    pub subsets_evaluated: usize,
}

fn subsets_up_to(m: usize, k_max: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![Vec::new()];
    let mut current: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 1..=k_max {
        let mut next = Vec::new();
        for base in &current {
            let start = base.last().map(|&x| x + 1).unwrap_or(0);
            for j in start..m {
                let mut s = base.clone();
                s.push(j);
                next.push(s);
            }
        }
        out.extend(next.iter().cloned());
        current = next;
    }
    out
}

/// Exhaustive subset selection: evaluates the least-squares fit of every
/// support of size at most `k_max` and returns the one that reaches the
/// smallest residual with the fewest groups, treating residuals within
/// `fit_tol * max(||y||, 1)` of the minimum as ties (default `1e-6`).
///
/// This is the combinatorial reference the penalized estimator relaxes;
/// it is guarded to small instances.
pub fn brute_force_subset(
    batch: &BatchModel,
    y: &DVector<f64>,
    k_max: usize,
    fit_tol: Option<f64>,
) -> Result<SubsetSelection> {
    if batch.m() > 12 || k_max > 5 {
        return Err(Error::InvalidArgument(
            "exhaustive search is guarded to m <= 12 and k_max <= 5".into(),
        ));
    }
    if y.len() != batch.t() {
        return Err(Error::Dimension("measurement length mismatch".into()));
    }
    let fit_tol = fit_tol.unwrap_or(1e-6);
    let (t, n, g) = (batch.t(), batch.n(), batch.group_dim());

    struct Candidate {
        support: Vec<usize>,
        beta: DVector<f64>,
        residual: f64,
    }
    let mut candidates = Vec::new();
    for support in subsets_up_to(batch.m(), k_max.min(batch.m())) {
        let mut design = DMatrix::zeros(t, n + support.len() * g);
        design.view_mut((0, 0), (t, n)).copy_from(batch.obs());
        for (slot, &j) in support.iter().enumerate() {
            design.view_mut((0, n + slot * g), (t, g)).copy_from(batch.impulse(j));
        }
        let beta = pinv(&design, None)? * y;
        let residual = (y - design * &beta).norm();
        candidates.push(Candidate { support, beta, residual });
    }

    let best_residual = candidates.iter().map(|c| c.residual).fold(f64::INFINITY, f64::min);
    let band = best_residual + fit_tol * y.norm().max(1.0);
    let winner = candidates
        .iter()
        .filter(|c| c.residual <= band)
        .min_by(|a, b| {
            (a.support.len(), &a.support)
                .cmp(&(b.support.len(), &b.support))
        })
        .expect("at least the empty support is evaluated");

    let x0 = winner.beta.rows(0, n).into_owned();
    let u_groups = (0..winner.support.len())
        .map(|slot| winner.beta.rows(n + slot * g, g).into_owned())
        .collect();
    Ok(SubsetSelection {
        support: winner.support.clone(),
        x0,
        u_groups,
        residual_norm: winner.residual,
        subsets_evaluated: candidates.len(),
    })
}
