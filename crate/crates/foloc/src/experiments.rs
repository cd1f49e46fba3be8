//! Seeded Monte-Carlo evaluation harness: random system generation, input
//! synthesis, localization metrics, per-trial estimation records, and
//! lambda sweeps with warm-started solves.
//!
//! Every trial is a pure function of `(seed, trial_index)`; trials run in
//! parallel and aggregation is performed over the index-ordered records, so
//! execution order never changes results.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::BatchModel;
use crate::error::{Error, Result};
use crate::incoherence::{group_norm_constant, lambda_t, mic_time, mic_time_inputs_only};
use crate::solver::{ols_refit, GroupLassoConfig, GroupLassoProblem, WarmStart};
use crate::structure::input_delay;
use crate::system::{LtiSystem, Noise};

/// Sensor matrix style of randomly generated systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    /// iid standard Gaussian entries.
    Gaussian,
    /// Each sensor reads one of the first `p` states directly.
    FirstStates,
}

/// Where the trial system comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemSource {
    RandomGaussian { sensor: SensorKind },
    FromFile { path: std::path::PathBuf },
}

/// Shape of the injected inputs on active channels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Samples drawn uniformly from `[lo, hi]`.
    UniformBox { lo: f64, hi: f64 },
    /// `amplitude * sin(2 pi f dt k) + jitter`, with `f ~ f_max * U(0,1)`
    /// per source and Gaussian jitter of the given standard deviation.
    Sinusoid { amplitude: f64, f_max: f64, jitter_sigma: f64, dt: f64 },
}

/// Initial-state distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Kind {
    Zero,
    StandardGaussian,
}

/// Which design the incoherence entering the theorem weight is measured
/// on: the full `[O, J_S]` block or the inputs-only `J_S` block (the
/// zero-initial-state configuration).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSource {
    #[default]
    FullDesign,
    InputsOnly,
}

/// Regularization grid of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaGrid {
    /// Fixed weights, evaluated as given.
    Explicit(Vec<f64>),
    /// `points` log-spaced weights in `[0.01, 1] * lambda_max`, computed
    /// per trial from its own data.
    Auto { points: usize },
    /// A single weight per trial from the location-consistency formula with
    /// the measured group-norm constant and incoherence.
    Theorem {
        delta: f64,
        #[serde(default)]
        alpha_from: AlphaSource,
    },
}

/// Full description of a Monte-Carlo campaign.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialSpec {
    pub n: usize,
    pub m: usize,
    pub m_star: usize,
    pub p: usize,
    pub n_horizon: usize,
    pub sigma: f64,
    pub system_source: SystemSource,
    pub input_kind: InputKind,
    pub x0_kind: X0Kind,
    pub seed: u64,
    pub trials: usize,
    pub lambda_grid: LambdaGrid,
    /// Fixed active set; drawn uniformly per trial when absent.
    #[serde(default)]
    pub active_set: Option<Vec<usize>>,
    #[serde(default)]
    pub solver: GroupLassoConfig,
    /// Also compute the restricted least-squares refit per solve.
    #[serde(default = "default_true")]
    pub refit: bool,
}

fn default_true() -> bool {
    true
}

impl TrialSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m_star == 0 || self.m_star > self.m {
            return Err(Error::InvalidArgument("need 1 <= m* <= m".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("need at least one trial".into()));
        }
        if let SystemSource::RandomGaussian { sensor } = &self.system_source {
            if self.m > self.n {
                return Err(Error::InvalidArgument(
                    "random systems place inputs on distinct states; need m <= n".into(),
                ));
            }
            if *sensor == SensorKind::FirstStates && self.p > self.n {
                return Err(Error::InvalidArgument("first-states sensing needs p <= n".into()));
            }
        }
        if let Some(s) = &self.active_set {
            if s.len() != self.m_star || s.iter().any(|&j| j >= self.m) {
                return Err(Error::InvalidArgument(
                    "active set must list m* distinct in-range channels".into(),
                ));
            }
        }
        match &self.lambda_grid {
            LambdaGrid::Explicit(v) if v.is_empty() => {
                Err(Error::InvalidArgument("lambda grid is empty".into()))
            }
            LambdaGrid::Explicit(v) if v.iter().any(|x| !x.is_finite() || *x < 0.0) => {
                Err(Error::InvalidArgument(
                    "lambda grid values must be finite and nonnegative".into(),
                ))
            }
            LambdaGrid::Auto { points } if *points == 0 => {
                Err(Error::InvalidArgument("lambda grid needs at least one point".into()))
            }
            _ => Ok(()),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-trial, per-purpose substream seed. Parallel execution
/// order can never change what any trial draws.
pub(crate) fn substream_seed(seed: u64, trial: usize, stream: u64) -> u64 {
    splitmix64(splitmix64(seed ^ 0x7f4a_7c15) ^ splitmix64(trial as u64).wrapping_add(stream))
}

/// Random system in the evaluation style: `A_ij ~ N(0, 1/n)`, `B = [I_m; 0]`
/// (each input drives one state), and either Gaussian or first-states
/// sensing. Deterministic in the seed.
pub fn random_system(
    n: usize,
    m: usize,
    p: usize,
    sensor: SensorKind,
    seed: u64,
) -> Result<LtiSystem> {
    if m > n {
        return Err(Error::InvalidArgument("need m <= n for the identity input map".into()));
    }
    if sensor == SensorKind::FirstStates && p > n {
        return Err(Error::InvalidArgument("first-states sensing needs p <= n".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = 1.0 / (n as f64).sqrt();
    let a = DMatrix::from_fn(n, n, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
    let b = DMatrix::from_fn(n, m, |i, j| if i == j { 1.0 } else { 0.0 });
    let c = match sensor {
        SensorKind::Gaussian => {
            DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal))
        }
        SensorKind::FirstStates => DMatrix::from_fn(p, n, |i, j| if i == j { 1.0 } else { 0.0 }),
    };
    LtiSystem::new(a, b, c)
}

/// Synthesizes the per-channel input series: exactly zero outside the active
/// set, drawn from `kind` inside it. Deterministic in the seed.
pub fn synth_inputs(
    kind: &InputKind,
    m: usize,
    n_horizon: usize,
    active: &[usize],
    seed: u64,
) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![DVector::zeros(n_horizon + 1); m];
    let mut sorted = active.to_vec();
    sorted.sort_unstable();
    for &j in &sorted {
        inputs[j] = match kind {
            InputKind::UniformBox { lo, hi } => {
                DVector::from_fn(n_horizon + 1, |_, _| rng.random_range(*lo..=*hi))
            }
            InputKind::Sinusoid { amplitude, f_max, jitter_sigma, dt } => {
                let f = f_max * rng.random_range(0.0..1.0);
                DVector::from_fn(n_horizon + 1, |k, _| {
                    let phase = 2.0 * std::f64::consts::PI * f * dt * k as f64;
                    amplitude * phase.sin()
                        + jitter_sigma * rng.sample::<f64, _>(StandardNormal)
                })
            }
        };
    }
    inputs
}

/// Localization rates: false-positive, false-negative, and exact-recovery.
pub fn metrics(s_true: &[usize], s_hat: &[usize], m: usize) -> (f64, f64, f64) {
    let in_true = |j: &usize| s_true.contains(j);
    let in_hat = |j: &usize| s_hat.contains(j);
    let complement_size = m - s_true.len();
    let false_pos = s_hat.iter().filter(|j| !in_true(j)).count();
    let false_neg = s_true.iter().filter(|j| !in_hat(j)).count();
    let fpr = if complement_size == 0 { 0.0 } else { false_pos as f64 / complement_size as f64 };
    let fnr = if s_true.is_empty() { 0.0 } else { false_neg as f64 / s_true.len() as f64 };
    let correct = (0..m).filter(|j| in_true(j) == in_hat(j)).count();
    (fpr, fnr, correct as f64 / m as f64)
}

/// One (trial, lambda) estimation outcome.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub lambda: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub err: f64,
    pub exact: bool,
    pub rel_err_u: f64,
    pub rel_err_x0: f64,
    /// The true initial state was zero, so `rel_err_x0` holds the absolute
    /// error instead of a relative one.
    pub x0_err_absolute: bool,
    pub iterations: usize,
    pub converged: bool,
    pub support_size: usize,
    /// L2 error of the penalized estimate on `(x0, u_S[0..N-d])`, recorded
    /// when the support was recovered exactly and the delay is finite.
    pub lasso_delayed_err: Option<f64>,
    /// Same window for the least-squares refit.
    pub refit_delayed_err: Option<f64>,
    /// Measured `m* * MIC` when the theorem grid is in use.
    pub alpha_implied: Option<f64>,
}

/// Per-grid-point aggregate over all trials.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub lambda_mean: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub err: f64,
    pub exact_recovery_count: usize,
    pub rel_err_u: f64,
    pub rel_err_x0: f64,
    pub trials: usize,
}

/// Full sweep output: one aggregate row per grid point (ascending lambda)
/// plus every per-trial record.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<MetricsReport>,
    pub records: Vec<TrialRecord>,
}

fn draw_active_set(spec: &TrialSpec, seed: u64) -> Vec<usize> {
    if let Some(s) = &spec.active_set {
        let mut s = s.clone();
        s.sort_unstable();
        return s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..spec.m).collect();
    for i in 0..spec.m_star {
        let j = rng.random_range(i..spec.m);
        idx.swap(i, j);
    }
    let mut s = idx[..spec.m_star].to_vec();
    s.sort_unstable();
    s
}

struct TrialSetup {
    sys: LtiSystem,
    batch: BatchModel,
    active: Vec<usize>,
    x0: DVector<f64>,
    inputs: Vec<DVector<f64>>,
    y: DVector<f64>,
}

fn build_trial(spec: &TrialSpec, trial: usize) -> Result<TrialSetup> {
    let sys = match &spec.system_source {
        SystemSource::RandomGaussian { sensor } => {
            random_system(spec.n, spec.m, spec.p, *sensor, substream_seed(spec.seed, trial, 1))?
        }
        SystemSource::FromFile { path } => {
            let sys = crate::io::load_system(path)?;
            if sys.m() != spec.m {
                return Err(Error::Dimension(format!(
                    "system file has m = {}, spec says {}",
                    sys.m(),
                    spec.m
                )));
            }
            sys
        }
    };
    let active = draw_active_set(spec, substream_seed(spec.seed, trial, 2));
    let inputs = synth_inputs(
        &spec.input_kind,
        spec.m,
        spec.n_horizon,
        &active,
        substream_seed(spec.seed, trial, 3),
    );
    let x0 = match spec.x0_kind {
        X0Kind::Zero => DVector::zeros(sys.n()),
        X0Kind::StandardGaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(spec.seed, trial, 4));
            DVector::from_fn(sys.n(), |_, _| rng.sample::<f64, _>(StandardNormal))
        }
    };
    let noise =
        if spec.sigma > 0.0 { Noise::Measurement { sigma: spec.sigma } } else { Noise::None };
    let y = sys.simulate(&x0, &inputs, &noise, substream_seed(spec.seed, trial, 5))?.y().clone();
    let batch = BatchModel::build(&sys, &active, spec.n_horizon)?;
    Ok(TrialSetup { sys, batch, active, x0, inputs, y })
}

fn resolve_grid(
    spec: &TrialSpec,
    setup: &TrialSetup,
    problem: &GroupLassoProblem,
) -> Result<(Vec<f64>, Option<f64>)> {
    match &spec.lambda_grid {
        LambdaGrid::Explicit(v) => {
            let mut grid = v.clone();
            grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Ok((grid, None))
        }
        LambdaGrid::Auto { points } => {
            let lmax = problem.lambda_max();
            let grid = (0..*points)
                .map(|i| {
                    if *points == 1 {
                        lmax
                    } else {
                        lmax * 0.01_f64.powf(1.0 - i as f64 / (*points - 1) as f64)
                    }
                })
                .collect();
            Ok((grid, None))
        }
        LambdaGrid::Theorem { delta, alpha_from } => {
            let c_norm = group_norm_constant(&setup.batch)?;
            let mic = match alpha_from {
                AlphaSource::FullDesign => mic_time(&setup.batch)?,
                AlphaSource::InputsOnly => mic_time_inputs_only(&setup.batch)?,
            };
            let alpha_implied = mic.implied_alpha(setup.active.len());
            // The formula needs alpha < 1; incoherence violations are
            // reported through the record and the weight is computed at the
            // clamped value.
            let alpha_used = alpha_implied.min(0.95);
            let lam = lambda_t(
                c_norm,
                spec.sigma,
                alpha_used,
                spec.n_horizon,
                spec.m,
                setup.active.len(),
                setup.batch.t(),
                *delta,
            )?;
            Ok((vec![lam], Some(alpha_implied)))
        }
    }
}

fn delayed_truth(setup: &TrialSetup, d: usize) -> (DVector<f64>, usize) {
    let steps = setup.batch.n_horizon() - d + 1;
    let m_star = setup.active.len();
    let n = setup.x0.len();
    let mut truth = DVector::zeros(n + steps * m_star);
    truth.rows_mut(0, n).copy_from(&setup.x0);
    for (slot, &j) in setup.active.iter().enumerate() {
        for k in 0..steps {
            truth[n + k * m_star + slot] = setup.inputs[j][k];
        }
    }
    (truth, steps)
}

/// Runs one trial across the resolved lambda grid (warm-started, descending)
/// and returns one record per grid point in ascending-lambda order.
pub fn run_trial(spec: &TrialSpec, trial: usize) -> Result<Vec<TrialRecord>> {
    spec.validate()?;
    let setup = build_trial(spec, trial)?;
    let mut problem = GroupLassoProblem::new(&setup.batch, &setup.y)?;
    let (grid, alpha_implied) = resolve_grid(spec, &setup, &problem)?;

    let u_true_norm = {
        let total: f64 = setup.inputs.iter().map(|u| u.norm_squared()).sum();
        total.sqrt()
    };
    let x0_norm = setup.x0.norm();
    let eta = input_delay(&setup.sys, &setup.active, setup.sys.n())?;

    let mut records: Vec<TrialRecord> = Vec::with_capacity(grid.len());
    let mut warm: Option<WarmStart> = None;
    for &lam in grid.iter().rev() {
        let cfg = GroupLassoConfig { lambda: lam, ..spec.solver.clone() };
        let (res, next) = problem.solve_warm(&cfg, warm.as_ref())?;
        warm = Some(next);

        let (fpr, fnr, err) = metrics(&setup.active, &res.support, spec.m);
        let exact = res.support == setup.active;
        let diff_sq: f64 =
            (0..spec.m).map(|j| (&res.u_hat[j] - &setup.inputs[j]).norm_squared()).sum();
        let rel_err_u = diff_sq.sqrt() / u_true_norm.max(f64::MIN_POSITIVE);
        let x0_err_absolute = x0_norm == 0.0;
        let rel_err_x0 = if x0_err_absolute {
            (&res.x0_hat - &setup.x0).norm()
        } else {
            (&res.x0_hat - &setup.x0).norm() / x0_norm
        };

        let mut lasso_delayed_err = None;
        let mut refit_delayed_err = None;
        if exact {
            if let Some(d) = eta.finite() {
                if d <= spec.n_horizon {
                    let (truth, steps) = delayed_truth(&setup, d);
                    let n = setup.x0.len();
                    let m_star = setup.active.len();
                    let mut lasso_est = DVector::zeros(truth.len());
                    lasso_est.rows_mut(0, n).copy_from(&res.x0_hat);
                    for (slot, &j) in setup.active.iter().enumerate() {
                        for k in 0..steps {
                            lasso_est[n + k * m_star + slot] = res.u_hat[j][k];
                        }
                    }
                    lasso_delayed_err = Some((&lasso_est - &truth).norm());
                    if spec.refit {
                        let refit =
                            ols_refit(&setup.sys, &res.support, &setup.y, spec.n_horizon, Some(d))?;
                        let mut refit_est = DVector::zeros(truth.len());
                        refit_est.rows_mut(0, n).copy_from(&refit.x0);
                        for slot in 0..m_star {
                            for k in 0..steps {
                                refit_est[n + k * m_star + slot] = refit.u_delayed_groups[slot][k];
                            }
                        }
                        refit_delayed_err = Some((&refit_est - &truth).norm());
                    }
                }
            }
        }

        records.push(TrialRecord {
            trial,
            lambda: lam,
            fpr,
            fnr,
            err,
            exact,
            rel_err_u,
            rel_err_x0,
            x0_err_absolute,
            iterations: res.iterations,
            converged: res.converged,
            support_size: res.support.len(),
            lasso_delayed_err,
            refit_delayed_err,
            alpha_implied,
        });
    }
    records.reverse();
    Ok(records)
}

/// Runs the whole campaign: trials in parallel, one aggregate row per grid
/// point. The report is a pure function of the spec.
pub fn run_sweep(spec: &TrialSpec) -> Result<SweepReport> {
    spec.validate()?;
    let per_trial: Vec<Result<Vec<TrialRecord>>> =
        (0..spec.trials).into_par_iter().map(|t| run_trial(spec, t)).collect();

    let mut records: Vec<TrialRecord> = Vec::new();
    for r in per_trial {
        records.extend(r?);
    }
    let grid_len = records.len() / spec.trials;

    let mut rows = Vec::with_capacity(grid_len);
    for gi in 0..grid_len {
        let slice: Vec<&TrialRecord> =
            (0..spec.trials).map(|t| &records[t * grid_len + gi]).collect();
        let count = slice.len() as f64;
        rows.push(MetricsReport {
            lambda_mean: slice.iter().map(|r| r.lambda).sum::<f64>() / count,
            fpr: slice.iter().map(|r| r.fpr).sum::<f64>() / count,
            fnr: slice.iter().map(|r| r.fnr).sum::<f64>() / count,
            err: slice.iter().map(|r| r.err).sum::<f64>() / count,
            exact_recovery_count: slice.iter().filter(|r| r.exact).count(),
            rel_err_u: slice.iter().map(|r| r.rel_err_u).sum::<f64>() / count,
            rel_err_x0: slice.iter().map(|r| r.rel_err_x0).sum::<f64>() / count,
            trials: spec.trials,
        });
    }
    Ok(SweepReport { rows, records })
}
