//! Discrete-time LTI systems and trajectory simulation.
//!
//! A system is the triple `(A, B, C)` with state dimension `n`, `m` input
//! channels (one column of `B` per potential source), and `p` sensors.
//! Feedthrough is fixed at zero: the first impulse-response coefficient of
//! every channel vanishes, which is what forces the one-step estimation
//! delay analysed in [`crate::structure`].

use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Discrete-time LTI system `x[k+1] = A x[k] + B u[k]`, `y[k] = C x[k] + v[k]`
/// with optional process/measurement noise covariances.
#[derive(Debug, Clone)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    q: Option<DMatrix<f64>>,
    r: Option<DMatrix<f64>>,
    eigenvalues: Vec<Complex<f64>>,
    spectral_radius: f64,
}

impl LtiSystem {
    /// Builds a system from its matrices, validating dimension consistency.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!(
                "state matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        if b.nrows() != n {
            return Err(Error::Dimension(format!(
                "input matrix has {} rows, expected n = {}",
                b.nrows(),
                n
            )));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!(
                "sensor matrix has {} columns, expected n = {}",
                c.ncols(),
                n
            )));
        }
        if b.ncols() == 0 || c.nrows() == 0 || n == 0 {
            return Err(Error::Dimension("system dimensions must be positive".into()));
        }
        for (name, mat) in [("A", &a), ("B", &b), ("C", &c)] {
            if mat.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
            }
        }
        let eigenvalues: Vec<Complex<f64>> = a.complex_eigenvalues().iter().copied().collect();
        let spectral_radius = eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max);
        Ok(Self { a, b, c, q: None, r: None, eigenvalues, spectral_radius })
    }

    /// Attaches a process-noise covariance `Q` (symmetric PSD, n x n).
    pub fn with_process_noise(mut self, q: DMatrix<f64>) -> Result<Self> {
        let n = self.n();
        if q.shape() != (n, n) {
            return Err(Error::Dimension(format!("Q must be {n}x{n}")));
        }
        check_symmetric_psd("Q", &q, false)?;
        self.q = Some(q);
        Ok(self)
    }

    /// Attaches a measurement-noise covariance `R` (symmetric PD, p x p).
    pub fn with_measurement_noise(mut self, r: DMatrix<f64>) -> Result<Self> {
        let p = self.p();
        if r.shape() != (p, p) {
            return Err(Error::Dimension(format!("R must be {p}x{p}")));
        }
        check_symmetric_psd("R", &r, true)?;
        self.r = Some(r);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn q(&self) -> Option<&DMatrix<f64>> {
        self.q.as_ref()
    }

    pub fn r(&self) -> Option<&DMatrix<f64>> {
        self.r.as_ref()
    }

    /// Eigenvalues of `A`, computed once at construction.
    pub fn eigenvalues(&self) -> &[Complex<f64>] {
        &self.eigenvalues
    }

    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }

    /// `true` when the spectral radius of `A` is strictly below one. This
    /// gates the group-normalization assumption but never blocks
    /// construction.
    pub fn is_stable(&self) -> bool {
        self.spectral_radius < 1.0
    }

    /// Columns of `B` restricted to `sources` (in the given order).
    pub fn b_columns(&self, sources: &[usize]) -> Result<DMatrix<f64>> {
        for &j in sources {
            if j >= self.m() {
                return Err(Error::InvalidArgument(format!(
                    "source index {j} out of range (m = {})",
                    self.m()
                )));
            }
        }
        Ok(DMatrix::from_fn(self.n(), sources.len(), |i, k| self.b[(i, sources[k])]))
    }

    /// Impulse-response (Markov) parameter `H_l` of channel `source`:
    /// zero for `l = 0`, `C A^{l-1} b_j` for `l >= 1`.
    pub fn markov_parameter(&self, source: usize, lag: usize) -> Result<DVector<f64>> {
        if source >= self.m() {
            return Err(Error::InvalidArgument(format!(
                "source index {source} out of range (m = {})",
                self.m()
            )));
        }
        if lag == 0 {
            return Ok(DVector::zeros(self.p()));
        }
        let mut v = self.b.column(source).into_owned();
        for _ in 1..lag {
            v = &self.a * v;
        }
        Ok(&self.c * v)
    }

    /// Observability matrix over horizon `N`: row blocks `C, CA, ..., CA^N`,
    /// shape `p(N+1) x n`.
    pub fn observability(&self, n_horizon: usize) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p());
        let mut obs = DMatrix::zeros(p * (n_horizon + 1), n);
        let mut block = self.c.clone();
        for k in 0..=n_horizon {
            obs.view_mut((k * p, 0), (p, n)).copy_from(&block);
            if k < n_horizon {
                block = &block * &self.a;
            }
        }
        obs
    }

    /// Impulse-response matrix `J_j` of a single channel over horizon `N`:
    /// lower block-Toeplitz with first block column `H_0, ..., H_N`.
    pub fn impulse_matrix(&self, source: usize, n_horizon: usize) -> Result<DMatrix<f64>> {
        if source >= self.m() {
            return Err(Error::InvalidArgument(format!(
                "source index {source} out of range (m = {})",
                self.m()
            )));
        }
        Ok(crate::batch::block_toeplitz(self, &[source], n_horizon))
    }

    /// Simulates the state recursion and returns stacked measurements with
    /// ground truth attached. `inputs` holds one length-`N+1` sample vector
    /// per channel. Fixed seeds give bit-identical output.
    pub fn simulate(
        &self,
        x0: &DVector<f64>,
        inputs: &[DVector<f64>],
        noise: &Noise,
        seed: u64,
    ) -> Result<MeasurementBatch> {
        let (n, m, p) = (self.n(), self.m(), self.p());
        if x0.len() != n {
            return Err(Error::Dimension(format!("x0 has length {}, expected {n}", x0.len())));
        }
        if inputs.len() != m {
            return Err(Error::Dimension(format!(
                "expected {m} input channels, got {}",
                inputs.len()
            )));
        }
        let n_steps = inputs
            .first()
            .map(|u| u.len())
            .ok_or_else(|| Error::Dimension("no input channels".into()))?;
        if n_steps == 0 || inputs.iter().any(|u| u.len() != n_steps) {
            return Err(Error::Dimension("all input channels need the same positive length".into()));
        }
        let n_horizon = n_steps - 1;

        match noise {
            Noise::Measurement { sigma } if !(sigma.is_finite() && *sigma >= 0.0) => {
                return Err(Error::InvalidArgument("sigma must be finite and nonnegative".into()));
            }
            Noise::Covariance if self.q.is_none() && self.r.is_none() => {
                return Err(Error::Precondition(
                    "covariance noise requires Q or R on the system".into(),
                ));
            }
            _ => {}
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q_factor = match noise {
            Noise::Covariance => self.q.as_ref().map(covariance_factor),
            _ => None,
        };
        let r_factor = match noise {
            Noise::Covariance => self.r.as_ref().map(covariance_factor),
            _ => None,
        };

        let mut y = DVector::zeros(p * (n_horizon + 1));
        let mut x = x0.clone();
        for k in 0..=n_horizon {
            let mut yk = &self.c * &x;
            match noise {
                Noise::None => {}
                Noise::Measurement { sigma } => {
                    if *sigma > 0.0 {
                        yk += standard_normal_vector(&mut rng, p).scale(*sigma);
                    }
                }
                Noise::Covariance => {
                    if let Some(f) = &r_factor {
                        yk += f * standard_normal_vector(&mut rng, p);
                    }
                }
            }
            y.rows_mut(k * p, p).copy_from(&yk);

            if k < n_horizon {
                let uk = DVector::from_iterator(m, inputs.iter().map(|u| u[k]));
                let mut next = &self.a * &x + &self.b * uk;
                if let Some(f) = &q_factor {
                    next += f * standard_normal_vector(&mut rng, n);
                }
                x = next;
            }
        }

        let active_set: Vec<usize> =
            (0..m).filter(|&j| inputs[j].iter().any(|&v| v != 0.0)).collect();
        Ok(MeasurementBatch {
            y,
            per_step_dim: p,
            truth: Some(GroundTruth {
                x0: x0.clone(),
                inputs: inputs.to_vec(),
                active_set,
            }),
        })
    }
}

/// Noise model applied while simulating.
#[derive(Debug, Clone)]
pub enum Noise {
    /// Exact noise-free trajectory.
    None,
    /// iid measurement noise `v[k] ~ N(0, sigma^2 I)`.
    Measurement { sigma: f64 },
    /// Process and measurement noise drawn from the covariances attached to
    /// the system (`w[k] ~ N(0, Q)`, `v[k] ~ N(0, R)`).
    Covariance,
}

/// Stacked measurements `y = [y[0]; ...; y[N]]` with optional ground truth.
#[derive(Debug, Clone)]
pub struct MeasurementBatch {
    y: DVector<f64>,
    per_step_dim: usize,
    truth: Option<GroundTruth>,
}

impl MeasurementBatch {
    pub fn new(y: DVector<f64>, per_step_dim: usize) -> Result<Self> {
        if per_step_dim == 0 || y.len() % per_step_dim != 0 {
            return Err(Error::Dimension(format!(
                "measurement length {} is not a multiple of p = {per_step_dim}",
                y.len()
            )));
        }
        Ok(Self { y, per_step_dim, truth: None })
    }

    pub fn with_truth(mut self, truth: GroundTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn per_step_dim(&self) -> usize {
        self.per_step_dim
    }

    /// Horizon `N` (the batch spans `N+1` steps).
    pub fn n_horizon(&self) -> usize {
        self.y.len() / self.per_step_dim - 1
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }
}

/// Ground truth carried alongside simulated measurements.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub x0: DVector<f64>,
    pub inputs: Vec<DVector<f64>>,
    pub active_set: Vec<usize>,
}

/// Zero-order-hold discretization of continuous dynamics `(A_c, B_c)` with
/// sampling period `dt`, via the exponential of the augmented matrix
/// `[[A_c, B_c], [0, 0]] * dt`.
pub fn discretize(
    a_c: &DMatrix<f64>,
    b_c: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !a_c.is_square() {
        return Err(Error::Dimension("continuous state matrix must be square".into()));
    }
    if b_c.nrows() != a_c.nrows() {
        return Err(Error::Dimension("B_c row count must match A_c".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    if a_c.iter().chain(b_c.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite entries in continuous matrices".into()));
    }
    let n = a_c.nrows();
    let m = b_c.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&a_c.scale(dt));
    aug.view_mut((0, n), (n, m)).copy_from(&b_c.scale(dt));
    let exp = aug.exp();
    let a = exp.view((0, 0), (n, n)).into_owned();
    let b = exp.view((0, n), (n, m)).into_owned();
    Ok((a, b))
}

fn standard_normal_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(rng)))
}

/// Square root factor `F` with `F F^T = M` for a symmetric PSD matrix,
/// through the symmetric eigendecomposition (tolerates semidefiniteness).
fn covariance_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()).scale(0.5);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut f = eig.eigenvectors;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        f.column_mut(i).scale_mut(l.max(0.0).sqrt());
    }
    f
}

fn check_symmetric_psd(name: &str, m: &DMatrix<f64>, strict: bool) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-10 * scale {
        return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
    }
    let eig = nalgebra::SymmetricEigen::new((m + m.transpose()).scale(0.5));
    let min = eig.eigenvalues.min();
    if strict {
        if min <= 0.0 {
            return Err(Error::InvalidArgument(format!("{name} is not positive definite")));
        }
    } else if min < -1e-10 * scale {
        return Err(Error::InvalidArgument(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}
