//! Constant-velocity Gaussian-process trajectory prior.
//!
//! The trajectory prior is generated by a double integrator driven by white noise
//! on acceleration: state x = [position; velocity] in R^{2d}. Everything here is
//! closed form: the transition matrix, the process-noise covariance between knots,
//! the interpolation coefficients that express x(tau) from its two bracketing
//! support states, and the block-tridiagonal inverse kernel of the prior.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("time step must be non-negative, got {0}")]
    NegativeDt(f64),
    #[error("time step must be strictly positive, got {0}")]
    NonPositiveDt(f64),
    #[error("interpolation offset {tau} outside [0, {dt}]")]
    TauOutOfRange { tau: f64, dt: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("qc must be a symmetric positive-definite {0}x{0} matrix")]
    QcNotSpd(usize),
    #[error("singular prior block at index {index}")]
    SingularBlock { index: usize },
    #[error("support trajectory needs at least 2 states, got {0}")]
    TooFewStates(usize),
}

/// White-noise-on-acceleration prior for one agent in a `d`-dimensional workspace.
///
/// The state dimension is `2d` (position block, then velocity block). `qc` is the
/// power spectral density of the injected acceleration noise.
#[derive(Debug, Clone)]
pub struct ConstantVelocityModel {
    dim: usize,
    qc: DMatrix<f64>,
    qc_inv: DMatrix<f64>,
}

impl ConstantVelocityModel {
    pub fn new(workspace_dim: usize, qc: DMatrix<f64>) -> Result<Self, GpError> {
        if qc.nrows() != workspace_dim || qc.ncols() != workspace_dim {
            return Err(GpError::DimensionMismatch {
                expected: workspace_dim,
                got: qc.nrows(),
            });
        }
        let sym_err = (&qc - qc.transpose()).norm();
        if sym_err > 1e-12 * (1.0 + qc.norm()) {
            return Err(GpError::QcNotSpd(workspace_dim));
        }
        let qc_inv = qc
            .clone()
            .cholesky()
            .ok_or(GpError::QcNotSpd(workspace_dim))?
            .inverse();
        Ok(Self {
            dim: workspace_dim,
            qc,
            qc_inv,
        })
    }

    /// Isotropic noise `qc * I`.
    pub fn isotropic(workspace_dim: usize, qc: f64) -> Result<Self, GpError> {
        Self::new(workspace_dim, DMatrix::identity(workspace_dim, workspace_dim) * qc)
    }

    pub fn workspace_dim(&self) -> usize {
        self.dim
    }

    pub fn state_dim(&self) -> usize {
        2 * self.dim
    }

    pub fn qc(&self) -> &DMatrix<f64> {
        &self.qc
    }

    /// State transition matrix Phi(t + dt, t) of the double integrator:
    /// identity diagonal blocks, `dt * I` in the position-velocity coupling block.
    pub fn transition(&self, dt: f64) -> Result<DMatrix<f64>, GpError> {
        if dt < 0.0 {
            return Err(GpError::NegativeDt(dt));
        }
        let d = self.dim;
        let mut phi = DMatrix::identity(2 * d, 2 * d);
        for i in 0..d {
            phi[(i, d + i)] = dt;
        }
        Ok(phi)
    }

    /// Process-noise covariance Q_{a,b} accumulated over an interval of length `dt`:
    /// blocks (dt^3/3) qc, (dt^2/2) qc on the off-diagonal, dt * qc.
    pub fn process_noise_cov(&self, dt: f64) -> Result<DMatrix<f64>, GpError> {
        if dt <= 0.0 {
            return Err(GpError::NonPositiveDt(dt));
        }
        Ok(self.q_blocks(dt, &self.qc))
    }

    /// Closed-form inverse of `process_noise_cov(dt)`.
    pub fn process_noise_inv(&self, dt: f64) -> Result<DMatrix<f64>, GpError> {
        if dt <= 0.0 {
            return Err(GpError::NonPositiveDt(dt));
        }
        // inverse of [[a,b],[b,c]] (x) qc with a=dt^3/3, b=dt^2/2, c=dt
        let d = self.dim;
        let mut q_inv = DMatrix::zeros(2 * d, 2 * d);
        let s00 = 12.0 / (dt * dt * dt);
        let s01 = -6.0 / (dt * dt);
        let s11 = 4.0 / dt;
        for r in 0..d {
            for c in 0..d {
                let qi = self.qc_inv[(r, c)];
                q_inv[(r, c)] = s00 * qi;
                q_inv[(r, d + c)] = s01 * qi;
                q_inv[(d + r, c)] = s01 * qi;
                q_inv[(d + r, d + c)] = s11 * qi;
            }
        }
        Ok(q_inv)
    }

    fn q_blocks(&self, dt: f64, qc: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.dim;
        let mut q = DMatrix::zeros(2 * d, 2 * d);
        let a = dt * dt * dt / 3.0;
        let b = dt * dt / 2.0;
        for r in 0..d {
            for c in 0..d {
                let qv = qc[(r, c)];
                q[(r, c)] = a * qv;
                q[(r, d + c)] = b * qv;
                q[(d + r, c)] = b * qv;
                q[(d + r, d + c)] = dt * qv;
            }
        }
        q
    }

    /// GP prior factor error between consecutive support states:
    /// `e = Phi(dt) (x_i - mu_i) - (x_next - mu_next)`.
    ///
    /// Zero exactly when the deviation from the mean propagates by the SDE.
    pub fn gp_prior_error(
        &self,
        x_i: &DVector<f64>,
        x_next: &DVector<f64>,
        mu_i: &DVector<f64>,
        mu_next: &DVector<f64>,
        dt: f64,
    ) -> Result<DVector<f64>, GpError> {
        if dt <= 0.0 {
            return Err(GpError::NonPositiveDt(dt));
        }
        let n = self.state_dim();
        for v in [x_i, x_next, mu_i, mu_next] {
            if v.len() != n {
                return Err(GpError::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        let d = self.dim;
        let dev_i = x_i - mu_i;
        let dev_next = x_next - mu_next;
        // Phi(dt) * dev_i without forming the matrix.
        let mut e = DVector::zeros(n);
        for k in 0..d {
            e[k] = dev_i[k] + dt * dev_i[d + k] - dev_next[k];
            e[d + k] = dev_i[d + k] - dev_next[d + k];
        }
        Ok(e)
    }

    /// Interpolation coefficients for a state at offset `tau_offset` into an
    /// interval of length `dt_interval`.
    pub fn interp_coeffs(
        &self,
        dt_interval: f64,
        tau_offset: f64,
    ) -> Result<InterpolationCoeffs, GpError> {
        if dt_interval <= 0.0 {
            return Err(GpError::NonPositiveDt(dt_interval));
        }
        if !(0.0..=dt_interval).contains(&tau_offset) {
            return Err(GpError::TauOutOfRange {
                tau: tau_offset,
                dt: dt_interval,
            });
        }
        let n = self.state_dim();
        let (lambda, psi);
        if tau_offset == 0.0 {
            lambda = DMatrix::identity(n, n);
            psi = DMatrix::zeros(n, n);
        } else if tau_offset == dt_interval {
            lambda = DMatrix::zeros(n, n);
            psi = DMatrix::identity(n, n);
        } else {
            let q_tau = self.q_blocks(tau_offset, &self.qc);
            let phi_rest_t = self.transition(dt_interval - tau_offset)?.transpose();
            let q_full_inv = self.process_noise_inv(dt_interval)?;
            let p = q_tau * phi_rest_t * q_full_inv;
            let l = self.transition(tau_offset)? - &p * self.transition(dt_interval)?;
            psi = p;
            lambda = l;
        }
        Ok(InterpolationCoeffs {
            lambda,
            psi,
            tau: tau_offset,
            dt: dt_interval,
        })
    }
}

/// Coefficients Lambda(tau), Psi(tau) expressing x(tau) from the two support
/// states bracketing the interval.
#[derive(Debug, Clone)]
pub struct InterpolationCoeffs {
    pub lambda: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub tau: f64,
    pub dt: f64,
}

/// `x(tau) = mu_tau + Lambda (x_i - mu_i) + Psi (x_next - mu_next)`.
pub fn interpolate(
    x_i: &DVector<f64>,
    x_next: &DVector<f64>,
    coeffs: &InterpolationCoeffs,
    mu_i: &DVector<f64>,
    mu_next: &DVector<f64>,
    mu_tau: &DVector<f64>,
) -> Result<DVector<f64>, GpError> {
    let n = coeffs.lambda.nrows();
    for v in [x_i, x_next, mu_i, mu_next, mu_tau] {
        if v.len() != n {
            return Err(GpError::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
    }
    Ok(mu_tau + &coeffs.lambda * (x_i - mu_i) + &coeffs.psi * (x_next - mu_next))
}

/// Support states of one agent at N+1 equidistant knot times.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportTrajectory {
    pub t0: f64,
    pub t_end: f64,
    pub states: Vec<DVector<f64>>,
}

impl SupportTrajectory {
    pub fn new(t0: f64, t_end: f64, states: Vec<DVector<f64>>) -> Result<Self, GpError> {
        if states.len() < 2 {
            return Err(GpError::TooFewStates(states.len()));
        }
        if t_end <= t0 {
            return Err(GpError::NonPositiveDt(t_end - t0));
        }
        let n = states[0].len();
        for s in &states {
            if s.len() != n {
                return Err(GpError::DimensionMismatch {
                    expected: n,
                    got: s.len(),
                });
            }
        }
        Ok(Self { t0, t_end, states })
    }

    pub fn num_intervals(&self) -> usize {
        self.states.len() - 1
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.num_intervals() as f64
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * (self.t_end - self.t0) / self.num_intervals() as f64
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }
}

/// Prior mean trajectory with the initial covariance that anchors the chain.
#[derive(Debug, Clone)]
pub struct PriorMean {
    pub mean: SupportTrajectory,
    pub k0: DMatrix<f64>,
}

/// Symmetric block-tridiagonal matrix with square blocks, stored as the
/// diagonal and the upper off-diagonal block sequences.
#[derive(Debug, Clone)]
pub struct BlockTridiagonal {
    pub block_dim: usize,
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn num_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let bd = self.block_dim;
        let n = self.num_blocks() * bd;
        let mut m = DMatrix::zeros(n, n);
        for (i, b) in self.diag.iter().enumerate() {
            m.view_mut((i * bd, i * bd), (bd, bd)).copy_from(b);
        }
        for (i, b) in self.upper.iter().enumerate() {
            m.view_mut((i * bd, (i + 1) * bd), (bd, bd)).copy_from(b);
            m.view_mut(((i + 1) * bd, i * bd), (bd, bd))
                .copy_from(&b.transpose());
        }
        m
    }

    /// Multiply by a stacked vector.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let bd = self.block_dim;
        let nb = self.num_blocks();
        let mut y = DVector::zeros(nb * bd);
        for i in 0..nb {
            let xi = x.rows(i * bd, bd);
            let mut yi = &self.diag[i] * xi;
            if i > 0 {
                yi += self.upper[i - 1].transpose() * x.rows((i - 1) * bd, bd);
            }
            if i + 1 < nb {
                yi += &self.upper[i] * x.rows((i + 1) * bd, bd);
            }
            y.rows_mut(i * bd, bd).copy_from(&yi);
        }
        y
    }
}

/// Assembles the sparse inverse kernel K^{-1} = A^{-T} Q^{-1} A^{-1} of the GP
/// prior over N+1 equidistant support states.
///
/// Nonzero blocks appear only on the main and first off-block-diagonals.
pub fn assemble_inverse_kernel(
    model: &ConstantVelocityModel,
    prior: &PriorMean,
    num_intervals: usize,
    dt: f64,
) -> Result<BlockTridiagonal, GpError> {
    if dt <= 0.0 {
        return Err(GpError::NonPositiveDt(dt));
    }
    if num_intervals < 1 {
        return Err(GpError::TooFewStates(num_intervals + 1));
    }
    let n = model.state_dim();
    if prior.k0.nrows() != n || prior.k0.ncols() != n {
        return Err(GpError::DimensionMismatch {
            expected: n,
            got: prior.k0.nrows(),
        });
    }
    let k0_inv = prior
        .k0
        .clone()
        .cholesky()
        .ok_or(GpError::SingularBlock { index: 0 })?
        .inverse();
    let q_inv = model.process_noise_inv(dt)?;
    let phi = model.transition(dt)?;
    let phi_t_qinv = phi.transpose() * &q_inv;
    let phi_t_qinv_phi = &phi_t_qinv * &phi;

    let mut diag = Vec::with_capacity(num_intervals + 1);
    let mut upper = Vec::with_capacity(num_intervals);
    for i in 0..=num_intervals {
        let q_i_inv = if i == 0 { &k0_inv } else { &q_inv };
        let mut d = q_i_inv.clone();
        if i < num_intervals {
            d += &phi_t_qinv_phi;
            upper.push(-&phi_t_qinv);
        }
        diag.push(d);
    }
    Ok(BlockTridiagonal {
        block_dim: n,
        diag,
        upper,
    })
}
