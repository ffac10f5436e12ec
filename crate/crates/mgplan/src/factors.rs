//! Hinge-loss cost factors and their linearizations.
//!
//! Static-obstacle factors penalize proximity to obstacles through the signed
//! distance field; inter-agent factors penalize proximity between agent pairs
//! through their Euclidean separation. Both are scalar hinge losses with
//! analytic Jacobians. Interpolated variants evaluate the same costs at states
//! reconstructed between knots and chain-rule the Jacobians onto the bracketing
//! support states.

use nalgebra::{DMatrix, DVector, Vector2};
use thiserror::Error;

use crate::env::{Point2, SignedDistanceField};
use crate::gp::InterpolationCoeffs;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("invalid noise weights: {0}")]
    InvalidWeights(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Isotropic cost weights and safety distances of the obstacle likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseWeights {
    /// Static-obstacle weight sigma_obs (standard deviation of the isotropic cost).
    pub sigma_obs: f64,
    /// Inter-agent weight sigma_mul.
    pub sigma_mul: f64,
    /// Safety distance bounding the static danger area, meters.
    pub eps_obs: f64,
    /// Safety distance inside which an inter-agent collision is anticipated, meters.
    pub eps_mul: f64,
}

impl NoiseWeights {
    pub fn validate(&self) -> Result<(), FactorError> {
        for (name, v) in [
            ("sigma_obs", self.sigma_obs),
            ("sigma_mul", self.sigma_mul),
            ("eps_obs", self.eps_obs),
            ("eps_mul", self.eps_mul),
        ] {
            if !(v > 0.0) {
                return Err(FactorError::InvalidWeights(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for NoiseWeights {
    fn default() -> Self {
        Self {
            sigma_obs: 0.3,
            sigma_mul: 0.7,
            eps_obs: 2.0,
            eps_mul: 15.0,
        }
    }
}

/// Error vector, one Jacobian block per connected variable, and the isotropic
/// weight sigma of one factor at a linearization point.
#[derive(Debug, Clone)]
pub struct FactorLinearization {
    pub error: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
    pub sigma: f64,
}

impl FactorLinearization {
    /// Squared-norm cost `0.5 ||e||^2 / sigma^2`.
    pub fn cost(&self) -> f64 {
        0.5 * self.error.norm_squared() / (self.sigma * self.sigma)
    }
}

/// Static hinge: `eps_obs - d` inside the danger area, zero outside.
pub fn hinge_static(d_signed: f64, eps_obs: f64) -> f64 {
    if d_signed <= eps_obs {
        eps_obs - d_signed
    } else {
        0.0
    }
}

/// Hinge on the center distance of two agents: `eps_mul - d` if `d <= eps_mul`.
pub fn hinge_mutual(p_j: &Point2, p_j2: &Point2, eps_mul: f64) -> f64 {
    let d = (p_j - p_j2).norm();
    if d <= eps_mul {
        eps_mul - d
    } else {
        0.0
    }
}

/// Analytic derivative of the mutual hinge w.r.t. the first agent's position:
/// `(p_j2 - p_j)/d` inside, half that on the boundary, zero outside, and the
/// zero subgradient at coincidence. The block for the other agent is the
/// negation.
pub fn mutual_jacobian(p_j: &Point2, p_j2: &Point2, eps_mul: f64) -> Vector2<f64> {
    let rel = p_j2 - p_j;
    let d = rel.norm();
    if d == 0.0 || d > eps_mul {
        Vector2::zeros()
    } else if d == eps_mul {
        0.5 * rel / d
    } else {
        rel / d
    }
}

fn position(state: &DVector<f64>) -> Point2 {
    debug_assert!(state.len() >= 4, "planar state expected");
    Point2::new(state[0], state[1])
}

/// Obstacle factor for one support state: hinge on `sdf(p) - r` with the
/// position Jacobian `-grad sdf` inside the danger area.
pub fn static_factor(
    state: &DVector<f64>,
    sdf: &SignedDistanceField,
    radius: f64,
    weights: &NoiseWeights,
) -> FactorLinearization {
    let n = state.len();
    let p = position(state);
    let (dist, grad) = sdf.query(&p);
    let d_signed = dist - radius;
    let e = hinge_static(d_signed, weights.eps_obs);
    let mut jac = DMatrix::zeros(1, n);
    if d_signed <= weights.eps_obs {
        jac[(0, 0)] = -grad.x;
        jac[(0, 1)] = -grad.y;
    }
    FactorLinearization {
        error: DVector::from_element(1, e),
        jacobians: vec![jac],
        sigma: weights.sigma_obs,
    }
}

/// Inter-agent factor for two same-time states: scalar hinge on the position
/// blocks with one Jacobian block per agent, velocity columns zero.
pub fn mutual_factor(
    x_j: &DVector<f64>,
    x_j2: &DVector<f64>,
    weights: &NoiseWeights,
) -> Result<FactorLinearization, FactorError> {
    if x_j.len() != x_j2.len() {
        return Err(FactorError::DimensionMismatch {
            expected: x_j.len(),
            got: x_j2.len(),
        });
    }
    let n = x_j.len();
    let p_j = position(x_j);
    let p_j2 = position(x_j2);
    let e = hinge_mutual(&p_j, &p_j2, weights.eps_mul);
    let g = mutual_jacobian(&p_j, &p_j2, weights.eps_mul);
    let mut jac_j = DMatrix::zeros(1, n);
    jac_j[(0, 0)] = g.x;
    jac_j[(0, 1)] = g.y;
    let mut jac_j2 = DMatrix::zeros(1, n);
    jac_j2[(0, 0)] = -g.x;
    jac_j2[(0, 1)] = -g.y;
    Ok(FactorLinearization {
        error: DVector::from_element(1, e),
        jacobians: vec![jac_j, jac_j2],
        sigma: weights.sigma_mul,
    })
}

/// State reconstructed between knots: `Lambda x_i + Psi x_next` (the prior mean
/// enters through both terms and cancels when it is itself GP-interpolated).
pub fn interp_state(
    x_i: &DVector<f64>,
    x_next: &DVector<f64>,
    coeffs: &InterpolationCoeffs,
) -> DVector<f64> {
    &coeffs.lambda * x_i + &coeffs.psi * x_next
}

/// Static factor at an interpolated state, with the Jacobian chain-ruled onto
/// the bracketing support states through Lambda and Psi.
pub fn interpolated_static_factor(
    x_i: &DVector<f64>,
    x_next: &DVector<f64>,
    coeffs: &InterpolationCoeffs,
    sdf: &SignedDistanceField,
    radius: f64,
    weights: &NoiseWeights,
) -> Result<FactorLinearization, FactorError> {
    let n = x_i.len();
    if coeffs.lambda.ncols() != n || x_next.len() != n {
        return Err(FactorError::DimensionMismatch {
            expected: n,
            got: coeffs.lambda.ncols(),
        });
    }
    let x_tau = interp_state(x_i, x_next, coeffs);
    let base = static_factor(&x_tau, sdf, radius, weights);
    let j_tau = &base.jacobians[0];
    Ok(FactorLinearization {
        error: base.error.clone(),
        jacobians: vec![j_tau * &coeffs.lambda, j_tau * &coeffs.psi],
        sigma: weights.sigma_obs,
    })
}

/// Mutual factor at interpolated states of two agents sharing the same time
/// discretization; four Jacobian blocks, one per bracketing support state.
pub fn interpolated_mutual_factor(
    x_i: &DVector<f64>,
    x_next: &DVector<f64>,
    y_i: &DVector<f64>,
    y_next: &DVector<f64>,
    coeffs: &InterpolationCoeffs,
    weights: &NoiseWeights,
) -> Result<FactorLinearization, FactorError> {
    let n = x_i.len();
    for v in [x_next, y_i, y_next] {
        if v.len() != n {
            return Err(FactorError::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
    }
    if coeffs.lambda.ncols() != n {
        return Err(FactorError::DimensionMismatch {
            expected: n,
            got: coeffs.lambda.ncols(),
        });
    }
    let x_tau = interp_state(x_i, x_next, coeffs);
    let y_tau = interp_state(y_i, y_next, coeffs);
    let base = mutual_factor(&x_tau, &y_tau, weights)?;
    let j_a = &base.jacobians[0];
    let j_b = &base.jacobians[1];
    Ok(FactorLinearization {
        error: base.error.clone(),
        jacobians: vec![
            j_a * &coeffs.lambda,
            j_a * &coeffs.psi,
            j_b * &coeffs.lambda,
            j_b * &coeffs.psi,
        ],
        sigma: weights.sigma_mul,
    })
}

/// Unary anchor pinning a state to a target with identity Jacobian.
pub fn anchor_factor(
    state: &DVector<f64>,
    target: &DVector<f64>,
    sigma_anchor: f64,
) -> Result<FactorLinearization, FactorError> {
    if state.len() != target.len() {
        return Err(FactorError::DimensionMismatch {
            expected: state.len(),
            got: target.len(),
        });
    }
    let n = state.len();
    Ok(FactorLinearization {
        error: state - target,
        jacobians: vec![DMatrix::identity(n, n)],
        sigma: sigma_anchor,
    })
}
