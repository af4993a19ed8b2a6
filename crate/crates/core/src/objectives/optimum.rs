//! Closed-form optimum and curvature constants of the ridge objective.

use nalgebra::{DMatrix, DVector};

use super::data::{ClientShard, Instance};
use super::ObjectiveError;
use crate::params::ParamVector;

/// `θ*`, smoothness `L`, strong convexity `μ` and heterogeneity gap `Γ` of the
/// global ridge objective.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticConstants {
    pub theta_star: ParamVector,
    pub lipschitz: f64,
    pub strong_convexity: f64,
    /// `F(θ*) − (1/K) Σ_k min f_k`
    pub gamma_gap: f64,
}

/// Normal-equation pieces `(ZᵀZ/N, Zᵀy/N)` of one client's least squares.
fn normal_equations(
    instances: &[Instance],
    m: usize,
) -> Result<(DMatrix<f64>, DVector<f64>), ObjectiveError> {
    if instances.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut h = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for inst in instances {
        if inst.features.len() != m {
            return Err(ObjectiveError::Dimension {
                expected: m,
                got: inst.features.len(),
            });
        }
        let z = DVector::from_column_slice(&inst.features);
        h.ger(1.0, &z, &z, 1.0);
        b.axpy(inst.label, &z, 1.0);
    }
    let inv = 1.0 / instances.len() as f64;
    Ok((h * inv, b * inv))
}

fn solve(mut h: DMatrix<f64>, b: &DVector<f64>, l2: f64) -> Result<ParamVector, ObjectiveError> {
    let m = h.nrows();
    for i in 0..m {
        h[(i, i)] += l2;
    }
    let chol = h.cholesky().ok_or(ObjectiveError::Singular)?;
    Ok(ParamVector::new(chol.solve(b).iter().copied().collect()))
}

/// Minimizer of `(1/2N) Σ (z·θ − y)² + (l2/2)‖θ‖²` over one instance set.
pub fn least_squares_optimum(
    instances: &[Instance],
    m: usize,
    l2: f64,
) -> Result<ParamVector, ObjectiveError> {
    let (h, b) = normal_equations(instances, m)?;
    solve(h, &b, l2)
}

fn ridge_value(instances: &[Instance], theta: &ParamVector, l2: f64) -> f64 {
    let sq: f64 = instances
        .iter()
        .map(|i| {
            let r: f64 = i
                .features
                .iter()
                .zip(theta.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                - i.label;
            r * r
        })
        .sum();
    0.5 * sq / instances.len() as f64 + 0.5 * l2 * theta.norm_sq()
}

pub fn quadratic_constants_and_optimum(
    shards: &[ClientShard],
    l2: f64,
) -> Result<QuadraticConstants, ObjectiveError> {
    let first = shards
        .first()
        .ok_or_else(|| ObjectiveError::Sizing("need at least one shard".into()))?;
    let m = first
        .instances
        .first()
        .map(|i| i.features.len())
        .ok_or(ObjectiveError::EmptyShard(first.client_id))?;
    let k = shards.len() as f64;

    let per_client = shards
        .iter()
        .map(|s| normal_equations(&s.instances, m))
        .collect::<Result<Vec<_>, _>>()?;
    let mut h = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for (hk, bk) in &per_client {
        h += hk / k;
        b += bk / k;
    }
    let mut hessian = h.clone();
    for i in 0..m {
        hessian[(i, i)] += l2;
    }
    let theta_star = solve(h, &b, l2)?;
    let eig = hessian.symmetric_eigen().eigenvalues;
    let lipschitz = eig.max();
    let strong_convexity = eig.min();
    if !(strong_convexity > 0.0) {
        return Err(ObjectiveError::Singular);
    }

    let f_star: f64 = shards
        .iter()
        .map(|s| ridge_value(&s.instances, &theta_star, l2))
        .sum::<f64>()
        / k;
    let mut local_min = 0.0;
    for (s, (hk, bk)) in shards.iter().zip(per_client) {
        let opt = solve(hk, &bk, l2)?;
        local_min += ridge_value(&s.instances, &opt, l2) / k;
    }
    Ok(QuadraticConstants {
        theta_star,
        lipschitz,
        strong_convexity,
        gamma_gap: (f_star - local_min).max(0.0),
    })
}
