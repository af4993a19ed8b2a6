//! Constants of the convergence bound for clustered training on a strongly
//! convex objective, and the resulting `O(1/t)` curve.

use serde::Serialize;

use super::HarnessError;
use crate::topology::{ClusterLayout, MixingMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremInputs {
    pub lipschitz: f64,
    pub strong_convexity: f64,
    /// Bound on stochastic gradient norms.
    pub grad_bound: f64,
    /// `Γ = F* − (1/K) Σ_k f_k*`
    pub gamma_gap: f64,
    /// Stochastic-gradient variance `α_k²` per client.
    pub alpha2: Vec<f64>,
    pub epochs: usize,
    pub p1: f64,
    pub p2: f64,
    pub dim: usize,
    pub layout: ClusterLayout,
    pub mixing: MixingMatrix,
    /// Receiver noise variance at each head.
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadConstants {
    pub head: usize,
    pub cluster_size: usize,
    pub alpha2_sum: f64,
    pub w_row: Vec<f64>,
    pub sigma2: f64,
    pub a: f64,
    pub q1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremConstants {
    pub lipschitz: f64,
    pub mu: f64,
    pub g: f64,
    pub gamma_gap: f64,
    /// `γ = max(E, 12L/μ)`
    pub gamma: f64,
    pub epochs: usize,
    pub p1: f64,
    pub p2: f64,
    pub dim: usize,
    pub clusters: usize,
    pub sigma2: Vec<f64>,
    pub heads: Vec<HeadConstants>,
}

fn finite_nonneg(name: &str, v: f64) -> Result<(), HarnessError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(HarnessError::Invalid(format!(
            "{name} must be finite and nonnegative, got {v}"
        )))
    }
}

pub fn theorem_constants(inputs: &TheoremInputs) -> Result<TheoremConstants, HarnessError> {
    let TheoremInputs {
        lipschitz: l,
        strong_convexity: mu,
        grad_bound: g,
        gamma_gap,
        epochs,
        p1,
        p2,
        dim,
        ..
    } = *inputs;
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(HarnessError::Invalid(format!(
            "strong convexity must be > 0, got {mu}"
        )));
    }
    for (name, v) in [("L", l), ("G", g), ("Gamma", gamma_gap)] {
        finite_nonneg(name, v)?;
    }
    for (name, v) in [("P1", p1), ("P2", p2)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(HarnessError::Invalid(format!(
                "{name} must be > 0, got {v}"
            )));
        }
    }
    if epochs == 0 {
        return Err(HarnessError::Invalid("E must be >= 1".into()));
    }
    let c = inputs.layout.num_clusters();
    if inputs.mixing.size() != c {
        return Err(HarnessError::Invalid(
            "mixing matrix does not match the layout".into(),
        ));
    }
    if inputs.alpha2.len() != inputs.layout.num_clients() {
        return Err(HarnessError::Invalid("need one alpha^2 per client".into()));
    }
    for &a in &inputs.alpha2 {
        finite_nonneg("alpha^2", a)?;
    }
    let sigma2: Vec<f64> = match inputs.sigma2.len() {
        1 => vec![inputs.sigma2[0]; c],
        n if n == c => inputs.sigma2.clone(),
        n => {
            return Err(HarnessError::Invalid(format!(
                "{n} noise variances for {c} heads"
            )))
        }
    };
    for &s in &sigma2 {
        finite_nonneg("sigma^2", s)?;
    }

    let e = epochs as f64;
    let d = dim as f64;
    let cf = c as f64;
    let kappa2: Vec<f64> = (0..c)
        .map(|h| {
            inputs
                .mixing
                .row(h)
                .iter()
                .zip(&sigma2)
                .map(|(w, s)| w * s)
                .sum()
        })
        .collect();
    let max_kappa2 = kappa2.iter().copied().fold(0.0, f64::max);
    let heads = (0..c)
        .map(|h| {
            let row = inputs.mixing.row(h).to_vec();
            let kc = inputs.layout.members(h).len() as f64;
            let w2: f64 = row.iter().map(|w| w * w).sum();
            // The indicator on the last term of A is taken as always on.
            let a = 8.0 * e * e * g * g / (p1 * p2)
                * (cf * p2 * w2 + d * max_kappa2 + p1 + 1.0 / (2.0 * kc));
            let alpha2_sum: f64 = inputs
                .layout
                .members(h)
                .iter()
                .map(|&k| inputs.alpha2[k])
                .sum();
            let q1 = 3.0 * cf * w2 * p2 * a
                + 8.0 * e * e * g * g
                + 6.0 * l * gamma_gap
                + alpha2_sum / (kc * kc)
                + 4.0 * d * sigma2[h] * e * e * g * g / (p1 * kc * kc)
                + d * kappa2[h] * a;
            HeadConstants {
                head: h,
                cluster_size: kc as usize,
                alpha2_sum,
                w_row: row,
                sigma2: sigma2[h],
                a,
                q1,
            }
        })
        .collect();
    Ok(TheoremConstants {
        lipschitz: l,
        mu,
        g,
        gamma_gap,
        gamma: e.max(12.0 * l / mu),
        epochs,
        p1,
        p2,
        dim,
        clusters: c,
        sigma2,
        heads,
    })
}

impl TheoremConstants {
    /// `η^t = 2 / (μ(γ + t))`
    pub fn eta(&self, t: usize) -> f64 {
        2.0 / (self.mu * (self.gamma + t as f64))
    }

    pub fn max_a(&self) -> f64 {
        self.heads.iter().map(|h| h.a).fold(0.0, f64::max)
    }

    pub fn worst_q1(&self) -> f64 {
        self.heads.iter().map(|h| h.q1).fold(0.0, f64::max)
    }

    /// `2·max(4Q1, μ²γδ⁰) / (μ²(t + γ − 1))` for a given `Q1`.
    pub fn bound_with(&self, q1: f64, t: usize, delta0: f64) -> f64 {
        let mu2 = self.mu * self.mu;
        2.0 * (4.0 * q1).max(mu2 * self.gamma * delta0) / (mu2 * (t as f64 + self.gamma - 1.0))
    }

    pub fn bound(&self, head: usize, t: usize, delta0: f64) -> f64 {
        self.bound_with(self.heads[head].q1, t, delta0)
    }

    /// The worst head's bound.
    pub fn worst_bound(&self, t: usize, delta0: f64) -> f64 {
        self.bound_with(self.worst_q1(), t, delta0)
    }

    /// Checks `η^t ≤ 2η^{t+E}` and `η^t ≤ 1/(6L)` for every `t` in `0..=steps`.
    pub fn check_schedule(&self, steps: usize) -> ScheduleCheck {
        let mut check = ScheduleCheck {
            halving: true,
            smoothness: true,
        };
        for t in 0..=steps {
            let eta = self.eta(t);
            if eta > 2.0 * self.eta(t + self.epochs) {
                check.halving = false;
            }
            if eta > 1.0 / (6.0 * self.lipschitz) * (1.0 + 1e-12) {
                check.smoothness = false;
            }
        }
        check
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleCheck {
    pub halving: bool,
    pub smoothness: bool,
}
