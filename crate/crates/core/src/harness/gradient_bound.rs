//! Empirical gradient-norm bound and per-client stochastic-gradient variance.

use serde::Serialize;

use super::HarnessError;
use crate::objectives::{local_gradient, sgd_step, BatchSampler, Instance};
use crate::protocols::{initial_model, ProtocolConfig};
use crate::rng::{stream, StreamKind};
use crate::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientBound {
    /// `safety × max_norm`
    pub g: f64,
    /// Largest stochastic-gradient norm seen during warm-up.
    pub max_norm: f64,
    /// Largest full-batch gradient norm seen during warm-up.
    pub max_full_norm: f64,
    /// `α_k²` per client at `θ⁰`.
    pub alpha2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupOptions {
    pub safety: f64,
    /// Local SGD steps per client along which norms are recorded.
    pub steps: usize,
    /// Mini-batches drawn at `θ⁰` to estimate `α_k²`.
    pub variance_draws: usize,
}

impl Default for WarmupOptions {
    fn default() -> Self {
        Self {
            safety: 1.5,
            steps: 200,
            variance_draws: 200,
        }
    }
}

fn full_gradient(
    cfg: &ProtocolConfig,
    k: usize,
    theta: &ParamVector,
) -> Result<ParamVector, HarnessError> {
    let all: Vec<&Instance> = cfg.shards[k].instances.iter().collect();
    Ok(local_gradient(&cfg.model, theta, &all, None)?)
}

/// Each client runs `opts.steps` plain local SGD steps from the run's `θ⁰`
/// with the configured schedule and batch size, recording stochastic and
/// full-batch gradient norms. When `θ*` is known, gradients there are
/// included too.
pub fn estimate_gradient_bound(
    cfg: &ProtocolConfig,
    seed: u64,
    opts: WarmupOptions,
) -> Result<GradientBound, HarnessError> {
    if !(opts.safety >= 1.0) {
        return Err(HarnessError::Invalid(format!(
            "safety factor must be >= 1, got {}",
            opts.safety
        )));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.seed = seed;
    let theta0 = initial_model(&run_cfg)?;
    let mut max_norm = 0.0f64;
    let mut max_full = 0.0f64;
    let mut alpha2 = Vec::with_capacity(cfg.shards.len());
    for (k, shard) in cfg.shards.iter().enumerate() {
        let mut sampler = BatchSampler::new(
            shard.size(),
            cfg.batch_size,
            stream(seed, StreamKind::Warmup, &[k as u64]),
        );
        let batch_of = |s: &mut BatchSampler| -> Vec<&Instance> {
            s.next_batch()
                .iter()
                .map(|&i| &shard.instances[i])
                .collect()
        };

        let full0 = full_gradient(cfg, k, &theta0)?;
        max_full = max_full.max(full0.norm());
        let draws = opts.variance_draws.max(1);
        let mut var = 0.0;
        for _ in 0..draws {
            let g = local_gradient(&cfg.model, &theta0, &batch_of(&mut sampler), None)?;
            max_norm = max_norm.max(g.norm());
            var += g.dist_sq(&full0);
        }
        alpha2.push(var / draws as f64);

        let mut theta = theta0.clone();
        for t in 0..opts.steps {
            let g = local_gradient(&cfg.model, &theta, &batch_of(&mut sampler), None)?;
            max_norm = max_norm.max(g.norm());
            theta = sgd_step(&theta, &g, cfg.learning_rate.eta(t))?;
        }
        max_full = max_full.max(full_gradient(cfg, k, &theta)?.norm());

        if let Some(star) = &cfg.eval.theta_star {
            for _ in 0..draws {
                let g = local_gradient(&cfg.model, star, &batch_of(&mut sampler), None)?;
                max_norm = max_norm.max(g.norm());
            }
            max_full = max_full.max(full_gradient(cfg, k, star)?.norm());
        }
    }
    let max_norm = max_norm.max(max_full);
    Ok(GradientBound {
        g: opts.safety * max_norm,
        max_norm,
        max_full_norm: max_full,
        alpha2,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::objectives::{generate_synthetic_quadratic, ClientShard, ModelSpec};
    use crate::protocols::{schedule_aggregations, LearningRate, ProtocolKind};

    fn cfg(shards: Vec<ClientShard>, m: usize) -> ProtocolConfig {
        let mut c = ProtocolConfig::new(
            ProtocolKind::Cotaf,
            ModelSpec::ridge(m, 0.1).unwrap(),
            Arc::new(shards),
            schedule_aggregations(10, 2).unwrap(),
            LearningRate::Constant(0.05),
            1,
        )
        .unwrap();
        c.batch_size = 2;
        c
    }

    #[test]
    fn repeated_instance_has_no_variance() {
        let shards = (0..3)
            .map(|k| {
                ClientShard::new(k, vec![Instance::new(vec![1.0, -0.5], k as f64); 6]).unwrap()
            })
            .collect();
        let b = estimate_gradient_bound(&cfg(shards, 2), 4, WarmupOptions::default()).unwrap();
        assert!(b.alpha2.iter().all(|&a| a < 1e-12));
    }

    #[test]
    fn g_dominates_full_batch_norms() {
        let shards = generate_synthetic_quadratic(3, 5, 20, 4, 0.5).unwrap();
        let b = estimate_gradient_bound(&cfg(shards, 4), 2, WarmupOptions::default()).unwrap();
        assert!(b.g >= b.max_full_norm);
        assert!(b.g >= 1.5 * b.max_norm - 1e-12);
        assert!(b.alpha2.iter().all(|&a| a > 0.0));
    }

    #[test]
    fn scaling_features_raises_g() {
        let shards = generate_synthetic_quadratic(3, 5, 20, 4, 0.5).unwrap();
        let doubled: Vec<ClientShard> = shards
            .iter()
            .map(|s| {
                let inst = s
                    .instances
                    .iter()
                    .map(|i| Instance::new(i.features.iter().map(|x| 2.0 * x).collect(), i.label))
                    .collect();
                ClientShard::new(s.client_id, inst).unwrap()
            })
            .collect();
        let opts = WarmupOptions::default();
        let a = estimate_gradient_bound(&cfg(shards, 4), 2, opts).unwrap();
        let b = estimate_gradient_bound(&cfg(doubled, 4), 2, opts).unwrap();
        assert!(b.g > a.g);
    }
}
