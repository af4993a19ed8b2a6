use proptest::prelude::*;

use otafl::channel::effective_noise_variance;
use otafl::harness::report::{read_csv, write_csv};
use otafl::objectives::idx::encode_idx;
use otafl::objectives::{
    batch_loss, local_gradient, parse_idx, IdxTensor, Instance, ModelSpec, ProxConfig,
};
use otafl::protocols::{LearningRate, MetricsRow, ProtocolKind, RunTrace};
use otafl::topology::{mixing_ring, mixing_uniform_complete, random_clusters, validate_mixing};
use otafl::ParamVector;

#[derive(Debug, Clone)]
struct GradientCase {
    spec: ModelSpec,
    params: Vec<f64>,
    batch: Vec<Instance>,
    prox: Option<(f64, Vec<f64>)>,
}

fn model_spec() -> impl Strategy<Value = ModelSpec> {
    (0usize..3, 1usize..5, 2usize..5, 1usize..4, 1e-3f64..0.5).prop_map(|(kind, m, c, h, l2)| {
        match kind {
            0 => ModelSpec::ridge(m, l2).unwrap(),
            1 => ModelSpec::logistic(m, c, l2).unwrap(),
            _ => ModelSpec::mlp(m, h, c, l2).unwrap(),
        }
    })
}

fn gradient_case() -> impl Strategy<Value = GradientCase> {
    model_spec().prop_flat_map(|spec| {
        let d = spec.dim();
        let m = spec.features;
        let label = if spec.is_classifier() {
            (0..spec.classes).prop_map(|c| c as f64).boxed()
        } else {
            (-3.0f64..3.0).boxed()
        };
        let instance =
            (prop::collection::vec(-2.0f64..2.0, m), label).prop_map(|(z, y)| Instance::new(z, y));
        let prox = prop::option::of((1e-3f64..2.0, prop::collection::vec(-1.0f64..1.0, d)));
        (
            Just(spec),
            prop::collection::vec(-1.0f64..1.0, d),
            prop::collection::vec(instance, 1..6),
            prox,
        )
            .prop_map(|(spec, params, batch, prox)| GradientCase {
                spec,
                params,
                batch,
                prox,
            })
    })
}

/// Central differences with step `1e-5`.
fn numeric_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &[&Instance],
    prox: Option<&ProxConfig>,
) -> Vec<f64> {
    let h = 1e-5;
    (0..params.len())
        .map(|i| {
            let mut plus = params.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let fp = batch_loss(spec, &ParamVector::new(plus), batch, prox).unwrap();
            let fm = batch_loss(spec, &ParamVector::new(minus), batch, prox).unwrap();
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn analytic_gradients_match_central_differences(case in gradient_case()) {
        let params = ParamVector::new(case.params.clone());
        let batch: Vec<&Instance> = case.batch.iter().collect();
        let prox = case.prox.clone().map(|(l, a)| ProxConfig::new(l, ParamVector::new(a)).unwrap());
        let analytic = local_gradient(&case.spec, &params, &batch, prox.as_ref()).unwrap();
        let numeric = numeric_gradient(&case.spec, &params, &batch, prox.as_ref());
        let diff: Vec<f64> = analytic.as_slice().iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(analytic.as_slice()).max(norm(&numeric)).max(1e-8);
        prop_assert!(norm(&diff) / scale < 1e-6, "relative error {}", norm(&diff) / scale);
    }
}

proptest! {
    #[test]
    fn idx_round_trips(shape in prop::collection::vec(1usize..5, 1..4), fill in any::<u8>(), salt in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<u8> = (0..n).map(|i| fill ^ ((salt >> (i % 57)) as u8).wrapping_add(i as u8)).collect();
        let tensor = IdxTensor { shape, data };
        let bytes = encode_idx(&tensor);
        prop_assert_eq!(parse_idx(&bytes).unwrap(), tensor);
        // Any truncation is rejected.
        prop_assert!(parse_idx(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn random_clusters_partition_the_clients(clients in 1usize..80, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let clusters = 1 + ((clients - 1) as f64 * frac) as usize;
        let layout = random_clusters(clients, clusters, seed).unwrap();
        prop_assert_eq!(layout.num_clusters(), clusters);
        let mut seen = vec![0usize; clients];
        for c in 0..clusters {
            prop_assert!(!layout.members(c).is_empty());
            for &k in layout.members(c) {
                seen[k] += 1;
                prop_assert_eq!(layout.cluster_of(k), c);
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        let sizes = layout.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn effective_noise_never_exceeds_the_worst_link(
        raw in prop::collection::vec(0.0f64..1.0, 2..8),
        sigma2 in prop::collection::vec(0.0f64..5.0, 8),
    ) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let row: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let sigma2 = &sigma2[..row.len()];
        let kappa = effective_noise_variance(&row, sigma2).unwrap();
        let worst = sigma2.iter().copied().fold(0.0, f64::max);
        let best = sigma2.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(kappa <= worst * (1.0 + 1e-12));
        prop_assert!(kappa >= best * (1.0 - 1e-12));
    }

    #[test]
    fn theorem_schedule_invariants(
        lipschitz in 0.1f64..20.0,
        ratio in 1.0f64..50.0,
        epochs in 1usize..20,
    ) {
        let mu = lipschitz / ratio;
        let gamma = (epochs as f64).max(12.0 * lipschitz / mu);
        let lr = LearningRate::Theorem { mu, gamma };
        for t in 0..2000 {
            prop_assert!(lr.eta(t) <= 2.0 * lr.eta(t + epochs));
            prop_assert!(lr.eta(t) <= 1.0 / (6.0 * lipschitz) * (1.0 + 1e-12));
            prop_assert!(lr.eta(t + 1) < lr.eta(t));
        }
    }

    #[test]
    fn builtin_mixing_matrices_are_valid(heads in 3usize..30) {
        prop_assert!(validate_mixing(&mixing_ring(heads).unwrap()).all_pass());
        prop_assert!(validate_mixing(&mixing_uniform_complete(heads)).all_pass());
    }

    #[test]
    fn csv_rows_round_trip(
        values in prop::collection::vec(prop::option::of(-1e6f64..1e6), 7),
        t in 0usize..100000,
        head in 0usize..10,
        uses in 0u64..1_000_000,
        seed in any::<u64>(),
    ) {
        let row = MetricsRow {
            t,
            head,
            delta: values[0],
            loss: values[1],
            accuracy: values[2],
            channel_uses: uses,
            p_t: values[3],
            q_t: values[4],
            max_uplink_energy: values[5],
            max_consensus_energy: values[6],
        };
        let trace = RunTrace {
            protocol: ProtocolKind::CwflProx,
            seed,
            rows: vec![row.clone()],
            initial: ParamVector::zeros(1),
            final_heads: vec![],
            final_clients: vec![],
            aggregation_slots: 0,
            total_channel_uses: uses,
            saturated_slots: 0,
            precode_order_violations: 0,
            snapshots: vec![],
        };
        let mut buf = Vec::new();
        write_csv(&[trace], &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(back[0].protocol, ProtocolKind::CwflProx);
        prop_assert_eq!(back[0].seed, seed);
        prop_assert_eq!(&back[0].row, &row);
    }
}
