//! Instances, client shards, synthetic generation and non-IID partitioning.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ObjectiveError;
use crate::rng::{stream, StreamKind};

/// One input/output pair. Classification tasks store the class id in `label`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Instance {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        Self { features, label }
    }

    pub fn class(&self) -> usize {
        self.label as usize
    }
}

/// A labelled dataset with uniform feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub num_features: usize,
    /// Zero for regression data.
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        instances: Vec<Instance>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self, ObjectiveError> {
        for (i, inst) in instances.iter().enumerate() {
            if inst.features.len() != num_features {
                return Err(ObjectiveError::Dimension {
                    expected: num_features,
                    got: inst.features.len(),
                });
            }
            if num_classes > 0
                && (inst.label < 0.0
                    || inst.label.fract() != 0.0
                    || inst.label as usize >= num_classes)
            {
                return Err(ObjectiveError::Label {
                    index: i,
                    label: inst.label,
                });
            }
        }
        Ok(Self {
            instances,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Seeded split into (train, held-out) with `ceil(fraction · n)` held-out
    /// instances.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream(seed, StreamKind::Split, &[]));
        let n_test = ((self.len() as f64) * fraction.clamp(0.0, 1.0)).ceil() as usize;
        let pick = |idx: &[usize]| Dataset {
            instances: idx.iter().map(|&i| self.instances[i].clone()).collect(),
            num_features: self.num_features,
            num_classes: self.num_classes,
        };
        (pick(&order[n_test..]), pick(&order[..n_test]))
    }
}

/// A client's local dataset `D_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub instances: Vec<Instance>,
}

impl ClientShard {
    pub fn new(client_id: usize, instances: Vec<Instance>) -> Result<Self, ObjectiveError> {
        if instances.is_empty() {
            return Err(ObjectiveError::EmptyShard(client_id));
        }
        Ok(Self {
            client_id,
            instances,
        })
    }

    /// `N_k`
    pub fn size(&self) -> usize {
        self.instances.len()
    }

    /// Distinct class ids present in the shard.
    pub fn classes(&self) -> BTreeSet<usize> {
        self.instances.iter().map(Instance::class).collect()
    }
}

/// Per-client least-squares problems `y = z·θ_k + ε`.
///
/// Every client's ground truth is `(1 − h)·θ_shared + h·θ_own(k)`, so
/// `heterogeneity = 0` draws all clients from one distribution and
/// `heterogeneity = 1` gives each client its own parameter. Features are
/// standard normal and the label noise has standard deviation 0.5.
pub fn generate_synthetic_quadratic(
    seed: u64,
    clients: usize,
    per_client_size: usize,
    features: usize,
    heterogeneity: f64,
) -> Result<Vec<ClientShard>, ObjectiveError> {
    if clients == 0 || per_client_size == 0 || features == 0 {
        return Err(ObjectiveError::Sizing(format!(
            "K={clients}, per_client_size={per_client_size}, m={features} must all be >= 1"
        )));
    }
    if !(0.0..=1.0).contains(&heterogeneity) {
        return Err(ObjectiveError::Sizing(format!(
            "heterogeneity {heterogeneity} outside [0, 1]"
        )));
    }
    const LABEL_NOISE_STD: f64 = 0.5;
    let mut rng = stream(seed, StreamKind::Data, &[0]);
    let shared: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
    (0..clients)
        .map(|k| {
            let mut rng = stream(seed, StreamKind::Data, &[1 + k as u64]);
            let own: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
            let truth: Vec<f64> = shared
                .iter()
                .zip(&own)
                .map(|(s, o)| (1.0 - heterogeneity) * s + heterogeneity * o)
                .collect();
            let instances = (0..per_client_size)
                .map(|_| {
                    let z: Vec<f64> = (0..features).map(|_| rng.sample(StandardNormal)).collect();
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let y = z.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>()
                        + LABEL_NOISE_STD * noise;
                    Instance::new(z, y)
                })
                .collect();
            ClientShard::new(k, instances)
        })
        .collect()
}

/// Label-skew partition: each client draws `classes_per_client` distinct
/// classes uniformly at random, then every class's instances are dealt out
/// evenly (in shuffled order) among the clients holding that class. Classes
/// nobody drew are dropped.
pub fn shard_by_label_skew(
    dataset: &Dataset,
    clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientShard>, ObjectiveError> {
    if classes_per_client < 1 {
        return Err(ObjectiveError::Sizing(
            "classes_per_client must be >= 1".into(),
        ));
    }
    if dataset.is_empty() || dataset.num_classes == 0 {
        return Err(ObjectiveError::Sizing(
            "label skew needs a nonempty classification dataset".into(),
        ));
    }
    if classes_per_client > dataset.num_classes {
        return Err(ObjectiveError::Sizing(format!(
            "classes_per_client {classes_per_client} exceeds num_classes {}",
            dataset.num_classes
        )));
    }
    if clients == 0 {
        return Err(ObjectiveError::Sizing("K must be >= 1".into()));
    }
    let mut rng = stream(seed, StreamKind::Data, &[u64::MAX]);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, inst) in dataset.instances.iter().enumerate() {
        by_class[inst.class()].push(i);
    }
    let present: Vec<usize> = (0..dataset.num_classes)
        .filter(|&c| !by_class[c].is_empty())
        .collect();

    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for k in 0..clients {
        let take = classes_per_client.min(present.len());
        for &c in present.choose_multiple(&mut rng, take) {
            holders[c].push(k);
        }
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (class, idx) in by_class.iter_mut().enumerate() {
        let owners = &holders[class];
        if owners.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let m = owners.len();
        for (j, &k) in owners.iter().enumerate() {
            let lo = j * n / m;
            let hi = (j + 1) * n / m;
            assigned[k].extend_from_slice(&idx[lo..hi]);
        }
    }

    assigned
        .into_iter()
        .enumerate()
        .map(|(k, mut idx)| {
            idx.sort_unstable();
            ClientShard::new(
                k,
                idx.into_iter()
                    .map(|i| dataset.instances[i].clone())
                    .collect(),
            )
        })
        .collect()
}

/// Writes instances as `label,f1,f2,...` lines.
pub fn write_instances<W: Write>(out: &mut W, instances: &[Instance]) -> std::io::Result<()> {
    for inst in instances {
        write!(out, "{}", inst.label)?;
        for f in &inst.features {
            write!(out, ",{f}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads the line format produced by [`write_instances`]. Blank lines are
/// skipped.
pub fn read_instances<R: BufRead>(input: R) -> Result<Vec<Instance>, ObjectiveError> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| ObjectiveError::Format {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut values = line.split(',').map(|s| {
            s.trim().parse::<f64>().map_err(|e| ObjectiveError::Format {
                line: lineno + 1,
                msg: format!("{s:?}: {e}"),
            })
        });
        let label = values.next().expect("split yields at least one item")?;
        let features = values.collect::<Result<Vec<_>, _>>()?;
        out.push(Instance::new(features, label));
    }
    Ok(out)
}
