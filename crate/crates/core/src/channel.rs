//! Analog over-the-air signalling on an AWGN multiple-access channel.
//!
//! Two exchanges are modelled:
//! - the intra-cluster uplink, where clients transmit `x_k = √p·(θ_k − θ_anchor)`
//!   simultaneously and the head receives `y = Σ x_k + w`;
//! - the inter-head exchange, where head `c` transmits `s_c = √q·θ̃_c` and
//!   receives `r_c = Σ_j W(c,j)·s_j + v_c` with `v_c ~ N(0, κ_c²·I)` and
//!   `κ_c² = Σ_j W(c,j)·σ_j²`.
//!
//! The precoding factors `p`, `q` are recomputed every aggregation slot so that
//! the largest transmit energy equals the power budget.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamVector;
use crate::rng::{stream, StreamKind, StreamRng};

/// Precoding factor used when every transmitted vector is zero.
pub const DEFAULT_HEADROOM_CAP: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("noise variance must be >= 0, got {0}")]
    NegativeVariance(f64),
    #[error("power budget must be > 0, got {0}")]
    InvalidPower(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("no signals to combine")]
    Empty,
    #[error("precoding factor must be finite and > 0, got {0}")]
    InvalidFactor(f64),
    #[error("cluster size must be >= 1")]
    EmptyCluster,
    #[error("mixing row has nonzero self weight {0} at the receiver")]
    SelfWeight(f64),
    #[error("unknown decode mode {0:?} (expected \"normalized\" or \"literal\")")]
    UnknownMode(String),
}

/// Power budgets and per-receiver noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEnv {
    /// Uplink budget `P1`.
    pub p1: f64,
    /// Inter-head budget `P2`.
    pub p2: f64,
    /// Noise variance at each receiver (cluster-heads, the server, or clients,
    /// depending on the protocol).
    pub sigma2: Vec<f64>,
    pub noise_seed: u64,
}

impl ChannelEnv {
    pub fn new(p1: f64, p2: f64, sigma2: Vec<f64>, noise_seed: u64) -> Result<Self, ChannelError> {
        for p in [p1, p2] {
            if !(p > 0.0) || !p.is_finite() {
                return Err(ChannelError::InvalidPower(p));
            }
        }
        if let Some(&bad) = sigma2.iter().find(|s| !(**s >= 0.0)) {
            return Err(ChannelError::NegativeVariance(bad));
        }
        Ok(Self {
            p1,
            p2,
            sigma2,
            noise_seed,
        })
    }

    /// Noise variance at receiver `i`; a single entry applies to all receivers.
    pub fn variance(&self, i: usize) -> f64 {
        match self.sigma2.len() {
            0 => 0.0,
            1 => self.sigma2[0],
            _ => self.sigma2[i],
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.sigma2.iter().all(|&s| s == 0.0)
    }

    /// Independent noise stream for one receiver in one slot.
    pub fn stream(&self, kind: StreamKind, round: usize, receiver: usize) -> StreamRng {
        stream(self.noise_seed, kind, &[round as u64, receiver as u64])
    }
}

/// i.i.d. `N(0, variance)` vector. Zero variance gives an exact zero vector
/// without consuming the stream.
pub fn sample_noise(
    dim: usize,
    variance: f64,
    rng: &mut StreamRng,
) -> Result<ParamVector, ChannelError> {
    if !(variance >= 0.0) {
        return Err(ChannelError::NegativeVariance(variance));
    }
    if variance == 0.0 {
        return Ok(ParamVector::zeros(dim));
    }
    let std = variance.sqrt();
    Ok(ParamVector::new(
        (0..dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    ))
}

/// A realized precoding factor. `saturated` marks the degenerate slot in which
/// every transmitted vector was zero; the factor is then the configured cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecodeFactor {
    pub value: f64,
    pub saturated: bool,
}

impl PrecodeFactor {
    pub fn finite(value: f64) -> Result<Self, ChannelError> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(ChannelError::InvalidFactor(value));
        }
        Ok(Self {
            value,
            saturated: false,
        })
    }
}

fn power_normalizer<'a, I>(vectors: I, budget: f64, cap: f64) -> Result<PrecodeFactor, ChannelError>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(ChannelError::InvalidPower(budget));
    }
    let mut count = 0usize;
    let mut max_sq = 0.0f64;
    for v in vectors {
        count += 1;
        max_sq = max_sq.max(v.norm_sq());
    }
    if count == 0 {
        return Err(ChannelError::Empty);
    }
    if max_sq == 0.0 {
        return Ok(PrecodeFactor {
            value: cap,
            saturated: true,
        });
    }
    PrecodeFactor::finite(budget / max_sq)
}

/// `p = P1 / max_k ‖Δ_k‖²` over the realized client deltas.
pub fn uplink_precode_factor(
    deltas: &[ParamVector],
    p1: f64,
    cap: f64,
) -> Result<PrecodeFactor, ChannelError> {
    power_normalizer(deltas, p1, cap)
}

/// `q = P2 / max_c ‖θ̃_c‖²` over the realized head parameters.
pub fn consensus_precode_factor(
    heads: &[ParamVector],
    p2: f64,
    cap: f64,
) -> Result<PrecodeFactor, ChannelError> {
    power_normalizer(heads, p2, cap)
}

fn check_factor(f: f64) -> Result<(), ChannelError> {
    if !(f > 0.0) || !f.is_finite() {
        return Err(ChannelError::InvalidFactor(f));
    }
    Ok(())
}

fn check_dim(expected: usize, got: usize) -> Result<(), ChannelError> {
    if expected != got {
        return Err(ChannelError::Dimension { expected, got });
    }
    Ok(())
}

/// `x_k = √p·(θ_k − θ_anchor)`
pub fn encode_client(
    theta: &ParamVector,
    anchor: &ParamVector,
    p: f64,
) -> Result<ParamVector, ChannelError> {
    check_factor(p)?;
    check_dim(anchor.len(), theta.len())?;
    let mut x = theta.sub(anchor);
    x.scale(p.sqrt());
    Ok(x)
}

/// `s_c = √q·θ̃_c`
pub fn encode_head(theta_tilde: &ParamVector, q: f64) -> Result<ParamVector, ChannelError> {
    check_factor(q)?;
    Ok(theta_tilde.scaled(q.sqrt()))
}

/// Superposition `Σ x_k + w`, accumulated in slice order.
pub fn mac_superpose(
    signals: &[ParamVector],
    noise: &ParamVector,
) -> Result<ParamVector, ChannelError> {
    let dim = noise.len();
    let mut y = ParamVector::zeros(dim);
    for s in signals {
        check_dim(dim, s.len())?;
        y.axpy(1.0, s);
    }
    y.axpy(1.0, noise);
    Ok(y)
}

/// `θ̃_c = y / (K_c·√p) + θ_prev`
pub fn decode_cluster(
    y: &ParamVector,
    cluster_size: usize,
    p: f64,
    theta_prev: &ParamVector,
) -> Result<ParamVector, ChannelError> {
    if cluster_size == 0 {
        return Err(ChannelError::EmptyCluster);
    }
    check_factor(p)?;
    check_dim(theta_prev.len(), y.len())?;
    let mut out = theta_prev.clone();
    out.axpy(1.0 / (cluster_size as f64 * p.sqrt()), y);
    Ok(out)
}

/// `r_c = Σ_j W(c,j)·s_j + v_c` at receiver `c`.
pub fn exchange_receive(
    head_signals: &[ParamVector],
    mixing_row: &[f64],
    receiver: usize,
    noise: &ParamVector,
) -> Result<ParamVector, ChannelError> {
    check_dim(head_signals.len(), mixing_row.len())?;
    if let Some(&w) = mixing_row.get(receiver) {
        if w != 0.0 {
            return Err(ChannelError::SelfWeight(w));
        }
    }
    let mut r = ParamVector::zeros(noise.len());
    for (s, &w) in head_signals.iter().zip(mixing_row) {
        check_dim(noise.len(), s.len())?;
        if w != 0.0 {
            r.axpy(w, s);
        }
    }
    r.axpy(1.0, noise);
    Ok(r)
}

/// `κ_c² = Σ_j W(c,j)·σ_j²`
pub fn effective_noise_variance(mixing_row: &[f64], sigma2: &[f64]) -> Result<f64, ChannelError> {
    check_dim(mixing_row.len(), sigma2.len())?;
    Ok(mixing_row.iter().zip(sigma2).map(|(w, s)| w * s).sum())
}

/// Consensus noise assembled link by link: link `j` contributes
/// `√W(c,j)·n_j` with `n_j ~ N(0, σ_j²)`, so the sum has variance `κ_c²`.
pub fn per_link_noise(
    dim: usize,
    mixing_row: &[f64],
    sigma2: &[f64],
    rng: &mut StreamRng,
) -> Result<ParamVector, ChannelError> {
    check_dim(mixing_row.len(), sigma2.len())?;
    let mut v = ParamVector::zeros(dim);
    for (&w, &s) in mixing_row.iter().zip(sigma2) {
        if w != 0.0 {
            let n = sample_noise(dim, s, rng)?;
            v.axpy(w.sqrt(), &n);
        }
    }
    Ok(v)
}

/// How the head combines its own estimate with the neighbour sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// `(θ̃_c + r_c/√q) / (1 + Σ_j W(c,j))`, a convex combination.
    #[default]
    Normalized,
    /// `θ̃_c + r_c/√q` as written, which has no consensus fixed point when
    /// rows of `W` sum to one.
    Literal,
}

impl FromStr for DecodeMode {
    type Err = ChannelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "literal" => Ok(Self::Literal),
            other => Err(ChannelError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Literal => "literal",
        })
    }
}

pub fn decode_consensus(
    theta_tilde: &ParamVector,
    r: &ParamVector,
    q: f64,
    mixing_row: &[f64],
    mode: DecodeMode,
) -> Result<ParamVector, ChannelError> {
    check_factor(q)?;
    check_dim(theta_tilde.len(), r.len())?;
    let mut out = theta_tilde.clone();
    out.axpy(1.0 / q.sqrt(), r);
    if mode == DecodeMode::Normalized {
        out.scale(1.0 / (1.0 + mixing_row.iter().sum::<f64>()));
    }
    Ok(out)
}

/// `σ² = power / 10^(snr_db/10)`
pub fn snr_to_variance(power: f64, snr_db: f64) -> Result<f64, ChannelError> {
    if !(power > 0.0) || !power.is_finite() {
        return Err(ChannelError::InvalidPower(power));
    }
    Ok(power / 10f64.powf(snr_db / 10.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from(v.to_vec())
    }

    fn rng(key: u64) -> StreamRng {
        stream(42, StreamKind::UplinkNoise, &[key])
    }

    #[test]
    fn zero_variance_is_exact_zero() {
        assert_eq!(
            sample_noise(4, 0.0, &mut rng(0)).unwrap(),
            ParamVector::zeros(4)
        );
        assert_eq!(
            sample_noise(4, -1.0, &mut rng(0)),
            Err(ChannelError::NegativeVariance(-1.0))
        );
    }

    #[test]
    fn noise_variance_and_replay() {
        // 1e5 draws; chi-square sd of the sample variance is 2·sqrt(2/n) ≈ 0.009.
        let v = sample_noise(100_000, 2.0, &mut rng(1)).unwrap();
        let mean = v.as_slice().iter().sum::<f64>() / v.len() as f64;
        let var =
            v.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((1.96..=2.04).contains(&var), "{var}");
        assert_eq!(
            sample_noise(16, 2.0, &mut rng(5)).unwrap(),
            sample_noise(16, 2.0, &mut rng(5)).unwrap()
        );
    }

    #[test]
    fn uplink_factor_formula_and_scale_invariance() {
        let deltas = vec![pv(&[2.0, 0.0]), pv(&[1.0, 1.0])];
        let p = uplink_precode_factor(&deltas, 1.0, DEFAULT_HEADROOM_CAP).unwrap();
        assert_eq!(p.value, 0.25);
        let anchor = ParamVector::zeros(2);
        let x: Vec<_> = deltas
            .iter()
            .map(|d| encode_client(d, &anchor, p.value).unwrap())
            .collect();
        let max_e = x.iter().map(ParamVector::norm_sq).fold(0.0, f64::max);
        assert!((max_e - 1.0).abs() < 1e-15);

        let alpha = 3.0;
        let scaled: Vec<_> = deltas.iter().map(|d| d.scaled(alpha)).collect();
        let ps = uplink_precode_factor(&scaled, 1.0, DEFAULT_HEADROOM_CAP).unwrap();
        assert!((ps.value - p.value / (alpha * alpha)).abs() < 1e-15);
        for (d, xk) in scaled.iter().zip(&x) {
            let xs = encode_client(d, &anchor, ps.value).unwrap();
            assert!(xs.dist_sq(xk) < 1e-24);
        }
    }

    #[test]
    fn zero_deltas_use_headroom_sentinel() {
        let p = uplink_precode_factor(&[ParamVector::zeros(3)], 1.0, 1e6).unwrap();
        assert!(p.saturated);
        assert_eq!(p.value, 1e6);
        let x = encode_client(&ParamVector::zeros(3), &ParamVector::zeros(3), p.value).unwrap();
        assert_eq!(x, ParamVector::zeros(3));
        assert_eq!(
            uplink_precode_factor(&[], 1.0, 1e6),
            Err(ChannelError::Empty)
        );
    }

    #[test]
    fn encode_examples() {
        let a = pv(&[0.5, -1.0]);
        assert_eq!(encode_client(&a, &a, 2.0).unwrap(), ParamVector::zeros(2));
        let x = encode_client(&pv(&[1.0, 0.0]), &ParamVector::zeros(2), 4.0).unwrap();
        assert_eq!(x.as_slice(), &[2.0, 0.0]);
        let d = pv(&[0.3, 0.4]);
        let x = encode_client(&d, &ParamVector::zeros(2), 7.0).unwrap();
        assert!((x.norm_sq() - 7.0 * d.norm_sq()).abs() < 1e-14);
    }

    #[test]
    fn superpose_examples() {
        let y = mac_superpose(&[pv(&[1.0, 2.0]), pv(&[3.0, 4.0])], &pv(&[0.5, -0.5])).unwrap();
        assert_eq!(y.as_slice(), &[4.5, 5.5]);
        let single = pv(&[1.5, -2.0]);
        assert_eq!(
            mac_superpose(std::slice::from_ref(&single), &ParamVector::zeros(2)).unwrap(),
            single
        );
        assert!(mac_superpose(&[pv(&[1.0])], &ParamVector::zeros(2)).is_err());
    }

    #[test]
    fn decode_cluster_examples() {
        let prev = pv(&[1.0, 1.0]);
        let (a, b) = (pv(&[1.0, 0.0]), pv(&[0.0, 3.0]));
        let p = 0.5;
        let x: Vec<_> = [prev.add(&a), prev.add(&b)]
            .iter()
            .map(|t| encode_client(t, &prev, p).unwrap())
            .collect();
        let y = mac_superpose(&x, &ParamVector::zeros(2)).unwrap();
        let out = decode_cluster(&y, 2, p, &prev).unwrap();
        assert!(out.dist_sq(&pv(&[1.5, 2.5])) < 1e-24);
        assert_eq!(
            decode_cluster(&y, 0, p, &prev),
            Err(ChannelError::EmptyCluster)
        );
    }

    #[test]
    fn consensus_factor_examples() {
        let q = consensus_precode_factor(
            &[pv(&[2.0, 2.0]), pv(&[1.0, 0.0])],
            2.0,
            DEFAULT_HEADROOM_CAP,
        )
        .unwrap();
        assert_eq!(q.value, 0.25);
        let heads = [pv(&[2.0, 2.0]), pv(&[1.0, 0.0])];
        let max_e = heads
            .iter()
            .map(|h| encode_head(h, q.value).unwrap().norm_sq())
            .fold(0.0, f64::max);
        assert!((max_e - 2.0).abs() < 1e-15);
        let q = consensus_precode_factor(&[pv(&[0.6, 0.8])], 1.0, DEFAULT_HEADROOM_CAP).unwrap();
        assert!((q.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exchange_examples() {
        let s = vec![pv(&[1.0, 2.0]), pv(&[3.0, 5.0]), pv(&[-1.0, 1.0])];
        let v = pv(&[0.1, 0.2]);
        assert_eq!(exchange_receive(&s, &[0.0, 0.0, 0.0], 0, &v).unwrap(), v);
        let r = exchange_receive(&s[..2], &[0.0, 1.0], 0, &v).unwrap();
        assert!(r.dist_sq(&pv(&[3.1, 5.2])) < 1e-24);
        let r = exchange_receive(&s, &[0.0, 0.5, 0.5], 0, &ParamVector::zeros(2)).unwrap();
        assert_eq!(r.as_slice(), &[1.0, 3.0]);
        assert_eq!(
            exchange_receive(&s, &[0.2, 0.4, 0.4], 0, &v),
            Err(ChannelError::SelfWeight(0.2))
        );
    }

    #[test]
    fn effective_variance_examples() {
        assert_eq!(
            effective_noise_variance(&[0.0, 0.5, 0.5], &[1.0, 2.0, 4.0]).unwrap(),
            3.0
        );
        let row = [0.0, 0.25, 0.25, 0.5];
        assert!((effective_noise_variance(&row, &[0.7; 4]).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn consensus_decode_modes() {
        let theta = pv(&[1.0, -2.0]);
        let row = [0.0, 0.5, 0.5];
        let q = 0.3;
        let s: Vec<_> = (0..3).map(|_| encode_head(&theta, q).unwrap()).collect();
        let r = exchange_receive(&s, &row, 0, &ParamVector::zeros(2)).unwrap();
        let norm = decode_consensus(&theta, &r, q, &row, DecodeMode::Normalized).unwrap();
        assert!(norm.dist_sq(&theta) < 1e-24);
        let exact = decode_consensus(&theta, &r, q, &row, DecodeMode::Literal).unwrap();
        assert!(exact.dist_sq(&theta.scaled(2.0)) < 1e-24);
        let lone = decode_consensus(
            &theta,
            &ParamVector::zeros(2),
            q,
            &[0.0],
            DecodeMode::Normalized,
        )
        .unwrap();
        assert_eq!(lone, theta);
        assert!("bogus".parse::<DecodeMode>().is_err());
        assert_eq!(
            "literal".parse::<DecodeMode>().unwrap(),
            DecodeMode::Literal
        );
    }

    #[test]
    fn snr_conversion() {
        assert_eq!(snr_to_variance(1.0, 0.0).unwrap(), 1.0);
        assert!((snr_to_variance(1.0, 10.0).unwrap() - 0.1).abs() < 1e-15);
        let ratio = snr_to_variance(1.0, -1.0).unwrap() / snr_to_variance(1.0, 0.0).unwrap();
        assert!((ratio - 10f64.powf(0.1)).abs() < 1e-12);
        assert!((ratio - 1.2589).abs() < 1e-4);
        assert!(snr_to_variance(0.0, 3.0).is_err());
    }

    #[test]
    fn channel_env_validation() {
        assert!(ChannelEnv::new(0.0, 1.0, vec![], 0).is_err());
        assert!(ChannelEnv::new(1.0, 1.0, vec![-0.1], 0).is_err());
        let env = ChannelEnv::new(1.0, 2.0, vec![0.5], 0).unwrap();
        assert_eq!(env.variance(7), 0.5);
    }
}
