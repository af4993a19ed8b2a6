//! Procedural stand-in for MNIST, emitted as IDX tensors.
//!
//! Each class owns a template made of a few soft line strokes. An instance is
//! its class template, randomly shifted by up to one pixel and rescaled in
//! intensity, blended with a fainter template from a random other class, plus
//! pixel noise, quantized to bytes. The blend and noise keep the task from
//! being linearly trivial.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::idx::IdxTensor;
use crate::rng::{stream, StreamKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitsConfig {
    pub instances: usize,
    pub side: usize,
    pub classes: usize,
    pub strokes: usize,
    pub blend: f64,
    pub pixel_noise: f64,
}

impl Default for DigitsConfig {
    fn default() -> Self {
        Self {
            instances: 6000,
            side: 14,
            classes: 10,
            strokes: 3,
            blend: 0.6,
            pixel_noise: 0.25,
        }
    }
}

fn render_template(side: usize, strokes: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut img = vec![0.0f64; side * side];
    let lo = 1.5;
    let hi = side as f64 - 2.5;
    for _ in 0..strokes {
        let (x0, y0) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let (x1, y1) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        for r in 0..side {
            for c in 0..side {
                let (px, py) = (c as f64, r as f64);
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = (dx * dx + dy * dy).max(1e-9);
                let s = (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (x0 + s * dx - px, y0 + s * dy - py);
                let v = (-(qx * qx + qy * qy) / (2.0 * 0.7 * 0.7)).exp();
                let cell = &mut img[r * side + c];
                *cell = cell.max(v);
            }
        }
    }
    img
}

fn shifted(img: &[f64], side: usize, dx: isize, dy: isize, r: usize, c: usize) -> f64 {
    let (sr, sc) = (r as isize - dy, c as isize - dx);
    if sr < 0 || sc < 0 || sr >= side as isize || sc >= side as isize {
        0.0
    } else {
        img[sr as usize * side + sc as usize]
    }
}

/// Returns `(images, labels)` with shapes `(n, side, side)` and `(n)`.
pub fn generate_digits(cfg: &DigitsConfig, seed: u64) -> (IdxTensor, IdxTensor) {
    let side = cfg.side;
    let mut trng = stream(seed, StreamKind::Data, &[0xD161]);
    let templates: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| render_template(side, cfg.strokes, &mut trng))
        .collect();
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("finite std");
    let mut rng = stream(seed, StreamKind::Data, &[0xD162]);
    let mut images = Vec::with_capacity(cfg.instances * side * side);
    let mut labels = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances {
        let class = i % cfg.classes;
        let other = (class + rng.random_range(1..cfg.classes)) % cfg.classes;
        let (dx, dy) = (
            rng.random_range(-1..=1i64) as isize,
            rng.random_range(-1..=1i64) as isize,
        );
        let (ox, oy) = (
            rng.random_range(-1..=1i64) as isize,
            rng.random_range(-1..=1i64) as isize,
        );
        let gain = rng.random_range(0.7..1.1);
        let mix = rng.random_range(0.0..cfg.blend);
        for r in 0..side {
            for c in 0..side {
                let v = gain * shifted(&templates[class], side, dx, dy, r, c)
                    + mix * shifted(&templates[other], side, ox, oy, r, c)
                    + noise.sample(&mut rng);
                images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        labels.push(class as u8);
    }
    (
        IdxTensor {
            shape: vec![cfg.instances, side, side],
            data: images,
        },
        IdxTensor {
            shape: vec![cfg.instances],
            data: labels,
        },
    )
}
