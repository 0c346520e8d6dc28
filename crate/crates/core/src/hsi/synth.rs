//! Deterministic synthetic scenes for desk-scale experiments.
//!
//! A scene is a linear mixture of a few materials. Each material has a
//! smooth spectral signature (a sum of broad Gaussian bumps over a slope) and
//! a spatial abundance map obtained from a soft-max over low-frequency random
//! fields, so region boundaries are soft but visible. A smooth illumination
//! field multiplies the mixture.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cube::{HsiCube, MIN_BANDS, MIN_SPATIAL};
use crate::error::{Error, Result};

const MATERIALS: usize = 4;
const WAVES_PER_FIELD: usize = 5;
const SHARPNESS: f64 = 4.0;

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

fn random_field(rng: &mut ChaCha8Rng, max_freq: f64) -> Vec<Wave> {
    (0..WAVES_PER_FIELD)
        .map(|_| {
            let f = rng.random_range(0.015..max_freq);
            let theta = rng.random_range(0.0..TAU);
            Wave {
                fy: f * theta.sin(),
                fx: f * theta.cos(),
                phase: rng.random_range(0.0..TAU),
                amp: rng.random_range(0.5..1.0),
            }
        })
        .collect()
}

fn eval_field(waves: &[Wave], y: f64, x: f64) -> f64 {
    waves.iter().map(|w| w.amp * (TAU * (w.fy * y + w.fx * x) + w.phase).sin()).sum::<f64>()
        / (WAVES_PER_FIELD as f64).sqrt()
}

fn signature(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(-0.1..1.1), rng.random_range(0.2..0.45), rng.random_range(0.2..0.8)))
        .collect();
    let base = rng.random_range(0.05..0.25);
    let slope = rng.random_range(-0.15..0.15);
    (0..c)
        .map(|b| {
            let l = if c == 1 { 0.5 } else { b as f64 / (c - 1) as f64 };
            let bump: f64 = bumps.iter().map(|&(mu, sd, a)| a * (-0.5 * ((l - mu) / sd).powi(2)).exp()).sum();
            (base + slope * (l - 0.5) + bump).max(0.02)
        })
        .collect()
}

/// Synthetic `h × w × c` scene, identical for identical arguments.
/// Values are positive and not normalized.
pub fn synth_cube(h: usize, w: usize, c: usize, seed: u64) -> Result<HsiCube> {
    if h < MIN_SPATIAL || w < MIN_SPATIAL || c < MIN_BANDS {
        return Err(Error::InvalidCube(format!("synthetic scene {h}x{w}x{c} below minimum size")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectra: Vec<Vec<f64>> = (0..MATERIALS).map(|_| signature(&mut rng, c)).collect();
    let fields: Vec<Vec<Wave>> = (0..MATERIALS).map(|_| random_field(&mut rng, 0.11)).collect();
    let light = random_field(&mut rng, 0.03);

    let mut abundance = vec![[0.0f64; MATERIALS]; h * w];
    let mut illum = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let logits: Vec<f64> = fields.iter().map(|f| SHARPNESS * eval_field(f, yf, xf)).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (k, e) in exps.iter().enumerate() {
                abundance[y * w + x][k] = e / z;
            }
            illum[y * w + x] = 0.85 + 0.15 * eval_field(&light, yf, xf).tanh();
        }
    }
    let cube = HsiCube::from_fn(h, w, c, |(y, x, b)| {
        let a = &abundance[y * w + x];
        let v: f64 = (0..MATERIALS).map(|k| a[k] * spectra[k][b]).sum();
        (v * illum[y * w + x]) as f32
    })?;
    Ok(cube.with_meta("source", format!("synthetic seed={seed}")))
}
