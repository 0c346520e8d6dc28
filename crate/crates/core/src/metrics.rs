//! Full-reference quality indices for hyperspectral reconstructions.
//!
//! All indices assume data range 1 (normalized cubes):
//!
//! | index | definition | best |
//! |-------|------------|------|
//! | MPSNR | mean over bands of `10·log10(1 / MSE_b)` | +∞ |
//! | MSSIM | mean over bands of SSIM (11×11 Gaussian, σ = 1.5, K = 0.01/0.03, reflect border) | 1 |
//! | SAM   | mean per-pixel spectral angle, degrees | 0 |
//! | CC    | mean over bands of the Pearson correlation | 1 |
//! | RMSE  | root mean squared error over the cube | 0 |
//! | ERGAS | `100 / scale · sqrt(mean_b (RMSE_b / μ_b)²)` | 0 |

use std::collections::BTreeMap;
use std::fmt;

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsi::resample::reflect_index;
use crate::hsi::HsiCube;

pub const EPS: f64 = 1e-8;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn band_f64(cube: &HsiCube, b: usize) -> Vec<f64> {
    cube.band(b).iter().map(|&v| v as f64).collect()
}

fn check(reference: &HsiCube, candidate: &HsiCube) -> Result<()> {
    reference.same_shape(candidate)
}

pub fn band_mse(reference: &HsiCube, candidate: &HsiCube, b: usize) -> f64 {
    let n = (reference.height() * reference.width()) as f64;
    reference.band(b).iter().zip(candidate.band(b).iter()).map(|(&r, &c)| (r as f64 - c as f64).powi(2)).sum::<f64>()
        / n
}

/// Mean per-band PSNR in dB; `+∞` when the cubes are identical.
pub fn mpsnr(reference: &HsiCube, candidate: &HsiCube) -> Result<f64> {
    check(reference, candidate)?;
    let c = reference.bands();
    let total: f64 = (0..c)
        .map(|b| {
            let mse = band_mse(reference, candidate, b);
            if mse == 0.0 {
                f64::INFINITY
            } else {
                -10.0 * mse.log10()
            }
        })
        .sum();
    Ok(total / c as f64)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter with reflected borders, same-size output.
fn blur(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (g.len() / 2) as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = g.iter().enumerate().map(|(k, wt)| wt * img[[y, reflect_index(x as isize + k as isize - r, w)]]).sum::<f64>();
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = g.iter().enumerate().map(|(k, wt)| wt * tmp[[reflect_index(y as isize + k as isize - r, h), x]]).sum::<f64>();
        }
    }
    out
}

/// SSIM of one band pair (range 1).
pub fn ssim_band(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> f64 {
    let g = gaussian_window();
    let x = a.mapv(|v| v as f64);
    let y = b.mapv(|v| v as f64);
    let mx = blur(&x, &g);
    let my = blur(&y, &g);
    let sxx = blur(&(&x * &x), &g);
    let syy = blur(&(&y * &y), &g);
    let sxy = blur(&(&x * &y), &g);
    let mut total = 0.0;
    for ((((&mx, &my), &sxx), &syy), &sxy) in mx.iter().zip(&my).zip(&sxx).zip(&syy).zip(&sxy) {
        let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    total / x.len() as f64
}

pub fn mssim(reference: &HsiCube, candidate: &HsiCube) -> Result<f64> {
    check(reference, candidate)?;
    let c = reference.bands();
    Ok((0..c).map(|b| ssim_band(reference.band(b), candidate.band(b))).sum::<f64>() / c as f64)
}

/// Angle in radians between two spectra. Two all-zero spectra count as
/// parallel; the denominator is floored at [`EPS`].
pub fn spectral_angle(a: impl Iterator<Item = f64> + Clone, b: impl Iterator<Item = f64> + Clone) -> f64 {
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 && bb == 0.0 {
        return 0.0;
    }
    (dot / (aa * bb).sqrt().max(EPS)).clamp(-1.0, 1.0).acos()
}

/// Mean spectral angle in degrees.
pub fn sam_deg(reference: &HsiCube, candidate: &HsiCube) -> Result<f64> {
    check(reference, candidate)?;
    let (h, w, _) = reference.dims();
    let (r, c) = (reference.data(), candidate.data());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let a = r.slice(ndarray::s![y, x, ..]);
            let b = c.slice(ndarray::s![y, x, ..]);
            total += spectral_angle(a.iter().map(|&v| v as f64), b.iter().map(|&v| v as f64));
        }
    }
    Ok((total / (h * w) as f64).to_degrees())
}

/// Mean band-wise Pearson correlation; fails on a constant band.
pub fn cc(reference: &HsiCube, candidate: &HsiCube) -> Result<f64> {
    check(reference, candidate)?;
    let c = reference.bands();
    let mut total = 0.0;
    for b in 0..c {
        let (x, y) = (band_f64(reference, b), band_f64(candidate, b));
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (p, q) in x.iter().zip(&y) {
            sxy += (p - mx) * (q - my);
            sxx += (p - mx).powi(2);
            syy += (q - my).powi(2);
        }
        if sxx == 0.0 || syy == 0.0 {
            return Err(Error::ZeroVarianceBand(b));
        }
        total += sxy / (sxx * syy).sqrt();
    }
    Ok(total / c as f64)
}

pub fn rmse(reference: &HsiCube, candidate: &HsiCube) -> Result<f64> {
    check(reference, candidate)?;
    let n = reference.data().len() as f64;
    let se: f64 = reference.data().iter().zip(candidate.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok((se / n).sqrt())
}

pub fn ergas(reference: &HsiCube, candidate: &HsiCube, scale: usize) -> Result<f64> {
    check(reference, candidate)?;
    if scale == 0 {
        return Err(Error::Scale(scale));
    }
    let c = reference.bands();
    let n = (reference.height() * reference.width()) as f64;
    let mut acc = 0.0;
    for b in 0..c {
        let mean = reference.band(b).iter().map(|&v| v as f64).sum::<f64>() / n;
        let rmse_b = band_mse(reference, candidate, b).sqrt();
        acc += (rmse_b / mean.abs().max(EPS)).powi(2);
    }
    Ok(100.0 / scale as f64 * (acc / c as f64).sqrt())
}

mod serde_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {t:?}"))),
        }
    }
}

/// The six indices for one (reference, candidate) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "serde_inf")]
    pub mpsnr: f64,
    pub mssim: f64,
    pub sam: f64,
    pub cc: f64,
    pub rmse: f64,
    pub ergas: f64,
    pub scale: usize,
}

pub const REPORT_FIELDS: [&str; 7] = ["mpsnr", "mssim", "cc", "rmse", "sam", "ergas", "scale"];

fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl MetricsReport {
    pub fn compute(reference: &HsiCube, candidate: &HsiCube, scale: usize) -> Result<Self> {
        Ok(Self {
            mpsnr: mpsnr(reference, candidate)?,
            mssim: mssim(reference, candidate)?,
            sam: sam_deg(reference, candidate)?,
            cc: cc(reference, candidate)?,
            rmse: rmse(reference, candidate)?,
            ergas: ergas(reference, candidate, scale)?,
            scale,
        })
    }

    fn values(&self) -> [f64; 6] {
        [self.mpsnr, self.mssim, self.cc, self.rmse, self.sam, self.ergas]
    }

    /// `key=value` lines in [`REPORT_FIELDS`] order; `+∞` is written `inf`.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in REPORT_FIELDS.iter().zip(self.values()) {
            out.push_str(&format!("{k}={}\n", fmt_value(v)));
        }
        out.push_str(&format!("scale={}\n", self.scale));
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> =
            text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim(), v.trim())).collect();
        let num = |k: &str| -> Result<f64> {
            let raw = map.get(k).ok_or_else(|| Error::Config(format!("report missing `{k}`")))?;
            if *raw == "inf" {
                return Ok(f64::INFINITY);
            }
            raw.parse().map_err(|_| Error::Config(format!("report field `{k}` = {raw:?}")))
        };
        Ok(Self {
            mpsnr: num("mpsnr")?,
            mssim: num("mssim")?,
            sam: num("sam")?,
            cc: num("cc")?,
            rmse: num("rmse")?,
            ergas: num("ergas")?,
            scale: num("scale")? as usize,
        })
    }

    pub fn csv_header() -> String {
        REPORT_FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cells: Vec<String> = self.values().iter().map(|&v| fmt_value(v)).collect();
        cells.push(self.scale.to_string());
        cells.join(",")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MPSNR↑ {:>8}  MSSIM↑ {:.4}  CC↑ {:.4}  RMSE↓ {:.5}  SAM↓ {:.3}  ERGAS↓ {:.3}",
            if self.mpsnr.is_infinite() { "inf".to_string() } else { format!("{:.3}", self.mpsnr) },
            self.mssim,
            self.cc,
            self.rmse,
            self.sam,
            self.ergas
        )
    }
}

/// Spectrum of the pixel at column `x`, row `y`.
pub fn spectral_curve(cube: &HsiCube, x: usize, y: usize) -> Result<Vec<f32>> {
    let (h, w) = cube.spatial();
    if x >= w || y >= h {
        return Err(Error::OutOfRange { x, y, width: w, height: h });
    }
    Ok((0..cube.bands()).map(|b| cube.get(y, x, b)).collect())
}

/// Per-pixel mean absolute error over three bands.
pub fn error_map(reference: &HsiCube, candidate: &HsiCube, bands: [usize; 3]) -> Result<Array2<f32>> {
    check(reference, candidate)?;
    if let Some(&b) = bands.iter().find(|&&b| b >= reference.bands()) {
        return Err(Error::Shape(format!("band {b} out of range")));
    }
    let (h, w) = reference.spatial();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        bands.iter().map(|&b| (reference.get(y, x, b) - candidate.get(y, x, b)).abs()).sum::<f32>() / 3.0
    }))
}

/// Colormap for error maps: piecewise-linear black → blue → cyan → yellow →
/// red over `[0, vmax]`, clamped above.
pub fn colormap(v: f32, vmax: f32) -> [u8; 3] {
    const STOPS: [[f32; 3]; 5] =
        [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let t = if vmax > 0.0 { (v / vmax).clamp(0.0, 1.0) } else { 0.0 } * (STOPS.len() - 1) as f32;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f32;
    let mix = |k: usize| ((STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f) * 255.0).round() as u8;
    [mix(0), mix(1), mix(2)]
}

pub fn render_error_map(map: &Array2<f32>, vmax: f32) -> RgbImage {
    let (h, w) = map.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(colormap(map[[y as usize, x as usize]], vmax)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> HsiCube {
        HsiCube::from_fn(8, 8, 4, |_| rng.random_range(lo..hi)).unwrap()
    }

    #[test]
    fn identical_pair_has_best_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_cube(&mut rng, 0.0, 1.0);
        let r = MetricsReport::compute(&a, &a, 2).unwrap();
        assert_eq!(r.mpsnr, f64::INFINITY);
        assert!((r.mssim - 1.0).abs() < 1e-12);
        assert_eq!(r.sam, 0.0);
        assert!((r.cc - 1.0).abs() < 1e-12);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.ergas, 0.0);
    }

    #[test]
    fn constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_cube(&mut rng, 0.0, 0.8);
        let b = a.map(|v| v + 0.1).unwrap();
        assert!((rmse(&a, &b).unwrap() - 0.1).abs() < 1e-6);
        assert!((mpsnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        let mut expect = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let v: Vec<f64> = (0..4).map(|k| a.get(y, x, k) as f64).collect();
                let u: Vec<f64> = (0..4).map(|k| b.get(y, x, k) as f64).collect();
                let dot: f64 = v.iter().zip(&u).map(|(p, q)| p * q).sum();
                let nv: f64 = v.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nu: f64 = u.iter().map(|p| p * p).sum::<f64>().sqrt();
                expect += (dot / (nv * nu)).acos();
            }
        }
        expect = (expect / 64.0).to_degrees();
        assert!((sam_deg(&a, &b).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn symmetric_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_cube(&mut rng, 0.0, 1.0);
        let b = random_cube(&mut rng, 0.0, 1.0);
        assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        assert!((sam_deg(&a, &b).unwrap() - sam_deg(&b, &a).unwrap()).abs() < 1e-12);
        assert!((cc(&a, &b).unwrap() - cc(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sam_ignores_per_pixel_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_cube(&mut rng, 0.05, 1.0);
        let b = random_cube(&mut rng, 0.05, 1.0);
        let scales: Vec<f32> = (0..64).map(|_| rng.random_range(0.2..5.0)).collect();
        let scaled = HsiCube::from_fn(8, 8, 4, |(y, x, k)| b.get(y, x, k) * scales[y * 8 + x]).unwrap();
        assert!((sam_deg(&a, &b).unwrap() - sam_deg(&a, &scaled).unwrap()).abs() < 1e-4);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_cube(&mut rng, 0.2, 0.8);
        let noise: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = [0.01f32, 0.05, 0.1]
            .iter()
            .map(|&amp| {
                let b = HsiCube::from_fn(8, 8, 4, |(y, x, k)| a.get(y, x, k) + amp * noise[(y * 8 + x) * 4 + k]).unwrap();
                mpsnr(&a, &b).unwrap()
            })
            .collect();
        assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
    }

    #[test]
    fn constant_band_is_an_error_for_cc() {
        let a = HsiCube::from_fn(8, 8, 2, |(y, _, b)| if b == 0 { 0.5 } else { y as f32 }).unwrap();
        assert!(matches!(cc(&a, &a), Err(Error::ZeroVarianceBand(0))));
    }

    #[test]
    fn report_serializations() {
        let r = MetricsReport { mpsnr: f64::INFINITY, mssim: 1.0, sam: 0.0, cc: 1.0, rmse: 0.0, ergas: 0.0, scale: 2 };
        assert!(r.to_kv().contains("mpsnr=inf"));
        assert_eq!(MetricsReport::from_kv(&r.to_kv()).unwrap(), r);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"mpsnr\":\"inf\""));
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
        assert_eq!(r.csv_row(), "inf,1,1,0,0,0,2");
        assert_eq!(MetricsReport::csv_header(), "mpsnr,mssim,cc,rmse,sam,ergas,scale");
        assert!(r.to_string().contains("MPSNR↑"));
    }

    #[test]
    fn curves_and_error_maps() {
        let flat = HsiCube::filled(8, 8, 5, 0.25).unwrap();
        assert_eq!(spectral_curve(&flat, 3, 4).unwrap(), vec![0.25; 5]);
        assert!(spectral_curve(&flat, 8, 0).is_err());
        let cube = HsiCube::from_fn(8, 8, 5, |(y, x, b)| (y + x + b) as f32 / 20.0).unwrap();
        assert_eq!(spectral_curve(&cube, 2, 1).unwrap()[4], cube.get(1, 2, 4));
        assert!(error_map(&cube, &cube, [0, 2, 4]).unwrap().iter().all(|&v| v == 0.0));
        let shifted = cube.map(|v| v + 0.3).unwrap();
        let m = error_map(&cube, &shifted, [0, 2, 4]).unwrap();
        assert!(m.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        assert_eq!(colormap(0.0, 1.0), [0, 0, 0]);
        assert_eq!(colormap(2.0, 1.0), [255, 0, 0]);
        assert_eq!(render_error_map(&m, 0.3).dimensions(), (8, 8));
    }
}
