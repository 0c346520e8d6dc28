//! Band-wise bicubic resampling (cubic convolution, `a = -0.5`).
//!
//! Output sample `i` sits at input coordinate `(i + 0.5) / s - 0.5` where
//! `s = out_len / in_len`. When shrinking, the kernel is widened by `1 / s`
//! (antialiasing). Taps falling outside the signal are reflected about the
//! edge samples, and every row of weights is normalized to sum to one.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use super::cube::{check_scale, HsiCube, ImagePair};
use crate::error::{Error, Result};

pub const CUBIC_A: f64 = -0.5;

pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Sparse resampling operator for one axis.
#[derive(Clone, Debug)]
pub struct Resampler {
    rows: Vec<Vec<(usize, f64)>>,
    in_len: usize,
}

impl Resampler {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let s = out_len as f64 / in_len as f64;
        let shrink = s.min(1.0);
        let support = 2.0 / shrink;
        let rows = (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) / s - 0.5;
                let lo = (center - support).floor() as isize;
                let hi = (center + support).ceil() as isize;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                let mut total = 0.0;
                for j in lo..=hi {
                    let wgt = cubic_kernel((center - j as f64) * shrink);
                    if wgt == 0.0 {
                        continue;
                    }
                    total += wgt;
                    let idx = reflect_index(j, in_len);
                    match taps.iter_mut().find(|(k, _)| *k == idx) {
                        Some(t) => t.1 += wgt,
                        None => taps.push((idx, wgt)),
                    }
                }
                for t in &mut taps {
                    t.1 /= total;
                }
                taps
            })
            .collect();
        Self { rows, in_len }
    }

    pub fn out_len(&self) -> usize {
        self.rows.len()
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    /// Dense `[out_len, in_len]` matrix of the operator.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.out_len(), self.in_len));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m[[i, j]] += w;
            }
        }
        m
    }

    fn apply(&self, src: &[f64], dst: &mut [f64]) {
        for (d, row) in dst.iter_mut().zip(&self.rows) {
            *d = row.iter().map(|&(j, w)| w * src[j]).sum();
        }
    }
}

/// Resamples one band image to `(out_h, out_w)`.
pub fn resize_band(band: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = band.dim();
    let rw = Resampler::new(w, out_w);
    let rh = Resampler::new(h, out_h);
    let mut tmp = Array2::<f64>::zeros((h, out_w));
    let mut line = vec![0.0; w];
    let mut out_line = vec![0.0; out_w];
    for y in 0..h {
        for (dst, &v) in line.iter_mut().zip(band.row(y)) {
            *dst = v as f64;
        }
        rw.apply(&line, &mut out_line);
        tmp.row_mut(y).iter_mut().zip(&out_line).for_each(|(d, &v)| *d = v);
    }
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    let mut col = vec![0.0; h];
    let mut out_col = vec![0.0; out_h];
    for x in 0..out_w {
        for (dst, &v) in col.iter_mut().zip(tmp.column(x)) {
            *dst = v;
        }
        rh.apply(&col, &mut out_col);
        out.column_mut(x).iter_mut().zip(&out_col).for_each(|(d, &v)| *d = v as f32);
    }
    out
}

pub fn resize(cube: &HsiCube, out_h: usize, out_w: usize) -> Result<HsiCube> {
    let c = cube.bands();
    let mut data = Array3::<f32>::zeros((out_h, out_w, c));
    for b in 0..c {
        data.index_axis_mut(Axis(2), b).assign(&resize_band(cube.band(b), out_h, out_w));
    }
    let mut out = HsiCube::new(data)?;
    out.meta = cube.meta.clone();
    Ok(out)
}

/// Bicubic downsampling of an HR cube into a co-registered pair.
pub fn degrade(hr: &HsiCube, scale: usize) -> Result<ImagePair> {
    check_scale(scale)?;
    let (h, w) = hr.spatial();
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::Indivisible { height: h, width: w, factor: scale });
    }
    let lr = resize(hr, h / scale, w / scale)?.with_meta("degraded_by", format!("bicubic x{scale}"));
    ImagePair::new(hr.clone(), lr, scale)
}

/// Bicubic upsampling by an integer factor.
pub fn upsample_bicubic(lr: &HsiCube, scale: usize) -> Result<HsiCube> {
    check_scale(scale)?;
    let (h, w) = lr.spatial();
    resize(lr, h * scale, w * scale)
}
