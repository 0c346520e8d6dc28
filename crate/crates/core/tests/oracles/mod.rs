//! Naive reference implementations: plain loops over `get(row, col, band)`,
//! no shared helpers with the library.

#![allow(dead_code)]

use hsisr_core::HsiCube;

fn px(c: &HsiCube, y: usize, x: usize, b: usize) -> f64 {
    c.get(y, x, b) as f64
}

pub fn mpsnr(r: &HsiCube, c: &HsiCube) -> f64 {
    let (h, w, n) = r.dims();
    let mut total = 0.0;
    for b in 0..n {
        let mut se = 0.0;
        for y in 0..h {
            for x in 0..w {
                se += (px(r, y, x, b) - px(c, y, x, b)).powi(2);
            }
        }
        let mse = se / (h * w) as f64;
        total += if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    }
    total / n as f64
}

fn mirror(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Direct 2-D weighted window sums (no separable filtering).
pub fn ssim_band(r: &HsiCube, c: &HsiCube, b: usize) -> f64 {
    let (h, w, _) = r.dims();
    let sigma: f64 = 1.5;
    let mut g = [0.0f64; 11];
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let wt = g[dy] * g[dx] / norm;
                    let yy = mirror(y as i64 + dy as i64 - 5, h as i64);
                    let xx = mirror(x as i64 + dx as i64 - 5, w as i64);
                    let (p, q) = (px(r, yy, xx, b), px(c, yy, xx, b));
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (h * w) as f64
}

pub fn mssim(r: &HsiCube, c: &HsiCube) -> f64 {
    (0..r.bands()).map(|b| ssim_band(r, c, b)).sum::<f64>() / r.bands() as f64
}

/// Mean spectral angle in degrees.
pub fn sam(r: &HsiCube, c: &HsiCube) -> f64 {
    let (h, w, n) = r.dims();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (mut dot, mut nr, mut nc) = (0.0, 0.0, 0.0);
            for b in 0..n {
                dot += px(r, y, x, b) * px(c, y, x, b);
                nr += px(r, y, x, b).powi(2);
                nc += px(c, y, x, b).powi(2);
            }
            if nr > 0.0 || nc > 0.0 {
                total += (dot / (nr.sqrt() * nc.sqrt())).clamp(-1.0, 1.0).acos();
            }
        }
    }
    (total / (h * w) as f64) * 180.0 / std::f64::consts::PI
}

pub fn cc(r: &HsiCube, c: &HsiCube) -> f64 {
    let (h, w, n) = r.dims();
    let m = (h * w) as f64;
    let mut total = 0.0;
    for b in 0..n {
        let (mut sr, mut sc) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                sr += px(r, y, x, b);
                sc += px(c, y, x, b);
            }
        }
        let (mr, mc) = (sr / m, sc / m);
        let (mut num, mut dr, mut dc) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let (p, q) = (px(r, y, x, b) - mr, px(c, y, x, b) - mc);
                num += p * q;
                dr += p * p;
                dc += q * q;
            }
        }
        total += num / (dr.sqrt() * dc.sqrt());
    }
    total / n as f64
}

pub fn rmse(r: &HsiCube, c: &HsiCube) -> f64 {
    let (h, w, n) = r.dims();
    let mut se = 0.0;
    for y in 0..h {
        for x in 0..w {
            for b in 0..n {
                se += (px(r, y, x, b) - px(c, y, x, b)).powi(2);
            }
        }
    }
    (se / (h * w * n) as f64).sqrt()
}

pub fn ergas(r: &HsiCube, c: &HsiCube, scale: usize) -> f64 {
    let (h, w, n) = r.dims();
    let m = (h * w) as f64;
    let mut acc = 0.0;
    for b in 0..n {
        let (mut mean, mut se) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                mean += px(r, y, x, b);
                se += (px(r, y, x, b) - px(c, y, x, b)).powi(2);
            }
        }
        mean /= m;
        acc += (se / m) / (mean * mean);
    }
    100.0 / scale as f64 * (acc / n as f64).sqrt()
}
