//! Convolution kernels: im2col + sgemm, zero padding, square kernels.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self { cin, h, w, k, stride, pad, ho, wo })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// C[m×n] = alpha·A[m×k]·B[k×n] + beta·C, with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices fully contained in the slices;
    // callers pass row-major buffers of exactly the stated extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * g.ho * g.wo..(row + 1) * g.ho * g.wo];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * g.ho * g.wo..(row + 1) * g.ho * g.wo];
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution. Returns the output and, when `keep_cols` is set, the
/// im2col buffers of every batch item for reuse in the backward pass.
pub(crate) fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Tensor, Vec<f32>) {
    let cout = weight.n();
    let (rows, ncols) = (g.rows(), g.cols());
    let per_in = g.cin * g.h * g.w;
    let per_out = cout * ncols;
    let mut out = Tensor::zeros([x.n(), cout, g.ho, g.wo]);
    let mut kept = if keep_cols && !g.is_pointwise() { vec![0.0; x.n() * rows * ncols] } else { Vec::new() };
    let mut scratch = if g.is_pointwise() || keep_cols { Vec::new() } else { vec![0.0; rows * ncols] };

    for n in 0..x.n() {
        let xin = &x.data()[n * per_in..(n + 1) * per_in];
        let cols: &[f32] = if g.is_pointwise() {
            xin
        } else if keep_cols {
            let buf = &mut kept[n * rows * ncols..(n + 1) * rows * ncols];
            im2col(xin, g, buf);
            buf
        } else {
            im2col(xin, g, &mut scratch);
            &scratch
        };
        let o = &mut out.data_mut()[n * per_out..(n + 1) * per_out];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(ncols).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(cout, rows, ncols, weight.data(), (rows as isize, 1), cols, (ncols as isize, 1), beta, o);
    }
    (out, kept)
}

pub(crate) struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    kept_cols: &[f32],
    g: &ConvGeom,
    dout: &Tensor,
    need_dx: bool,
) -> ConvGrads {
    let cout = weight.n();
    let (rows, ncols) = (g.rows(), g.cols());
    let per_in = g.cin * g.h * g.w;
    let per_out = cout * ncols;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros([cout, 1, 1, 1]);
    let mut scratch = vec![0.0; if g.is_pointwise() { 0 } else { rows * ncols }];
    let mut dcols = vec![0.0; rows * ncols];

    for n in 0..x.n() {
        let xin = &x.data()[n * per_in..(n + 1) * per_in];
        let d = &dout.data()[n * per_out..(n + 1) * per_out];
        for (co, chunk) in d.chunks(ncols).enumerate() {
            db.data_mut()[co] += chunk.iter().sum::<f32>();
        }
        let cols: &[f32] = if g.is_pointwise() {
            xin
        } else if !kept_cols.is_empty() {
            &kept_cols[n * rows * ncols..(n + 1) * rows * ncols]
        } else {
            im2col(xin, g, &mut scratch);
            &scratch
        };
        // dW += dOut · colsᵀ
        gemm(cout, ncols, rows, d, (ncols as isize, 1), cols, (1, ncols as isize), 1.0, dw.data_mut());
        if need_dx {
            // dcols = Wᵀ · dOut
            gemm(rows, cout, ncols, weight.data(), (1, rows as isize), d, (ncols as isize, 1), 0.0, &mut dcols);
            let dxn = &mut dx.data_mut()[n * per_in..(n + 1) * per_in];
            if g.is_pointwise() {
                for (a, b) in dxn.iter_mut().zip(&dcols) {
                    *a += b;
                }
            } else {
                col2im(&dcols, g, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeom) -> Tensor {
        let mut out = Tensor::zeros([x.n(), w.n(), g.ho, g.wo]);
        for n in 0..x.n() {
            for co in 0..w.n() {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = b.data()[co];
                        for ci in 0..g.cin {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        acc += w.get(co, ci, ky, kx) * x.get(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let i = out.index(n, co, oy, ox);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let x = Tensor::randn([2, 3, 7, 6], &mut rng);
            let w = Tensor::randn([4, 3, k, k], &mut rng);
            let b = Tensor::randn([4, 1, 1, 1], &mut rng);
            let g = ConvGeom::new(3, 7, 6, k, stride, pad).unwrap();
            let (fast, _) = conv2d_forward(&x, &w, Some(&b), &g, true);
            let slow = naive(&x, &w, &b, &g);
            assert!(fast.max_abs_diff(&slow) < 1e-5, "k={k} s={stride} p={pad}");
        }
    }

    #[test]
    fn kept_and_recomputed_columns_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([2, 2, 5, 5], &mut rng);
        let w = Tensor::randn([3, 2, 3, 3], &mut rng);
        let g = ConvGeom::new(2, 5, 5, 3, 1, 1).unwrap();
        let (out, kept) = conv2d_forward(&x, &w, None, &g, true);
        let dout = out.map(|v| v.sin());
        let a = conv2d_backward(&x, &w, &kept, &g, &dout, true);
        let b = conv2d_backward(&x, &w, &[], &g, &dout, true);
        assert_eq!(a.dx, b.dx);
        assert_eq!(a.dw, b.dw);
    }
}
