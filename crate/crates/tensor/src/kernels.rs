//! Slice-level numeric kernels shared by the forward and backward passes.

use rayon::prelude::*;

use crate::scalar::{lit, Scalar};

/// Rows handed to one worker in a parallel matmul. Fixed so that results do
/// not depend on the thread count.
const ROW_CHUNK: usize = 64;
const PAR_MIN_WORK: usize = 1 << 18;

/// Strided 2-D view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(off: usize, rs: usize) -> Self {
        Self { off, rs, cs: 1 }
    }

    pub fn cols(off: usize, cs: usize) -> Self {
        Self { off, rs: 1, cs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha·a·b + beta·c` with `a` m×k, `b` k×n, `c` m×n, all strided.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    av: View,
    b: &[S],
    bv: View,
    beta: S,
    c: &mut [S],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last(m, n) < c.len(), "gemm: c view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.off + i * cv.rs + j * cv.cs;
                c[idx] = if beta == S::zero() { S::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: a view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: b view out of bounds");
    // SAFETY: bounds asserted above; `c` is a unique borrow so it cannot
    // alias `a` or `b`.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Contiguous `c[m,n] (+)= op(a)·op(b)`.
///
/// `a` is stored `[m,k]`, or `[k,m]` when `ta`; `b` is stored `[k,n]`, or
/// `[n,k]` when `tb`. Large products are split across row chunks.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { S::one() } else { S::zero() };
    let bv = if tb { View::cols(0, k) } else { View::rows(0, n) };
    let a_view = |r0: usize| {
        if ta {
            View { off: r0, rs: 1, cs: m }
        } else {
            View::rows(r0 * k, k)
        }
    };
    if m >= 2 * ROW_CHUNK && m * k * n >= PAR_MIN_WORK {
        c.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(chunk, cc)| {
                let r0 = chunk * ROW_CHUNK;
                let rows = cc.len() / n;
                gemm(rows, k, n, S::one(), a, a_view(r0), b, bv, beta, cc, View::rows(0, n));
            });
    } else {
        gemm(m, k, n, S::one(), a, a_view(0), b, bv, beta, c, View::rows(0, n));
    }
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let half: S = lit(0.5);
    x * half * (S::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let half: S = lit(0.5);
    let cdf = half * (S::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `dx = y ⊙ (dy − ⟨dy, y⟩)` for one row, accumulated into `dx`.
pub(crate) fn softmax_row_backward<S: Scalar>(y: &[S], dy: &[S], dx: &mut [S]) {
    let dot: S = y.iter().zip(dy).map(|(a, b)| *a * *b).sum();
    for ((d, yv), dyv) in dx.iter_mut().zip(y).zip(dy) {
        *d += *yv * (*dyv - dot);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let npix = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let npix = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for align-corners=false bilinear resampling along one axis:
/// `(i0, i1, weight of i1)` per output index.
pub(crate) fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let scale = 1.0 / factor as f64;
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
