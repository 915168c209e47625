//! Patch extraction (im2col) and its adjoint for 2-D convolutions.

use crate::Scalar;

/// Geometry of a 2-D convolution applied to a `c × h × w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Self {
        assert!(sh > 0 && sw > 0, "stride must be positive");
        assert!(
            h + 2 * ph >= kh && w + 2 * pw >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w}"
        );
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        Self {
            c,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            oh,
            ow,
        }
    }

    /// Rows of the patch matrix: `c·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_pixels(&self) -> usize {
        self.h * self.w
    }
}

/// `x: [n, c, h, w]` → patch matrix `[c·kh·kw, n·oh·ow]`.
pub(crate) fn im2col<S: Scalar>(x: &[S], n: usize, g: &ConvGeom) -> Vec<S> {
    let p = g.out_pixels();
    let cols_n = n * p;
    let mut cols = vec![S::zero(); g.patch_len() * cols_n];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let row_buf = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let img = &x[(b * g.c + ci) * g.in_pixels()..][..g.in_pixels()];
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &img[iy as usize * g.w..][..g.w];
                        let dst = &mut row_buf[b * p + oy * g.ow..][..g.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds the patch matrix back to `[n, c, h, w]`.
pub(crate) fn col2im<S: Scalar>(cols: &[S], n: usize, g: &ConvGeom) -> Vec<S> {
    let p = g.out_pixels();
    let cols_n = n * p;
    let mut x = vec![S::zero(); n * g.c * g.in_pixels()];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let row_buf = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let img = &mut x[(b * g.c + ci) * g.in_pixels()..][..g.in_pixels()];
                    for oy in 0..g.oh {
                        let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut img[iy as usize * g.w..][..g.w];
                        let src = &row_buf[b * p + oy * g.ow..][..g.ow];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
