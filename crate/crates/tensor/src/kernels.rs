//! Raw slice kernels behind the graph ops.
//!
//! Every reduction accumulates in a fixed order so results are reproducible
//! bit-for-bit. `gemm` in particular sums its inner dimension strictly in
//! index order, which makes the im2col convolution agree exactly with a
//! direct nested-loop definition.

use crate::Real;

/// Runs `$body` through a copy compiled for AVX2 when the CPU has it. The
/// wider vectors only change how many independent elements are processed at
/// once, never the order of operations on any one element, and no fused
/// multiply-add is enabled, so both paths give identical bits.
macro_rules! simd_dispatch {
    ($name:ident, $avx:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty, $body:expr) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx<T: Real>($($arg: $ty),*) -> $ret {
            $body
        }

        pub fn $name<T: Real>($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2, checked just above.
                return unsafe { $avx($($arg),*) };
            }
            $body
        }
    };
}

/// `c[m,n] += A·b[k,n]` where `A[i,p] = a[i·ai + p·ap]`.
///
/// Works on 4×16 tiles of `c` held in locals across the whole `k` loop;
/// every element receives its products one at a time in index order, so the
/// result equals the textbook triple loop bit for bit.
#[inline(always)]
fn tiled<T: Real>(m: usize, k: usize, n: usize, a: &[T], (ai, ap): (usize, usize), b: &[T], c: &mut [T]) {
    const R: usize = 4;
    const W: usize = 16;
    let (mb, nb) = (m - m % R, n - n % W);
    for i in (0..mb).step_by(R) {
        for j in (0..nb).step_by(W) {
            let mut acc = [[T::zero(); W]; R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + W]);
            }
            for p in 0..k {
                let bv: &[T; W] = b[p * n + j..p * n + j + W].try_into().expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * ai + p * ap];
                    for l in 0..W {
                        row[l] += av * bv[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + W].copy_from_slice(row);
            }
        }
    }
    // Ragged edges: the right-hand columns of tiled rows, then leftover rows.
    for i in 0..m {
        let cols = if i < mb { nb..n } else { 0..n };
        if cols.is_empty() {
            continue;
        }
        for p in 0..k {
            let av = a[i * ai + p * ap];
            for j in cols.clone() {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
}

simd_dispatch!(gemm, gemm_avx2, (m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) -> (), {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    tiled(m, k, n, a, (k, 1), b, c)
});

simd_dispatch!(gemm_at, gemm_at_avx2, (m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) -> (), {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    tiled(m, k, n, a, (1, m), b, c)
});

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`, via a transposed copy of `b`.
pub fn gemm_bt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm(m, k, n, a, &bt, c);
}

simd_dispatch!(dot, dot_avx2, (a: &[T], b: &[T]) -> T, dot_body(a, b));

#[inline(always)]
fn fold8<T: Real>(acc: &[T; 8], tail: T) -> T {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Dot product with eight interleaved partial sums.
#[inline(always)]
fn dot_body<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    fold8(&acc, tail)
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        Some(ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix: `cin·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, unpadded: the input already is the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[cin,h,w]` image into `col[cin·kh·kw, oh·ow]`.
pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` back into a `[cin,h,w]` image.
pub fn col2im<T: Real>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}
