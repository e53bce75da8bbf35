//! Raw numeric kernels used by the tape ops.

use super::Scalar;
use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if self.stride == 0 || ph < self.kh || pw < self.kw {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }
}

/// Gathers sliding windows of one `[c, h, w]` image. Row `r = (ch, ki, kj)` and
/// window position `p` land at `out[r * rs + p * ps]`; padding reads as zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    out: &mut [T],
    rs: usize,
    ps: usize,
) {
    let (oh, ow) = win.out_extent(h, w).expect("window fits");
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let r = (ch * win.kh + ki) * win.kw + kj;
                for oi in 0..oh {
                    let ii = (oi * win.stride + ki) as isize - win.pad as isize;
                    for oj in 0..ow {
                        let jj = (oj * win.stride + kj) as isize - win.pad as isize;
                        let p = oi * ow + oj;
                        out[r * rs + p * ps] = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            plane[ii as usize * w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    dx: &mut [T],
    rs: usize,
    ps: usize,
) {
    let (oh, ow) = win.out_extent(h, w).expect("window fits");
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let r = (ch * win.kh + ki) * win.kw + kj;
                for oi in 0..oh {
                    let ii = (oi * win.stride + ki) as isize - win.pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * win.stride + kj) as isize - win.pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        let p = oi * ow + oj;
                        let dst = &mut plane[ii as usize * w + jj as usize];
                        *dst = *dst + cols[r * rs + p * ps];
                    }
                }
            }
        }
    }
}

/// Depthwise cross-correlation of one image, one filter per channel.
pub fn depthwise_forward<T: Scalar>(x: &[T], wt: &[T], c: usize, h: usize, w: usize, win: Window, out: &mut [T]) {
    let (oh, ow) = win.out_extent(h, w).expect("window fits");
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let k = &wt[ch * win.kh * win.kw..(ch + 1) * win.kh * win.kw];
        let o = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = T::zero();
                for ki in 0..win.kh {
                    let ii = (oi * win.stride + ki) as isize - win.pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for kj in 0..win.kw {
                        let jj = (oj * win.stride + kj) as isize - win.pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        acc = acc + k[ki * win.kw + kj] * plane[ii as usize * w + jj as usize];
                    }
                }
                o[oi * ow + oj] = acc;
            }
        }
    }
}

/// Input and weight gradients of [`depthwise_forward`] for one image.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    dx: &mut [T],
    dw: &mut [T],
) {
    let (oh, ow) = win.out_extent(h, w).expect("window fits");
    let kk = win.kh * win.kw;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let k = &wt[ch * kk..(ch + 1) * kk];
        let dk = &mut dw[ch * kk..(ch + 1) * kk];
        let go = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for oi in 0..oh {
            for oj in 0..ow {
                let gv = go[oi * ow + oj];
                for ki in 0..win.kh {
                    let ii = (oi * win.stride + ki) as isize - win.pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for kj in 0..win.kw {
                        let jj = (oj * win.stride + kj) as isize - win.pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        let xi = ii as usize * w + jj as usize;
                        dk[ki * win.kw + kj] = dk[ki * win.kw + kj] + gv * plane[xi];
                        dplane[xi] = dplane[xi] + gv * k[ki * win.kw + kj];
                    }
                }
            }
        }
    }
}

/// Batched `[batch, m, k] · [batch, k, n]`, with `b` shared when `b_batched` is false.
pub fn batched_matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    if !b_batched {
        T::gemm(batch * m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut out, n as isize, false);
        return out;
    }
    parallel::for_each_chunk(&mut out, m * n, |i, c| {
        T::gemm(
            m,
            k,
            n,
            &a[i * m * k..(i + 1) * m * k],
            (k as isize, 1),
            &b[i * k * n..(i + 1) * k * n],
            (n as isize, 1),
            c,
            n as isize,
            false,
        );
    });
    out
}

/// Gradients `(g · bᵀ, aᵀ · g)` of [`batched_matmul`].
#[allow(clippy::too_many_arguments)]
pub fn batched_matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    g: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); batch * m * k];
    if !b_batched {
        T::gemm(batch * m, n, k, g, (n as isize, 1), b, (1, n as isize), &mut da, k as isize, false);
        let mut db = vec![T::zero(); k * n];
        T::gemm(k, batch * m, n, a, (1, k as isize), g, (n as isize, 1), &mut db, n as isize, false);
        return (da, db);
    }
    parallel::for_each_chunk(&mut da, m * k, |i, c| {
        T::gemm(
            m,
            n,
            k,
            &g[i * m * n..(i + 1) * m * n],
            (n as isize, 1),
            &b[i * k * n..(i + 1) * k * n],
            (1, n as isize),
            c,
            k as isize,
            false,
        );
    });
    let mut db = vec![T::zero(); batch * k * n];
    parallel::for_each_chunk(&mut db, k * n, |i, c| {
        T::gemm(
            k,
            m,
            n,
            &a[i * m * k..(i + 1) * m * k],
            (1, k as isize),
            &g[i * m * n..(i + 1) * m * n],
            (n as isize, 1),
            c,
            n as isize,
            false,
        );
    });
    (da, db)
}

/// Row-wise softmax over contiguous rows of length `n`.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = x.to_vec();
    let rows_per_chunk = (4096 / n.max(1)).max(1);
    parallel::for_each_chunk(&mut out, rows_per_chunk * n, |_, chunk| {
        for row in chunk.chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
    });
    out
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_matches_closed_form() {
        let win = Window { kh: 7, kw: 7, stride: 4, pad: 2 };
        assert_eq!(win.out_extent(224, 224), Some((56, 56)));
        let win = Window { kh: 3, kw: 3, stride: 1, pad: 0 };
        assert_eq!(win.out_extent(2, 2), None);
    }

    #[test]
    fn shared_and_batched_matmul_agree() {
        let a: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = (0..4 * 5).map(|i| (i as f64).sin()).collect();
        let shared = batched_matmul(&a, &b, 2, 3, 4, 5, false);
        let mut bb = b.clone();
        bb.extend_from_slice(&b);
        let batched = batched_matmul(&a, &bb, 2, 3, 4, 5, true);
        for (x, y) in shared.iter().zip(&batched) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }
}
