//! Raw numeric kernels over flat buffers. No shape validation happens here;
//! callers in `autodiff` check shapes first.

use super::Element;

/// `c = op(a) · op(b) + beta · c`, with `op(a)` of size m×k and `op(b)` k×n.
///
/// When `trans_a` is set, `a` is stored k×m; likewise `b` is stored n×k under `trans_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // regions whose sizes were asserted.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    if data.is_empty() {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(data[offset]);
        // odometer increment, tracking source offset
        let mut axis = rank;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            idx[axis] += 1;
            offset += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
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
    pub fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    pub fn cols_len(&self) -> usize {
        self.cols_rows() * self.oh * self.ow
    }
}

/// Unfolds one C×H×W image into a (C·kh·kw)×(oh·ow) column matrix.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.ow + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                            x[(c * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.ow + oj];
                    }
                }
            }
        }
    }
}

/// Average pooling with zero padding; the divisor is always `k·k`.
pub(crate) fn avg_pool_forward<T: Element>(x: &[T], planes: usize, g: &ConvGeom, out: &mut [T]) {
    let inv = T::one() / T::of((g.kh * g.kw) as f64);
    for p in 0..planes {
        let src = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        let dst = &mut out[p * g.oh * g.ow..(p + 1) * g.oh * g.ow];
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let mut acc = T::zero();
                for ki in 0..g.kh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        acc += src[ii as usize * g.w + jj as usize];
                    }
                }
                dst[oi * g.ow + oj] = acc * inv;
            }
        }
    }
}

pub(crate) fn avg_pool_backward<T: Element>(gout: &[T], planes: usize, g: &ConvGeom, dx: &mut [T]) {
    let inv = T::one() / T::of((g.kh * g.kw) as f64);
    for p in 0..planes {
        let src = &gout[p * g.oh * g.ow..(p + 1) * g.oh * g.ow];
        let dst = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oi in 0..g.oh {
            for oj in 0..g.ow {
                let v = src[oi * g.ow + oj] * inv;
                for ki in 0..g.kh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        dst[ii as usize * g.w + jj as usize] += v;
                    }
                }
            }
        }
    }
}
