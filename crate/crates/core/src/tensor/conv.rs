//! Direct convolution / pooling / resampling kernels over flat row-major
//! buffers. Loop order keeps the innermost axis contiguous so the stride-1
//! paths vectorize; accumulation order is fixed, so results are bit-stable.

use super::Real;

/// Output positions `o` (in `[0, out_len)`) for which `o*stride + off` lands
/// inside `[0, in_len)`. Returns a half-open range.
#[inline]
fn valid_range(off: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize + stride - 1) / stride
    };
    let hi_num = in_len as isize - 1 - off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv_out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_size + 2 * pad - k) / stride + 1
}

pub fn convt_out_size(in_size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_size - 1) * stride + k - 2 * pad
}

/// Lower an image batch to patch-matrix form: `p[(c,ky,kx)][(bi,pos)]`
/// where `pos` ranges over conv output positions. Out-of-image taps are
/// left at whatever `p` holds, so callers pass a zeroed buffer.
#[allow(clippy::too_many_arguments)]
fn im2col<R: Real>(
    x: &[R],
    p: &mut [R],
    (b, c, h, wd): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    let npos = oh * ow;
    let n = b * npos;
    for ci in 0..c {
        for ky in 0..kh {
            let hoff = ky as isize - pad as isize;
            let (r_lo, r_hi) = valid_range(hoff, stride, h, oh);
            for kx in 0..kw {
                let woff = kx as isize - pad as isize;
                let (c_lo, c_hi) = valid_range(woff, stride, wd, ow);
                if c_lo >= c_hi {
                    continue;
                }
                let pbase = ((ci * kh + ky) * kw + kx) * n;
                for bi in 0..b {
                    let xp = &x[(bi * c + ci) * h * wd..][..h * wd];
                    let pr = &mut p[pbase + bi * npos..][..npos];
                    for r in r_lo..r_hi {
                        let ih = ((r * stride) as isize + hoff) as usize;
                        let xrow = &xp[ih * wd..][..wd];
                        let prow = &mut pr[r * ow..][..ow];
                        if stride == 1 {
                            let iw0 = (c_lo as isize + woff) as usize;
                            prow[c_lo..c_hi].copy_from_slice(&xrow[iw0..iw0 + (c_hi - c_lo)]);
                        } else {
                            for cc in c_lo..c_hi {
                                prow[cc] = xrow[((cc * stride) as isize + woff) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into image planes.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<R: Real>(
    p: &[R],
    x: &mut [R],
    (b, c, h, wd): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    let npos = oh * ow;
    let n = b * npos;
    for ci in 0..c {
        for ky in 0..kh {
            let hoff = ky as isize - pad as isize;
            let (r_lo, r_hi) = valid_range(hoff, stride, h, oh);
            for kx in 0..kw {
                let woff = kx as isize - pad as isize;
                let (c_lo, c_hi) = valid_range(woff, stride, wd, ow);
                if c_lo >= c_hi {
                    continue;
                }
                let pbase = ((ci * kh + ky) * kw + kx) * n;
                for bi in 0..b {
                    let xp = &mut x[(bi * c + ci) * h * wd..][..h * wd];
                    let pr = &p[pbase + bi * npos..][..npos];
                    for r in r_lo..r_hi {
                        let ih = ((r * stride) as isize + hoff) as usize;
                        let xrow = &mut xp[ih * wd..][..wd];
                        let prow = &pr[r * ow..][..ow];
                        if stride == 1 {
                            let iw0 = (c_lo as isize + woff) as usize;
                            for (xv, pv) in xrow[iw0..iw0 + (c_hi - c_lo)].iter_mut().zip(&prow[c_lo..c_hi]) {
                                *xv = *xv + *pv;
                            }
                        } else {
                            for cc in c_lo..c_hi {
                                let iw = ((cc * stride) as isize + woff) as usize;
                                xrow[iw] = xrow[iw] + prow[cc];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y[c][(bi,pos)] = x[bi][c][pos]` — move the channel axis outermost so
/// GEMM rows span the whole batch.
fn gather_bc<R: Real>(x: &[R], y: &mut [R], b: usize, c: usize, npos: usize) {
    for bi in 0..b {
        for ci in 0..c {
            y[ci * b * npos + bi * npos..][..npos]
                .copy_from_slice(&x[(bi * c + ci) * npos..][..npos]);
        }
    }
}

/// Inverse of [`gather_bc`], accumulating: `x[bi][c][pos] += y[c][(bi,pos)]`.
fn scatter_bc_acc<R: Real>(y: &[R], x: &mut [R], b: usize, c: usize, npos: usize) {
    for bi in 0..b {
        for ci in 0..c {
            let src = &y[ci * b * npos + bi * npos..][..npos];
            let dst = &mut x[(bi * c + ci) * npos..][..npos];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s;
            }
        }
    }
}

/// `c[M,N] += a[M,K] · b[K,N]`, all row-major. Rows of `c` are processed in
/// tiles of four so the inner loop is four independent axpy streams.
fn gemm_nn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, kt: usize, n: usize) {
    gemm_axpy(c, m, n, |mi, kk| a[mi * kt + kk], kt, b);
}

/// `c[M,N] += aᵀ · b` with `a` stored `[K,M]` row-major.
fn gemm_tn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, kt: usize, n: usize) {
    gemm_axpy(c, m, n, |mi, kk| a[kk * m + mi], kt, b);
}

fn gemm_axpy<R: Real>(c: &mut [R], m: usize, n: usize, a: impl Fn(usize, usize) -> R, kt: usize, b: &[R]) {
    let tiles = m / 4;
    for t in 0..tiles {
        let base = t * 4;
        let (c0, rest) = c[base * n..(base + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for kk in 0..kt {
            let bk = &b[kk * n..][..n];
            let (a0, a1, a2, a3) = (a(base, kk), a(base + 1, kk), a(base + 2, kk), a(base + 3, kk));
            for i in 0..n {
                c0[i] = c0[i] + a0 * bk[i];
                c1[i] = c1[i] + a1 * bk[i];
                c2[i] = c2[i] + a2 * bk[i];
                c3[i] = c3[i] + a3 * bk[i];
            }
        }
    }
    for mi in tiles * 4..m {
        let cr = &mut c[mi * n..][..n];
        for kk in 0..kt {
            let bk = &b[kk * n..][..n];
            let av = a(mi, kk);
            for (cv, bv) in cr.iter_mut().zip(bk) {
                *cv = *cv + av * *bv;
            }
        }
    }
}

/// `c[M,L] += a[M,N] · b[L,N]ᵀ` — rows-by-rows dot products.
fn gemm_nt<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, l: usize, n: usize) {
    for mi in 0..m {
        let ar = &a[mi * n..][..n];
        let cr = &mut c[mi * l..][..l];
        for li in 0..l {
            cr[li] = cr[li] + dot_wide(ar, &b[li * n..][..n]);
        }
    }
}

/// Dot product with eight parallel accumulators; the accumulation order is
/// fixed, so results are run-to-run stable.
fn dot_wide<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = [R::zero(); 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let (ra, rb) = (ac.remainder(), bc.remainder());
    for (ca, cb) in ac.zip(bc) {
        for j in 0..8 {
            acc[j] = acc[j] + ca[j] * cb[j];
        }
    }
    let mut s = R::zero();
    for v in acc {
        s = s + v;
    }
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<R: Real>(
    x: &[R],
    w: &[R],
    bias: &[R],
    out: &mut [R],
    (b, ci, h, wd): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let npos = oh * ow;
    let n = b * npos;
    let kdim = ci * kh * kw;
    let mut p = vec![R::zero(); kdim * n];
    im2col(x, &mut p, (b, ci, h, wd), (kh, kw), stride, pad, (oh, ow));
    let mut y = vec![R::zero(); co * n];
    for c_out in 0..co {
        y[c_out * n..][..n].fill(bias[c_out]);
    }
    gemm_nn(w, &p, &mut y, co, kdim, n);
    out.fill(R::zero());
    scatter_bc_acc(&y, out, b, co, npos);
}

/// Gradients of `conv2d` w.r.t. input, weight and bias (all accumulated).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<R: Real>(
    x: &[R],
    w: &[R],
    g: &[R],
    dx: &mut [R],
    dw: &mut [R],
    db: &mut [R],
    (b, ci, h, wd): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let npos = oh * ow;
    let n = b * npos;
    let kdim = ci * kh * kw;
    let mut p = vec![R::zero(); kdim * n];
    im2col(x, &mut p, (b, ci, h, wd), (kh, kw), stride, pad, (oh, ow));
    let mut gp = vec![R::zero(); co * n];
    gather_bc(g, &mut gp, b, co, npos);
    for c_out in 0..co {
        db[c_out] = db[c_out] + gp[c_out * n..][..n].iter().copied().sum();
    }
    gemm_nt(&gp, &p, dw, co, kdim, n);
    let mut dp = vec![R::zero(); kdim * n];
    gemm_tn(w, &gp, &mut dp, kdim, co, n);
    col2im_acc(&dp, dx, (b, ci, h, wd), (kh, kw), stride, pad, (oh, ow));
}

/// Transposed convolution. Weight layout `[Cin, Cout, kh, kw]`. Internally
/// this is the adjoint image geometry of a plain conv that maps the output
/// size back to the input size.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_forward<R: Real>(
    x: &[R],
    w: &[R],
    bias: &[R],
    out: &mut [R],
    (b, ci, h, wd): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) {
    let oh = convt_out_size(h, kh, stride, pad);
    let ow = convt_out_size(wd, kw, stride, pad);
    let npos = h * wd;
    let n = b * npos;
    let kdim = co * kh * kw;
    let mut xg = vec![R::zero(); ci * n];
    gather_bc(x, &mut xg, b, ci, npos);
    let mut a = vec![R::zero(); kdim * n];
    gemm_tn(w, &xg, &mut a, kdim, ci, n);
    for bi in 0..b {
        for c_out in 0..co {
            out[(bi * co + c_out) * oh * ow..][..oh * ow].fill(bias[c_out]);
        }
    }
    col2im_acc(&a, out, (b, co, oh, ow), (kh, kw), stride, pad, (h, wd));
}

#[allow(clippy::too_many_arguments)]
pub fn convt2d_backward<R: Real>(
    x: &[R],
    w: &[R],
    g: &[R],
    dx: &mut [R],
    dw: &mut [R],
    db: &mut [R],
    (b, ci, h, wd): (usize, usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) {
    let oh = convt_out_size(h, kh, stride, pad);
    let ow = convt_out_size(wd, kw, stride, pad);
    let npos = h * wd;
    let n = b * npos;
    let kdim = co * kh * kw;
    let mut pg = vec![R::zero(); kdim * n];
    im2col(g, &mut pg, (b, co, oh, ow), (kh, kw), stride, pad, (h, wd));
    let mut dxg = vec![R::zero(); ci * n];
    gemm_nn(w, &pg, &mut dxg, ci, kdim, n);
    scatter_bc_acc(&dxg, dx, b, ci, npos);
    let mut xg = vec![R::zero(); ci * n];
    gather_bc(x, &mut xg, b, ci, npos);
    gemm_nt(&xg, &pg, dw, ci, kdim, n);
    for c_out in 0..co {
        let mut s = R::zero();
        for bi in 0..b {
            s = s + g[(bi * co + c_out) * oh * ow..][..oh * ow].iter().copied().sum();
        }
        db[c_out] = db[c_out] + s;
    }
}

pub fn avg_pool_forward<R: Real>(
    x: &[R],
    out: &mut [R],
    (planes, h, wd): (usize, usize, usize),
    k: usize,
    stride: usize,
) {
    let oh = conv_out_size(h, k, stride, 0);
    let ow = conv_out_size(wd, k, stride, 0);
    let inv = R::from_f64(1.0 / (k * k) as f64);
    for p in 0..planes {
        let xp = &x[p * h * wd..][..h * wd];
        let op = &mut out[p * oh * ow..][..oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = R::zero();
                for ki in 0..k {
                    let row = &xp[(r * stride + ki) * wd + c * stride..][..k];
                    for v in row {
                        acc = acc + *v;
                    }
                }
                op[r * ow + c] = acc * inv;
            }
        }
    }
}

pub fn avg_pool_backward<R: Real>(
    g: &[R],
    dx: &mut [R],
    (planes, h, wd): (usize, usize, usize),
    k: usize,
    stride: usize,
) {
    let oh = conv_out_size(h, k, stride, 0);
    let ow = conv_out_size(wd, k, stride, 0);
    let inv = R::from_f64(1.0 / (k * k) as f64);
    for p in 0..planes {
        let gp = &g[p * oh * ow..][..oh * ow];
        let dxp = &mut dx[p * h * wd..][..h * wd];
        for r in 0..oh {
            for c in 0..ow {
                let gv = gp[r * ow + c] * inv;
                for ki in 0..k {
                    let row = &mut dxp[(r * stride + ki) * wd + c * stride..][..k];
                    for v in row {
                        *v = *v + gv;
                    }
                }
            }
        }
    }
}

/// Source taps and weights for 1-D bilinear resampling (half-pixel centers,
/// clamped at the border).
pub fn bilinear_taps(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, src - src.floor())
        })
        .collect()
}

pub fn bilinear_forward<R: Real>(
    x: &[R],
    out: &mut [R],
    planes: usize,
    (h, wd): (usize, usize),
    (th, tw): (usize, usize),
) {
    let row_taps = bilinear_taps(h, th);
    let col_taps = bilinear_taps(wd, tw);
    for p in 0..planes {
        let xp = &x[p * h * wd..][..h * wd];
        let op = &mut out[p * th * tw..][..th * tw];
        for (r, &(r0, r1, fr)) in row_taps.iter().enumerate() {
            let fr = R::from_f64(fr);
            let one = R::one();
            for (c, &(c0, c1, fc)) in col_taps.iter().enumerate() {
                let fc = R::from_f64(fc);
                let top = xp[r0 * wd + c0] * (one - fc) + xp[r0 * wd + c1] * fc;
                let bot = xp[r1 * wd + c0] * (one - fc) + xp[r1 * wd + c1] * fc;
                op[r * tw + c] = top * (one - fr) + bot * fr;
            }
        }
    }
}

pub fn bilinear_backward<R: Real>(
    g: &[R],
    dx: &mut [R],
    planes: usize,
    (h, wd): (usize, usize),
    (th, tw): (usize, usize),
) {
    let row_taps = bilinear_taps(h, th);
    let col_taps = bilinear_taps(wd, tw);
    let one = R::one();
    for p in 0..planes {
        let gp = &g[p * th * tw..][..th * tw];
        let dxp = &mut dx[p * h * wd..][..h * wd];
        for (r, &(r0, r1, fr)) in row_taps.iter().enumerate() {
            let fr = R::from_f64(fr);
            for (c, &(c0, c1, fc)) in col_taps.iter().enumerate() {
                let fc = R::from_f64(fc);
                let gv = gp[r * tw + c];
                dxp[r0 * wd + c0] = dxp[r0 * wd + c0] + gv * (one - fr) * (one - fc);
                dxp[r0 * wd + c1] = dxp[r0 * wd + c1] + gv * (one - fr) * fc;
                dxp[r1 * wd + c0] = dxp[r1 * wd + c0] + gv * fr * (one - fc);
                dxp[r1 * wd + c1] = dxp[r1 * wd + c1] + gv * fr * fc;
            }
        }
    }
}
