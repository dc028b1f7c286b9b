//! Raw numeric kernels behind the graph primitives. Everything here works on
//! flat row-major slices; shape validation happens in the graph layer.

use super::Float;

/// Strided matrix view used to describe GEMM operands.
#[derive(Clone, Copy)]
pub(crate) struct Strides {
    pub rs: usize,
    pub cs: usize,
}

pub(crate) const ROW_MAJOR: fn(usize) -> Strides = |cols| Strides { rs: cols, cs: 1 };
pub(crate) const TRANSPOSED: fn(usize) -> Strides = |cols| Strides { rs: 1, cs: cols };

fn max_index(rows: usize, cols: usize, s: Strides) -> usize {
    (rows - 1) * s.rs + (cols - 1) * s.cs
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n`, and `c` is a
/// row-major `m x n` block with row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(max_index(m, n, Strides { rs: rsc, cs: 1 }) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * rsc..i * rsc + n] {
                *v = beta * *v;
            }
        }
        return;
    }
    assert!(max_index(m, k, sa) < a.len(), "gemm: a out of bounds");
    assert!(max_index(k, n, sb) < b.len(), "gemm: b out of bounds");
    // SAFETY: extents checked above against every operand.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            sa.rs as isize,
            sa.cs as isize,
            b.as_ptr(),
            sb.rs as isize,
            sb.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Geometry of one (possibly grouped) 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cg(&self) -> usize {
        self.c / self.groups
    }
    fn fg(&self) -> usize {
        self.f / self.groups
    }
    /// Rows of the unfolded patch matrix for a single group.
    fn k(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
    fn l(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds group `g` of `x` into `cols`, laid out `[k, n * l]`.
fn im2col<T: Float>(x: &[T], geo: &ConvGeom, g: usize, cols: &mut [T]) {
    let (l, nl) = (geo.l(), geo.n * geo.l());
    let hw = geo.h * geo.w;
    for n in 0..geo.n {
        for ci in 0..geo.cg() {
            let ch = g * geo.cg() + ci;
            let src = &x[(n * geo.c + ch) * hw..(n * geo.c + ch + 1) * hw];
            if geo.is_pointwise() {
                cols[ci * nl + n * l..ci * nl + (n + 1) * l].copy_from_slice(src);
                continue;
            }
            for ki in 0..geo.kh {
                for kj in 0..geo.kw {
                    let row = (ci * geo.kh + ki) * geo.kw + kj;
                    let dst = &mut cols[row * nl + n * l..row * nl + (n + 1) * l];
                    for oy in 0..geo.ho {
                        let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                        let out = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                        if iy < 0 || iy >= geo.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let line = &src[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                            *o = if ix < 0 || ix >= geo.w as isize {
                                T::zero()
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
fn col2im<T: Float>(cols: &[T], geo: &ConvGeom, g: usize, dx: &mut [T]) {
    let (l, nl) = (geo.l(), geo.n * geo.l());
    let hw = geo.h * geo.w;
    for n in 0..geo.n {
        for ci in 0..geo.cg() {
            let ch = g * geo.cg() + ci;
            let dst = &mut dx[(n * geo.c + ch) * hw..(n * geo.c + ch + 1) * hw];
            if geo.is_pointwise() {
                for (d, s) in dst.iter_mut().zip(&cols[ci * nl + n * l..ci * nl + (n + 1) * l]) {
                    *d += *s;
                }
                continue;
            }
            for ki in 0..geo.kh {
                for kj in 0..geo.kw {
                    let row = (ci * geo.kh + ki) * geo.kw + kj;
                    let src = &cols[row * nl + n * l..row * nl + (n + 1) * l];
                    for oy in 0..geo.ho {
                        let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                        if iy < 0 || iy >= geo.h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * geo.w..(iy as usize + 1) * geo.w];
                        for ox in 0..geo.wo {
                            let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                            if ix >= 0 && ix < geo.w as isize {
                                line[ix as usize] += src[oy * geo.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    geo: &ConvGeom,
) -> Vec<T> {
    let (k, l, nl, fg) = (geo.k(), geo.l(), geo.n * geo.l(), geo.fg());
    let mut y = vec![T::zero(); geo.n * geo.f * l];
    let mut cols = vec![T::zero(); k * nl];
    let mut tmp = vec![T::zero(); fg * nl];
    for g in 0..geo.groups {
        im2col(x, geo, g, &mut cols);
        let wg = &w[g * fg * k..(g + 1) * fg * k];
        gemm(fg, k, nl, wg, ROW_MAJOR(k), &cols, ROW_MAJOR(nl), T::zero(), &mut tmp, nl);
        for n in 0..geo.n {
            for fi in 0..fg {
                let ch = g * fg + fi;
                let b = bias.map_or(T::zero(), |b| b[ch]);
                let src = &tmp[fi * nl + n * l..fi * nl + (n + 1) * l];
                let dst = &mut y[(n * geo.f + ch) * l..(n * geo.f + ch + 1) * l];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *s + b;
                }
            }
        }
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    geo: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, l, nl, fg) = (geo.k(), geo.l(), geo.n * geo.l(), geo.fg());
    let (need_dx, need_dw, need_db) = need;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); geo.f];
        for n in 0..geo.n {
            for (ch, acc) in db.iter_mut().enumerate() {
                *acc += dy[(n * geo.f + ch) * l..(n * geo.f + ch + 1) * l].iter().copied().sum();
            }
        }
        db
    });
    if need_dx || need_dw {
        let mut dyg = vec![T::zero(); fg * nl];
        let mut cols = vec![T::zero(); k * nl];
        for g in 0..geo.groups {
            for n in 0..geo.n {
                for fi in 0..fg {
                    let ch = g * fg + fi;
                    dyg[fi * nl + n * l..fi * nl + (n + 1) * l]
                        .copy_from_slice(&dy[(n * geo.f + ch) * l..(n * geo.f + ch + 1) * l]);
                }
            }
            if let Some(dw) = dw.as_mut() {
                im2col(x, geo, g, &mut cols);
                let dwg = &mut dw[g * fg * k..(g + 1) * fg * k];
                gemm(fg, nl, k, &dyg, ROW_MAJOR(nl), &cols, TRANSPOSED(nl), T::zero(), dwg, k);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w[g * fg * k..(g + 1) * fg * k];
                gemm(k, fg, nl, wg, TRANSPOSED(k), &dyg, ROW_MAJOR(nl), T::zero(), &mut cols, nl);
                col2im(&cols, geo, g, dx);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub nc: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Max pooling; returns the output and the flat input index of every maximum.
/// Ties resolve to the first (row-major) element of the window.
pub(crate) fn max_pool_forward<T: Float>(x: &[T], geo: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let out_len = geo.nc * geo.ho * geo.wo;
    let mut y = Vec::with_capacity(out_len);
    let mut arg = Vec::with_capacity(out_len);
    for plane in 0..geo.nc {
        let base = plane * geo.h * geo.w;
        for oy in 0..geo.ho {
            let y0 = oy * geo.stride;
            let y1 = (y0 + geo.kernel).min(geo.h);
            for ox in 0..geo.wo {
                let x0 = ox * geo.stride;
                let x1 = (x0 + geo.kernel).min(geo.w);
                let mut best = base + y0 * geo.w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = base + iy * geo.w + ix;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

/// Per-channel batch statistics over `[n, c, l]` data: biased mean and variance.
pub(crate) fn channel_moments<T: Float>(x: &[T], n: usize, c: usize, l: usize) -> (Vec<T>, Vec<T>) {
    let m = T::from_usize(n * l).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s += x[(i * c + ch) * l..(i * c + ch + 1) * l].iter().copied().sum();
        }
        let mu = s / m;
        let mut v = T::zero();
        for i in 0..n {
            for &e in &x[(i * c + ch) * l..(i * c + ch + 1) * l] {
                v += (e - mu) * (e - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_along<T: Float>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..len {
                y[at(j)] /= s;
            }
        }
    }
    y
}

/// Row-wise `log(sum(exp(row)))` computed stably.
pub(crate) fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Strides of a row-major shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes `x` of `shape` so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute<T: Float>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
