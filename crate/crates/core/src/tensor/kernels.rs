//! Slice-level numeric kernels shared by [`Tensor`](super::Tensor) methods and
//! the autodiff tape. All accumulation runs in a fixed sequential order so
//! results are bit-reproducible.

use super::Scalar;
use crate::error::{Error, Result};

/// tanh-approximation GELU constant, sqrt(2/pi).
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_8;
pub const GELU_CUBIC: f64 = 0.044_715;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Output shape and source-offset table for a permutation of axes.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::InvalidArgument(format!(
            "permutation {axes:?} does not match rank {rank}"
        )));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::InvalidArgument(format!(
                "{axes:?} is not a permutation of 0..{rank}"
            )));
        }
        seen[a] = true;
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let zero = vec![0; rank];
    visit2(&out_shape, &src_strides, &zero, |_, src, _| index.push(src));
    Ok((out_shape, index))
}

/// Walks every element of `shape` in row-major order, tracking two strided
/// offsets. `f(linear, off_a, off_b)`.
pub fn visit2(
    shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let inner = shape[rank - 1];
    let (sa, sb) = (a_strides[rank - 1], b_strides[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        for j in 0..inner {
            f(i + j, oa + j * sa, ob + j * sb);
        }
        i += inner;
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += a_strides[d];
            ob += b_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= a_strides[d] * shape[d];
            ob -= b_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(a, b)),
        };
    }
    Ok(out)
}

/// Strides of `src` when viewed with broadcast shape `out` (zero on broadcast axes).
pub fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let lead = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < lead || src[i - lead] == 1 {
                0
            } else {
                s[i - lead]
            }
        })
        .collect()
}

pub fn binary<E: Scalar>(
    a_shape: &[usize],
    a: &[E],
    b_shape: &[usize],
    b: &[E],
    f: impl Fn(E, E) -> E,
) -> Result<(Vec<usize>, Vec<E>)> {
    if a_shape == b_shape {
        return Ok((
            a_shape.to_vec(),
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        ));
    }
    let out = broadcast_shape(a_shape, b_shape)?;
    let n: usize = out.iter().product();
    let mut data = vec![E::zero(); n];
    let sa = broadcast_strides(a_shape, &out);
    let sb = broadcast_strides(b_shape, &out);
    visit2(&out, &sa, &sb, |i, ia, ib| data[i] = f(a[ia], b[ib]));
    Ok((out, data))
}

/// Sums `grad` (shaped `out`) down to `target` by reducing broadcast axes.
pub fn reduce_to<E: Scalar>(grad: &[E], out: &[usize], target: &[usize]) -> Vec<E> {
    if out == target {
        return grad.to_vec();
    }
    let n: usize = target.iter().product();
    let mut acc = vec![E::zero(); n];
    let st = broadcast_strides(target, out);
    let zero = vec![0; out.len()];
    visit2(out, &st, &zero, |i, it, _| acc[it] = acc[it] + grad[i]);
    acc
}

/// Rows of `b` visited per block in [`gemm_tn_acc`], sized to keep them in L2.
const GEMM_TN_ROWS: usize = 256;

/// `out[j] += Σₜ coefs[t] · src[t·stride + j]` for a `W`-wide block, summing
/// terms in `t` order with the accumulators held in registers.
#[inline(always)]
fn axpy_block<E: Scalar, const W: usize>(out: &mut [E], coefs: &[E], src: &[E], stride: usize) {
    let mut acc = [E::zero(); W];
    acc.copy_from_slice(&out[..W]);
    for (t, &av) in coefs.iter().enumerate() {
        let bb = &src[t * stride..t * stride + W];
        for (x, &bv) in acc.iter_mut().zip(bb) {
            *x = *x + av * bv;
        }
    }
    out[..W].copy_from_slice(&acc);
}

/// `out[j] += Σₜ coefs[t] · src[t·stride + j]` for all `j < out.len()`, split
/// into register blocks of 16, 8, 4 and 1 lanes. Every lane sums in `t` order.
#[inline(always)]
fn row_acc<E: Scalar>(out: &mut [E], coefs: &[E], src: &[E], stride: usize) {
    let n = out.len();
    let mut j = 0;
    while j + 16 <= n {
        axpy_block::<E, 16>(&mut out[j..], coefs, &src[j..], stride);
        j += 16;
    }
    if j + 8 <= n {
        axpy_block::<E, 8>(&mut out[j..], coefs, &src[j..], stride);
        j += 8;
    }
    if j + 4 <= n {
        axpy_block::<E, 4>(&mut out[j..], coefs, &src[j..], stride);
        j += 4;
    }
    while j < n {
        axpy_block::<E, 1>(&mut out[j..], coefs, &src[j..], stride);
        j += 1;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`.
///
/// Each output element is accumulated as `c + a₀b₀ + a₁b₁ + …` in `k` order,
/// so results do not depend on the blocking.
pub fn gemm_acc<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    if n == 0 || k == 0 {
        return;
    }
    for i in 0..m {
        row_acc(&mut c[i * n..(i + 1) * n], &a[i * k..(i + 1) * k], b, n);
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`.
///
/// Each output element is accumulated in `m` order, independent of blocking.
pub fn gemm_tn_acc<E: Scalar>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    if n == 0 || k == 0 || m == 0 {
        return;
    }
    let at = transpose2d(m, k, a);
    let mut i0 = 0;
    while i0 < m {
        let i1 = (i0 + GEMM_TN_ROWS).min(m);
        for kk in 0..k {
            row_acc(&mut c[kk * n..(kk + 1) * n], &at[kk * m + i0..kk * m + i1], &b[i0 * n..], n);
        }
        i0 = i1;
    }
}

pub fn transpose2d<E: Scalar>(rows: usize, cols: usize, a: &[E]) -> Vec<E> {
    let mut t = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// (out batch, a batch, b batch) offsets in units of matrices.
    pub batches: Vec<(usize, usize, usize)>,
}

pub fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let ab1: Vec<usize> = if ab.is_empty() { vec![1] } else { ab.to_vec() };
    let bb1: Vec<usize> = if bb.is_empty() { vec![1] } else { bb.to_vec() };
    let batch = broadcast_shape(&ab1, &bb1).map_err(|_| Error::shape(a, b))?;
    let sa = broadcast_strides(&ab1, &batch);
    let sb = broadcast_strides(&bb1, &batch);
    let mut batches = Vec::new();
    visit2(&batch, &sa, &sb, |i, ia, ib| batches.push((i, ia, ib)));
    let mut out_shape = if ab.is_empty() && bb.is_empty() {
        Vec::new()
    } else {
        batch
    };
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        out_shape,
        m,
        k,
        n,
        batches,
    })
}

pub fn batched_matmul<E: Scalar>(
    a_shape: &[usize],
    a: &[E],
    b_shape: &[usize],
    b: &[E],
) -> Result<(Vec<usize>, Vec<E>)> {
    let p = matmul_plan(a_shape, b_shape)?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![E::zero(); p.batches.len() * m * n];
    if b_shape.len() == 2 {
        // A shared 2-D right operand: fold the batch into the row dimension.
        gemm_acc(p.batches.len() * m, k, n, a, b, &mut out);
        return Ok((p.out_shape, out));
    }
    for &(io, ia, ib) in &p.batches {
        gemm_acc(
            m,
            k,
            n,
            &a[ia * m * k..(ia + 1) * m * k],
            &b[ib * k * n..(ib + 1) * k * n],
            &mut out[io * m * n..(io + 1) * m * n],
        );
    }
    Ok((p.out_shape, out))
}

/// Gradients of a batched matmul with respect to both operands.
pub fn batched_matmul_backward<E: Scalar>(
    a_shape: &[usize],
    a: &[E],
    b_shape: &[usize],
    b: &[E],
    g: &[E],
) -> (Vec<E>, Vec<E>) {
    let p = matmul_plan(a_shape, b_shape).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let mut ga = vec![E::zero(); a.len()];
    let mut gb = vec![E::zero(); b.len()];
    if b_shape.len() == 2 {
        let rows = p.batches.len() * m;
        let bt = transpose2d(k, n, b);
        gemm_acc(rows, n, k, g, &bt, &mut ga);
        gemm_tn_acc(rows, k, n, a, g, &mut gb);
        return (ga, gb);
    }
    for &(io, ia, ib) in &p.batches {
        let gm = &g[io * m * n..(io + 1) * m * n];
        let bm = &b[ib * k * n..(ib + 1) * k * n];
        let bt = transpose2d(k, n, bm);
        gemm_acc(m, n, k, gm, &bt, &mut ga[ia * m * k..(ia + 1) * m * k]);
        let am = &a[ia * m * k..(ia + 1) * m * k];
        gemm_tn_acc(m, k, n, am, gm, &mut gb[ib * k * n..(ib + 1) * k * n]);
    }
    (ga, gb)
}

/// Splits a shape around `axis` into (outer, len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub fn softmax<E: Scalar>(shape: &[usize], x: &[E], axis: usize) -> Result<Vec<E>> {
    let (outer, n, inner) = axis_split(shape, axis)?;
    let mut y = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = E::neg_infinity();
            for j in 0..n {
                mx = mx.max(x[base + j * inner]);
            }
            let mut sum = E::zero();
            for j in 0..n {
                let e = (x[base + j * inner] - mx).exp();
                y[base + j * inner] = e;
                sum = sum + e;
            }
            for j in 0..n {
                y[base + j * inner] = y[base + j * inner] / sum;
            }
        }
    }
    Ok(y)
}

pub fn softmax_backward<E: Scalar>(shape: &[usize], y: &[E], g: &[E], axis: usize) -> Vec<E> {
    let (outer, n, inner) = axis_split(shape, axis).expect("validated in forward");
    let mut gx = vec![E::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = E::zero();
            for j in 0..n {
                dot = dot + g[base + j * inner] * y[base + j * inner];
            }
            for j in 0..n {
                let at = base + j * inner;
                gx[at] = y[at] * (g[at] - dot);
            }
        }
    }
    gx
}

pub struct LayerNormStats<E> {
    pub mean: Vec<E>,
    pub rstd: Vec<E>,
}

pub fn layer_norm<E: Scalar>(
    shape: &[usize],
    x: &[E],
    axis: usize,
    gamma: &[E],
    beta: &[E],
    eps: E,
) -> Result<(Vec<E>, LayerNormStats<E>)> {
    let (outer, n, inner) = axis_split(shape, axis)?;
    if gamma.len() != n || beta.len() != n {
        return Err(Error::shape(&[gamma.len(), beta.len()], &[n]));
    }
    let inv_n = E::one() / E::lit(n as f64);
    let mut y = vec![E::zero(); x.len()];
    let mut mean = Vec::with_capacity(outer * inner);
    let mut rstd = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut s = E::zero();
            for j in 0..n {
                s = s + x[base + j * inner];
            }
            let mu = s * inv_n;
            let mut v = E::zero();
            for j in 0..n {
                let d = x[base + j * inner] - mu;
                v = v + d * d;
            }
            let r = E::one() / (v * inv_n + eps).sqrt();
            for j in 0..n {
                let at = base + j * inner;
                y[at] = (x[at] - mu) * r * gamma[j] + beta[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
    }
    Ok((y, LayerNormStats { mean, rstd }))
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward<E: Scalar>(
    shape: &[usize],
    x: &[E],
    axis: usize,
    gamma: &[E],
    stats: &LayerNormStats<E>,
    g: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (outer, n, inner) = axis_split(shape, axis).expect("validated in forward");
    let inv_n = E::one() / E::lit(n as f64);
    let mut dx = vec![E::zero(); x.len()];
    let mut dgamma = vec![E::zero(); n];
    let mut dbeta = vec![E::zero(); n];
    let mut xhat = vec![E::zero(); n];
    let mut dxhat = vec![E::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let slice = o * inner + i;
            let base = o * n * inner + i;
            let (mu, r) = (stats.mean[slice], stats.rstd[slice]);
            let mut sum_d = E::zero();
            let mut sum_dx = E::zero();
            for j in 0..n {
                let at = base + j * inner;
                xhat[j] = (x[at] - mu) * r;
                dxhat[j] = g[at] * gamma[j];
                dgamma[j] = dgamma[j] + g[at] * xhat[j];
                dbeta[j] = dbeta[j] + g[at];
                sum_d = sum_d + dxhat[j];
                sum_dx = sum_dx + dxhat[j] * xhat[j];
            }
            let mean_d = sum_d * inv_n;
            let mean_dx = sum_dx * inv_n;
            for j in 0..n {
                dx[base + j * inner] = r * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

pub fn conv_dims(x: &[usize], w: &[usize]) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::shape(x, w));
    }
    if x[1] != w[1] {
        return Err(Error::InvalidArgument(format!(
            "conv2d channel mismatch: input {x:?} has {} channels, weight {w:?} expects {}",
            x[1], w[1]
        )));
    }
    if w[2] % 2 == 0 || w[3] % 2 == 0 {
        return Err(Error::invalid_shape(w, "conv2d kernel must be odd-sized"));
    }
    Ok(ConvDims {
        batch: x[0],
        cin: x[1],
        cout: w[0],
        h: x[2],
        w: x[3],
        kh: w[2],
        kw: w[3],
    })
}

/// Iterates kernel taps with their valid output ranges under zero "same" padding.
/// `f(ky, kx, dy, dx, y0, y1, x0, x1)` where output (y, x) reads input (y+dy, x+dx).
#[allow(clippy::type_complexity)]
fn for_each_tap(d: &ConvDims, mut f: impl FnMut(usize, usize, isize, isize, usize, usize, usize, usize)) {
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let (h, w) = (d.h as isize, d.w as isize);
    for ky in 0..d.kh {
        let dy = ky as isize - ph;
        let y0 = (-dy).max(0);
        let y1 = (h - dy).min(h);
        if y0 >= y1 {
            continue;
        }
        for kx in 0..d.kw {
            let dx = kx as isize - pw;
            let x0 = (-dx).max(0);
            let x1 = (w - dx).min(w);
            if x0 >= x1 {
                continue;
            }
            f(ky, kx, dy, dx, y0 as usize, y1 as usize, x0 as usize, x1 as usize);
        }
    }
}

/// Lowers one image `[cin, h, w]` to columns `[cin*kh*kw, h*w]` (zero "same" padding).
fn im2col<E: Scalar>(d: &ConvDims, x: &[E], cols: &mut [E]) {
    let plane = d.h * d.w;
    cols.iter_mut().for_each(|v| *v = E::zero());
    for ci in 0..d.cin {
        let xin = &x[ci * plane..(ci + 1) * plane];
        for_each_tap(d, |ky, kx, dy, dx, y0, y1, x0, x1| {
            let row = (ci * d.kh + ky) * d.kw + kx;
            let col = &mut cols[row * plane..(row + 1) * plane];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                col[y * d.w + x0..y * d.w + x1].copy_from_slice(&xin[sy * d.w + sx0..sy * d.w + sx0 + (x1 - x0)]);
            }
        });
    }
}

/// Scatter-adds columns `[cin*kh*kw, h*w]` back onto an image gradient `[cin, h, w]`.
fn col2im<E: Scalar>(d: &ConvDims, cols: &[E], dx: &mut [E]) {
    let plane = d.h * d.w;
    for ci in 0..d.cin {
        let din = &mut dx[ci * plane..(ci + 1) * plane];
        for_each_tap(d, |ky, kx, dy, ddx, y0, y1, x0, x1| {
            let row = (ci * d.kh + ky) * d.kw + kx;
            let col = &cols[row * plane..(row + 1) * plane];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + ddx) as usize;
                let dst = &mut din[sy * d.w + sx0..sy * d.w + sx0 + (x1 - x0)];
                for (dv, &cv) in dst.iter_mut().zip(&col[y * d.w + x0..y * d.w + x1]) {
                    *dv = *dv + cv;
                }
            }
        });
    }
}

pub fn conv2d<E: Scalar>(
    x_shape: &[usize],
    x: &[E],
    w_shape: &[usize],
    w: &[E],
    bias: Option<&[E]>,
) -> Result<(Vec<usize>, Vec<E>)> {
    let d = conv_dims(x_shape, w_shape)?;
    if let Some(b) = bias {
        if b.len() != d.cout {
            return Err(Error::shape(&[b.len()], &[d.cout]));
        }
    }
    let plane = d.h * d.w;
    let kdim = d.cin * d.kh * d.kw;
    let mut out = vec![E::zero(); d.batch * d.cout * plane];
    let mut cols = vec![E::zero(); kdim * plane];
    for b in 0..d.batch {
        im2col(&d, &x[b * d.cin * plane..(b + 1) * d.cin * plane], &mut cols);
        let o = &mut out[b * d.cout * plane..(b + 1) * d.cout * plane];
        if let Some(bias) = bias {
            for (co, orow) in o.chunks_mut(plane).enumerate() {
                orow.iter_mut().for_each(|v| *v = bias[co]);
            }
        }
        gemm_acc(d.cout, kdim, plane, w, &cols, o);
    }
    Ok((vec![d.batch, d.cout, d.h, d.w], out))
}

/// Returns (dx, dw, dbias).
pub fn conv2d_backward<E: Scalar>(
    x_shape: &[usize],
    x: &[E],
    w_shape: &[usize],
    w: &[E],
    g: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let d = conv_dims(x_shape, w_shape).expect("validated in forward");
    let plane = d.h * d.w;
    let kdim = d.cin * d.kh * d.kw;
    let mut dx = vec![E::zero(); x.len()];
    let mut dw = vec![E::zero(); w.len()];
    let mut db = vec![E::zero(); d.cout];
    let mut cols = vec![E::zero(); kdim * plane];
    let mut cols_t = vec![E::zero(); plane * kdim];
    let mut dcols = vec![E::zero(); kdim * plane];
    for b in 0..d.batch {
        let go = &g[b * d.cout * plane..(b + 1) * d.cout * plane];
        for (co, grow) in go.chunks(plane).enumerate() {
            db[co] = db[co] + grow.iter().copied().sum::<E>();
        }
        im2col(&d, &x[b * d.cin * plane..(b + 1) * d.cin * plane], &mut cols);
        transpose_into(kdim, plane, &cols, &mut cols_t);
        // dW[cout, K] += g[cout, P] · colsᵀ[P, K]
        gemm_acc(d.cout, plane, kdim, go, &cols_t, &mut dw);
        // dcols[K, P] = Wᵀ[K, cout] · g[cout, P]
        dcols.iter_mut().for_each(|v| *v = E::zero());
        gemm_tn_acc(d.cout, kdim, plane, w, go, &mut dcols);
        col2im(&d, &dcols, &mut dx[b * d.cin * plane..(b + 1) * d.cin * plane]);
    }
    (dx, dw, db)
}

fn transpose_into<E: Scalar>(rows: usize, cols: usize, src: &[E], dst: &mut [E]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

pub fn gelu<E: Scalar>(x: E) -> E {
    let c = E::lit(GELU_SQRT_2_OVER_PI);
    let a = E::lit(GELU_CUBIC);
    let half = E::lit(0.5);
    half * x * (E::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<E: Scalar>(x: E) -> E {
    let c = E::lit(GELU_SQRT_2_OVER_PI);
    let a = E::lit(GELU_CUBIC);
    let half = E::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (E::one() + t) + half * x * (E::one() - t * t) * c * (E::one() + E::lit(3.0) * a * x * x)
}

pub struct AttentionDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub dv: usize,
}

pub fn attention_dims(q: &[usize], k: &[usize], v: &[usize]) -> Result<AttentionDims> {
    let r = q.len();
    if r < 2 || k.len() != r || v.len() != r {
        return Err(Error::shape(q, k));
    }
    if q[..r - 2] != k[..r - 2] || q[r - 1] != k[r - 1] {
        return Err(Error::shape(q, k));
    }
    if v[..r - 2] != k[..r - 2] || v[r - 2] != k[r - 2] {
        return Err(Error::shape(k, v));
    }
    Ok(AttentionDims {
        batch: q[..r - 2].iter().product(),
        lq: q[r - 2],
        lk: k[r - 2],
        d: q[r - 1],
        dv: v[r - 1],
    })
}

/// softmax(q·kᵀ·scale)·v over matching leading dims. Returns (out, probs).
pub fn attention<E: Scalar>(
    dims: &AttentionDims,
    q: &[E],
    k: &[E],
    v: &[E],
    scale: E,
) -> (Vec<E>, Vec<E>) {
    let AttentionDims { batch, lq, lk, d, dv } = *dims;
    let mut out = vec![E::zero(); batch * lq * dv];
    let mut probs = vec![E::zero(); batch * lq * lk];
    for bi in 0..batch {
        let qm = &q[bi * lq * d..(bi + 1) * lq * d];
        let km = &k[bi * lk * d..(bi + 1) * lk * d];
        let vm = &v[bi * lk * dv..(bi + 1) * lk * dv];
        let kt = transpose2d(lk, d, km);
        let pm = &mut probs[bi * lq * lk..(bi + 1) * lq * lk];
        gemm_acc(lq, d, lk, qm, &kt, pm);
        for row in pm.chunks_exact_mut(lk) {
            let mut mx = E::neg_infinity();
            for s in row.iter_mut() {
                *s = *s * scale;
                mx = mx.max(*s);
            }
            let mut sum = E::zero();
            for s in row.iter_mut() {
                *s = (*s - mx).exp();
                sum = sum + *s;
            }
            for s in row.iter_mut() {
                *s = *s / sum;
            }
        }
        gemm_acc(lq, lk, dv, pm, vm, &mut out[bi * lq * dv..(bi + 1) * lq * dv]);
    }
    (out, probs)
}

/// Returns (dq, dk, dv).
pub fn attention_backward<E: Scalar>(
    dims: &AttentionDims,
    q: &[E],
    k: &[E],
    v: &[E],
    probs: &[E],
    scale: E,
    g: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let AttentionDims { batch, lq, lk, d, dv } = *dims;
    let mut gq = vec![E::zero(); q.len()];
    let mut gk = vec![E::zero(); k.len()];
    let mut gv = vec![E::zero(); v.len()];
    let mut ds = vec![E::zero(); lq * lk];
    for bi in 0..batch {
        let qm = &q[bi * lq * d..(bi + 1) * lq * d];
        let km = &k[bi * lk * d..(bi + 1) * lk * d];
        let vm = &v[bi * lk * dv..(bi + 1) * lk * dv];
        let pm = &probs[bi * lq * lk..(bi + 1) * lq * lk];
        let gm = &g[bi * lq * dv..(bi + 1) * lq * dv];
        gemm_tn_acc(lq, lk, dv, pm, gm, &mut gv[bi * lk * dv..(bi + 1) * lk * dv]);
        ds.iter_mut().for_each(|x| *x = E::zero());
        let vt = transpose2d(lk, dv, vm);
        gemm_acc(lq, dv, lk, gm, &vt, &mut ds);
        for (drow, prow) in ds.chunks_exact_mut(lk).zip(pm.chunks_exact(lk)) {
            let mut dot = E::zero();
            for (&dp, &p) in drow.iter().zip(prow) {
                dot = dot + dp * p;
            }
            for (dp, &p) in drow.iter_mut().zip(prow) {
                *dp = p * (*dp - dot) * scale;
            }
        }
        gemm_acc(lq, lk, d, &ds, km, &mut gq[bi * lq * d..(bi + 1) * lq * d]);
        gemm_tn_acc(lq, lk, d, &ds, qm, &mut gk[bi * lk * d..(bi + 1) * lk * d]);
    }
    (gq, gk, gv)
}

/// Rotation table for rotary embeddings: `(cos, sin)` each `[positions.len(), d/2]`.
pub fn rope_table<E: Scalar>(positions: &[usize], d: usize, base: f64) -> (Vec<E>, Vec<E>) {
    let half = d / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &m in positions {
        for i in 0..half {
            let theta = base.powf(-2.0 * i as f64 / d as f64);
            let angle = m as f64 * theta;
            cos.push(E::lit(angle.cos()));
            sin.push(E::lit(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates coordinate pairs (2i, 2i+1) of each length-`d` row; rows cycle through
/// `positions`. `inverse` applies the transpose rotation (used for gradients).
pub fn rope_apply<E: Scalar>(
    x: &[E],
    d: usize,
    positions: &[usize],
    cos: &[E],
    sin: &[E],
    inverse: bool,
) -> Vec<E> {
    let half = d / 2;
    let l = positions.len();
    let mut out = x.to_vec();
    for (row_idx, row) in out.chunks_exact_mut(d).enumerate() {
        let pos = row_idx % l;
        if positions[pos] == 0 {
            continue;
        }
        let c = &cos[pos * half..(pos + 1) * half];
        let s = &sin[pos * half..(pos + 1) * half];
        for i in 0..half {
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            let (ci, si) = (c[i], if inverse { -s[i] } else { s[i] });
            row[2 * i] = a * ci - b * si;
            row[2 * i + 1] = a * si + b * ci;
        }
    }
    out
}
