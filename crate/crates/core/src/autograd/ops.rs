//! Differentiable operations on [`Var`].

use std::sync::Arc;

use super::tape::Var;
use crate::tensor::{split_axis, Real, Tensor};

/// `out (+)= op(a) @ op(b)` for row-major operands stored as `[rows, cols]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm<R: Real>(
    out: &mut [R],
    a: &[R],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[R],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    accumulate: bool,
) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    let beta = if accumulate { R::one() } else { R::zero() };
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|v| *v = R::zero());
        }
        return;
    }
    R::gemm(
        m, k, n, R::one(), a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1,
    );
}

/// Geometry of a 2D convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn im2col<R: Real>(x: &[R], b: usize, h: usize, w: usize, c: usize, g: ConvGeom) -> Vec<R> {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let row_len = k * k * c;
    let mut cols = vec![R::zero(); b * ho * wo * row_len];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<R: Real>(
    cols: &[R],
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    g: ConvGeom,
) -> Vec<R> {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let row_len = k * k * c;
    let mut x = vec![R::zero(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for (d, &s) in x[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Sparse linear map from input rows to output rows; each entry adds
/// `weight * input[src]` to `output[dst]`. Used for ROI-Align.
#[derive(Clone, Debug, Default)]
pub struct ResamplePlan<R> {
    pub out_rows: usize,
    pub in_rows: usize,
    pub entries: Vec<(u32, u32, R)>,
}

impl<R: Real> ResamplePlan<R> {
    /// Apply to a plain `[in_rows, c]` buffer.
    pub fn apply(&self, input: &[R], c: usize) -> Vec<R> {
        assert_eq!(input.len(), self.in_rows * c, "resample input size");
        let mut out = vec![R::zero(); self.out_rows * c];
        for &(dst, src, wgt) in &self.entries {
            let (d, s) = (dst as usize * c, src as usize * c);
            for (o, &i) in out[d..d + c].iter_mut().zip(&input[s..s + c]) {
                *o += wgt * i;
            }
        }
        out
    }

    fn apply_transpose(&self, grad: &[R], c: usize) -> Vec<R> {
        let mut out = vec![R::zero(); self.in_rows * c];
        for &(dst, src, wgt) in &self.entries {
            let (d, s) = (dst as usize * c, src as usize * c);
            for (o, &g) in out[s..s + c].iter_mut().zip(&grad[d..d + c]) {
                *o += wgt * g;
            }
        }
        out
    }
}

fn stable_log1p_exp<R: Real>(x: R) -> R {
    // log(1 + e^x)
    if x > R::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn softmax_rows<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let c = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(R::neg_infinity(), R::max);
        let mut s = R::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

/// Row-wise softmax of a plain tensor (last axis).
pub fn softmax<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    softmax_rows(x)
}

impl<'t, R: Real> Var<'t, R> {
    fn unary(
        &self,
        value: Tensor<R>,
        f: impl Fn(&Tensor<R>) -> Tensor<R> + 'static,
    ) -> Var<'t, R> {
        self.tape.push_op(value, &[self.id], move |g, _| vec![Some(f(g))])
    }

    pub fn add(&self, other: &Var<'t, R>) -> Var<'t, R> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape
            .push_op(out, &[self.id, other.id], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&self, other: &Var<'t, R>) -> Var<'t, R> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.push_op(out, &[self.id, other.id], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&self, other: &Var<'t, R>) -> Var<'t, R> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.push_op(out, &[self.id, other.id], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |u, v| u * v)),
                need[1].then(|| g.zip_map(&a, |u, v| u * v)),
            ]
        })
    }

    /// Broadcast-add a `[C]` vector over the last axis.
    pub fn add_row(&self, bias: &Var<'t, R>) -> Var<'t, R> {
        let (a, b) = (self.value(), bias.value());
        let c = a.last_dim();
        assert_eq!(b.len(), c, "add_row bias length");
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let bshape = b.shape().to_vec();
        self.tape.push_op(out, &[self.id, bias.id], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![R::zero(); c];
                for row in g.data().chunks(c) {
                    for (s, &v) in acc.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                Tensor::new(&bshape, acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// Broadcast-multiply by a `[C]` vector over the last axis.
    pub fn mul_row(&self, scale: &Var<'t, R>) -> Var<'t, R> {
        let (a, s) = (self.value(), scale.value());
        let c = a.last_dim();
        assert_eq!(s.len(), c, "mul_row scale length");
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, &sv) in row.iter_mut().zip(s.data()) {
                *v *= sv;
            }
        }
        let sshape = s.shape().to_vec();
        self.tape.push_op(out, &[self.id, scale.id], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = g.clone();
                for row in ga.data_mut().chunks_mut(c) {
                    for (v, &sv) in row.iter_mut().zip(s.data()) {
                        *v *= sv;
                    }
                }
                ga
            });
            let gs = need[1].then(|| {
                let mut acc = vec![R::zero(); c];
                for (grow, arow) in g.data().chunks(c).zip(a.data().chunks(c)) {
                    for ((s, &gv), &av) in acc.iter_mut().zip(grow).zip(arow) {
                        *s += gv * av;
                    }
                }
                Tensor::new(&sshape, acc)
            });
            vec![ga, gs]
        })
    }

    pub fn scale(&self, k: R) -> Var<'t, R> {
        let out = self.value().map(|v| v * k);
        self.unary(out, move |g| g.map(|v| v * k))
    }

    pub fn neg(&self) -> Var<'t, R> {
        self.scale(-R::one())
    }

    /// Multiply every element by a one-element variable.
    pub fn mul_scalar(&self, s: &Var<'t, R>) -> Var<'t, R> {
        let (a, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "mul_scalar expects a scalar");
        let k = sv.data()[0];
        let out = a.map(|v| v * k);
        let sshape = sv.shape().to_vec();
        self.tape.push_op(out, &[self.id, s.id], move |g, need| {
            vec![
                need[0].then(|| g.map(|v| v * k)),
                need[1].then(|| {
                    let d: R = g.data().iter().zip(a.data()).map(|(&u, &v)| u * v).sum();
                    Tensor::new(&sshape, vec![d])
                }),
            ]
        })
    }

    pub fn exp(&self) -> Var<'t, R> {
        let out = self.value().map(|v| v.exp());
        let y = out.clone();
        self.unary(out, move |g| g.zip_map(&y, |u, v| u * v))
    }

    pub fn relu(&self) -> Var<'t, R> {
        let x = self.value();
        let out = x.map(|v| v.max(R::zero()));
        self.unary(out, move |g| {
            g.zip_map(&x, |u, v| if v > R::zero() { u } else { R::zero() })
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, R> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape);
        self.unary(out, move |g| g.clone().reshape(&old))
    }

    /// Matrix product, optionally transposing either operand. Operands of
    /// rank > 2 are treated as batches of matrices over the leading axes.
    pub fn matmul_t(&self, other: &Var<'t, R>, ta: bool, tb: bool) -> Var<'t, R> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() >= 2 && b.rank() >= 2, "matmul needs rank >= 2");
        let (ar, ac) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (br, bc) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        let batch_a: usize = a.shape()[..a.rank() - 2].iter().product();
        let batch_b: usize = b.shape()[..b.rank() - 2].iter().product();
        assert_eq!(batch_a, batch_b, "matmul batch mismatch");
        let batch = batch_a;
        let m = if ta { ac } else { ar };
        let n = if tb { br } else { bc };
        let mut shape = a.shape()[..a.rank() - 2].to_vec();
        shape.extend([m, n]);
        let mut out = Tensor::zeros(&shape);
        let (sa, sb, so) = (ar * ac, br * bc, m * n);
        for i in 0..batch {
            mm(
                &mut out.data_mut()[i * so..(i + 1) * so],
                &a.data()[i * sa..(i + 1) * sa],
                ar,
                ac,
                ta,
                &b.data()[i * sb..(i + 1) * sb],
                br,
                bc,
                tb,
                false,
            );
        }
        let (ashape, bshape) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push_op(out, &[self.id, other.id], move |g, need| {
            let ga = need[0].then(|| {
                let mut ga = Tensor::zeros(&ashape);
                for i in 0..batch {
                    let gi = &g.data()[i * so..(i + 1) * so];
                    let bi = &b.data()[i * sb..(i + 1) * sb];
                    let dst = &mut ga.data_mut()[i * sa..(i + 1) * sa];
                    if ta {
                        // dA = op(B) dC^T
                        mm(dst, bi, br, bc, tb, gi, m, n, true, false);
                    } else {
                        // dA = dC op(B)^T
                        mm(dst, gi, m, n, false, bi, br, bc, !tb, false);
                    }
                }
                ga
            });
            let gb = need[1].then(|| {
                let mut gb = Tensor::zeros(&bshape);
                for i in 0..batch {
                    let gi = &g.data()[i * so..(i + 1) * so];
                    let ai = &a.data()[i * sa..(i + 1) * sa];
                    let dst = &mut gb.data_mut()[i * sb..(i + 1) * sb];
                    if tb {
                        // dB = dC^T op(A)
                        mm(dst, gi, m, n, true, ai, ar, ac, ta, false);
                    } else {
                        // dB = op(A)^T dC
                        mm(dst, ai, ar, ac, !ta, gi, m, n, false, false);
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(&self, other: &Var<'t, R>) -> Var<'t, R> {
        self.matmul_t(other, false, false)
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Var<'t, R> {
        let x = self.value();
        let r = x.rank();
        assert!(r >= 2);
        let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
        let batch = x.len() / (rows * cols).max(1);
        let swap = move |src: &Tensor<R>, rows: usize, cols: usize| {
            let mut shape = src.shape().to_vec();
            let r = shape.len();
            shape.swap(r - 2, r - 1);
            let mut out = Tensor::zeros(&shape);
            for bi in 0..batch {
                let o = bi * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out.data_mut()[o + j * rows + i] = src.data()[o + i * cols + j];
                    }
                }
            }
            out
        };
        let out = swap(&x, rows, cols);
        self.unary(out, move |g| swap(g, cols, rows))
    }

    /// `[A, B, C, D] -> [A, C, B, D]`.
    pub fn swap_axes_1_2(&self) -> Var<'t, R> {
        let x = self.value();
        assert_eq!(x.rank(), 4, "swap_axes_1_2 expects rank 4");
        let s = x.shape().to_vec();
        let f = |src: &Tensor<R>, s: &[usize]| {
            let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
            let mut out = Tensor::zeros(&[a, c, b, d]);
            for ai in 0..a {
                for bi in 0..b {
                    for ci in 0..c {
                        let src_o = ((ai * b + bi) * c + ci) * d;
                        let dst_o = ((ai * c + ci) * b + bi) * d;
                        out.data_mut()[dst_o..dst_o + d]
                            .copy_from_slice(&src.data()[src_o..src_o + d]);
                    }
                }
            }
            out
        };
        let out = f(&x, &s);
        let swapped = [s[0], s[2], s[1], s[3]];
        self.unary(out, move |g| f(g, &swapped))
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Var<'t, R>], axis: usize) -> Var<'t, R> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Arc<Tensor<R>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        for v in &values {
            assert_eq!(v.rank(), base.len(), "concat rank mismatch");
            for (d, (&x, &y)) in v.shape().iter().zip(&base).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch on axis {d}");
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mids: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = mids.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Tensor::zeros(&shape);
        for o in 0..outer {
            let mut off = 0;
            for (v, &m) in values.iter().zip(&mids) {
                let len = m * inner;
                let dst = (o * total + off) * inner;
                out.data_mut()[dst..dst + len]
                    .copy_from_slice(&v.data()[o * len..(o + 1) * len]);
                off += m;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.push_op(out, &ids, move |g, need| {
            let mut off = 0;
            let mut res = Vec::with_capacity(mids.len());
            for ((&m, shp), &want) in mids.iter().zip(&shapes).zip(need) {
                if want {
                    let len = m * inner;
                    let mut part = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        part.extend_from_slice(&g.data()[src..src + len]);
                    }
                    res.push(Some(Tensor::new(shp, part)));
                } else {
                    res.push(None);
                }
                off += m;
            }
            res
        })
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<'t, R> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, mid, inner) = split_axis(&shape, axis);
        assert!(start + len <= mid, "slice out of range");
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * mid + start) * inner;
            out.extend_from_slice(&x.data()[s..s + len * inner]);
        }
        self.unary(Tensor::new(&oshape, out), move |g| {
            let mut gx = Tensor::zeros(&shape);
            for o in 0..outer {
                let d = (o * mid + start) * inner;
                let s = o * len * inner;
                gx.data_mut()[d..d + len * inner]
                    .copy_from_slice(&g.data()[s..s + len * inner]);
            }
            gx
        })
    }

    /// Select entries of the leading axis (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t, R> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape[0];
        let row: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < n, "gather index {i} out of range {n}");
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut oshape = shape.clone();
        oshape[0] = idx.len();
        let idx = idx.to_vec();
        self.unary(Tensor::new(&oshape, out), move |g| {
            let mut gx = Tensor::zeros(&shape);
            for (k, &i) in idx.iter().enumerate() {
                let src = &g.data()[k * row..(k + 1) * row];
                for (d, &s) in gx.data_mut()[i * row..(i + 1) * row].iter_mut().zip(src) {
                    *d += s;
                }
            }
            gx
        })
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Var<'t, R> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, mid, inner) = split_axis(&shape, axis);
        let inv = R::one() / R::from_usize(mid).unwrap();
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let s = (o * mid + m) * inner;
                for (d, &v) in out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(&x.data()[s..s + inner])
                {
                    *d += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        self.unary(Tensor::new(&oshape, out), move |g| {
            let mut gx = Tensor::zeros(&shape);
            for o in 0..outer {
                for m in 0..mid {
                    let d = (o * mid + m) * inner;
                    for (t, &v) in gx.data_mut()[d..d + inner]
                        .iter_mut()
                        .zip(&g.data()[o * inner..(o + 1) * inner])
                    {
                        *t = v * inv;
                    }
                }
            }
            gx
        })
    }

    pub fn sum_all(&self) -> Var<'t, R> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.unary(out, move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn mean_all(&self) -> Var<'t, R> {
        let n = self.value().len().max(1);
        self.sum_all().scale(R::one() / R::from_usize(n).unwrap())
    }

    /// Divide each row (last axis) by its L2 norm.
    pub fn l2_normalize(&self) -> Var<'t, R> {
        let x = self.value();
        let c = x.last_dim();
        let eps = R::from_f64_lossy(1e-12);
        let norms: Vec<R> = x
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|&v| v * v).sum::<R>().sqrt().max(eps))
            .collect();
        let mut y = (*x).clone();
        for (row, &n) in y.data_mut().chunks_mut(c).zip(&norms) {
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let yc = y.clone();
        self.unary(y, move |g| {
            let mut gx = g.clone();
            for ((grow, yrow), &n) in gx.data_mut().chunks_mut(c).zip(yc.data().chunks(c)).zip(&norms) {
                let dot: R = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv = (*gv - yv * dot) / n;
                }
            }
            gx
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t, R> {
        let y = softmax_rows(&self.value());
        let c = y.last_dim();
        let yc = y.clone();
        self.unary(y, move |g| {
            let mut gx = g.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(yc.data().chunks(c)) {
                let dot: R = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (gv, &yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            gx
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, R>, beta: &Var<'t, R>, eps: f64) -> Var<'t, R> {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let c = x.last_dim();
        assert_eq!(gm.len(), c);
        assert_eq!(bt.len(), c);
        let eps = R::from_f64_lossy(eps);
        let cn = R::from_usize(c).unwrap();
        let rows = x.rows();
        let mut xhat = vec![R::zero(); x.len()];
        let mut inv_std = vec![R::zero(); rows];
        for (r, (row, out)) in x.data().chunks(c).zip(xhat.chunks_mut(c)).enumerate() {
            let mean = row.iter().copied().sum::<R>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / cn;
            let is = R::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut y = vec![R::zero(); x.len()];
        for (yrow, xrow) in y.chunks_mut(c).zip(xhat.chunks(c)) {
            for j in 0..c {
                yrow[j] = xrow[j] * gm.data()[j] + bt.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        self.tape.push_op(
            Tensor::new(&shape, y),
            &[self.id, gamma.id, beta.id],
            move |g, need| {
                let mut dg = vec![R::zero(); c];
                let mut db = vec![R::zero(); c];
                let mut dx = vec![R::zero(); g.len()];
                for (r, (grow, xrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut mean_d = R::zero();
                    let mut mean_dx = R::zero();
                    for j in 0..c {
                        dg[j] += grow[j] * xrow[j];
                        db[j] += grow[j];
                        let d = grow[j] * gm.data()[j];
                        mean_d += d;
                        mean_dx += d * xrow[j];
                    }
                    mean_d = mean_d / cn;
                    mean_dx = mean_dx / cn;
                    let out = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        let d = grow[j] * gm.data()[j];
                        out[j] = inv_std[r] * (d - mean_d - xrow[j] * mean_dx);
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(&shape, dx)),
                    need[1].then(|| Tensor::new(&[c], dg)),
                    need[2].then(|| Tensor::new(&[c], db)),
                ]
            },
        )
    }

    /// Batch normalization with batch statistics over every axis but the
    /// last. Returns the output together with the per-channel mean and
    /// (biased) variance used, for running-average bookkeeping.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, R>,
        beta: &Var<'t, R>,
        eps: f64,
    ) -> (Var<'t, R>, Vec<R>, Vec<R>) {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let c = x.last_dim();
        let rows = x.rows();
        let nr = R::from_usize(rows).unwrap();
        let eps = R::from_f64_lossy(eps);
        let mut mean = vec![R::zero(); c];
        let mut var = vec![R::zero(); c];
        for row in x.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nr);
        for row in x.data().chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v = *v / nr);
        let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![R::zero(); x.len()];
        let mut y = vec![R::zero(); x.len()];
        for ((xr, hr), yr) in x.data().chunks(c).zip(xhat.chunks_mut(c)).zip(y.chunks_mut(c)) {
            for j in 0..c {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
                yr[j] = hr[j] * gm.data()[j] + bt.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        let out = self.tape.push_op(
            Tensor::new(&shape, y),
            &[self.id, gamma.id, beta.id],
            move |g, need| {
                let mut dg = vec![R::zero(); c];
                let mut db = vec![R::zero(); c];
                for (grow, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dg[j] += grow[j] * hrow[j];
                        db[j] += grow[j];
                    }
                }
                let dx = need[0].then(|| {
                    let mut dx = vec![R::zero(); g.len()];
                    for ((grow, hrow), drow) in g
                        .data()
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(dx.chunks_mut(c))
                    {
                        for j in 0..c {
                            let gj = gm.data()[j];
                            drow[j] = gj * inv_std[j] * (grow[j] - db[j] / nr - hrow[j] * dg[j] / nr);
                        }
                    }
                    Tensor::new(&shape, dx)
                });
                vec![
                    dx,
                    need[1].then(|| Tensor::new(&[c], dg.clone())),
                    need[2].then(|| Tensor::new(&[c], db.clone())),
                ]
            },
        );
        (out, mean, var)
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t, R>,
        beta: &Var<'t, R>,
        mean: &[R],
        var: &[R],
        eps: f64,
    ) -> Var<'t, R> {
        let c = self.value().last_dim();
        let eps = R::from_f64_lossy(eps);
        let inv: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let shift: Vec<R> = mean.iter().zip(&inv).map(|(&m, &i)| -m * i).collect();
        let tape = self.tape;
        let inv = tape.constant(Tensor::new(&[c], inv));
        let shift = tape.constant(Tensor::new(&[c], shift));
        self.mul_row(&inv).add_row(&shift).mul_row(gamma).add_row(beta)
    }

    /// NHWC convolution with weight `[k, k, c_in, c_out]`, no bias.
    pub fn conv2d(&self, weight: &Var<'t, R>, geom: ConvGeom) -> Var<'t, R> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.rank(), 4, "conv2d input must be NHWC");
        let (b, h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ws = w.shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be [k,k,cin,cout]");
        assert_eq!((ws[0], ws[1], ws[2]), (geom.kernel, geom.kernel, ci), "conv2d weight shape {ws:?}");
        assert!(h + 2 * geom.pad >= geom.kernel && wd + 2 * geom.pad >= geom.kernel, "conv2d input too small");
        let co = ws[3];
        let (ho, wo) = (geom.out_size(h), geom.out_size(wd));
        let krows = geom.kernel * geom.kernel * ci;
        let direct = geom.kernel == 1 && geom.stride == 1 && geom.pad == 0;
        let cols: Arc<Vec<R>> = if direct {
            Arc::new(Vec::new())
        } else {
            Arc::new(im2col(x.data(), b, h, wd, ci, geom))
        };
        let colref = move |x: &Tensor<R>, cols: &Arc<Vec<R>>| -> Vec<R> {
            if direct {
                x.data().to_vec()
            } else {
                (**cols).clone()
            }
        };
        let m = b * ho * wo;
        let mut out = Tensor::zeros(&[b, ho, wo, co]);
        {
            let src: &[R] = if direct { x.data() } else { &cols };
            mm(out.data_mut(), src, m, krows, false, w.data(), krows, co, false, false);
        }
        let xshape = x.shape().to_vec();
        // The patch matrix is only needed for the weight gradient; drop it
        // from the closure when the weight is frozen.
        let keep_cols = weight.requires_grad();
        let cols = if keep_cols { cols } else { Arc::new(Vec::new()) };
        self.tape.push_op(out, &[self.id, weight.id], move |g, need| {
            let gx = need[0].then(|| {
                let mut dcols = vec![R::zero(); m * krows];
                mm(&mut dcols, g.data(), m, co, false, w.data(), krows, co, true, false);
                if direct {
                    Tensor::new(&xshape, dcols)
                } else {
                    Tensor::new(&xshape, col2im(&dcols, b, h, wd, ci, geom))
                }
            });
            let gw = need[1].then(|| {
                let src = colref(&x, &cols);
                let mut dw = Tensor::zeros(&ws);
                mm(dw.data_mut(), &src, m, krows, true, g.data(), m, co, false, false);
                dw
            });
            vec![gx, gw]
        })
    }

    /// Nearest-neighbour 2x upsampling of NHWC maps.
    pub fn upsample2x(&self) -> Var<'t, R> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = Tensor::zeros(&[b, 2 * h, 2 * w, c]);
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out.data_mut()[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
        self.unary(out, move |g| {
            let mut gx = Tensor::zeros(&s);
            for bi in 0..b {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                        let src = ((bi * 2 * h + y) * 2 * w + xx) * c;
                        for (d, &v) in gx.data_mut()[dst..dst + c].iter_mut().zip(&g.data()[src..src + c]) {
                            *d += v;
                        }
                    }
                }
            }
            gx
        })
    }

    /// Keep every second row and column (1x1 max-pool with stride 2).
    pub fn subsample2x(&self) -> Var<'t, R> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Tensor::zeros(&[b, ho, wo, c]);
        for bi in 0..b {
            for y in 0..ho {
                for xx in 0..wo {
                    let src = ((bi * h + 2 * y) * w + 2 * xx) * c;
                    let dst = ((bi * ho + y) * wo + xx) * c;
                    out.data_mut()[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
        self.unary(out, move |g| {
            let mut gx = Tensor::zeros(&s);
            for bi in 0..b {
                for y in 0..ho {
                    for xx in 0..wo {
                        let dst = ((bi * h + 2 * y) * w + 2 * xx) * c;
                        let src = ((bi * ho + y) * wo + xx) * c;
                        gx.data_mut()[dst..dst + c].copy_from_slice(&g.data()[src..src + c]);
                    }
                }
            }
            gx
        })
    }

    /// `[B, H, W, 4C] -> [B, 2H, 2W, C]`, channel blocks ordered (dy, dx).
    pub fn depth_to_space2x(&self) -> Var<'t, R> {
        let x = self.value();
        let s = x.shape().to_vec();
        let (b, h, w, c4) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c4 % 4, 0, "depth_to_space2x needs channels divisible by 4");
        let c = c4 / 4;
        let index = move |bi: usize, y: usize, xx: usize, dy: usize, dx: usize| {
            let src = ((bi * h + y) * w + xx) * c4 + (dy * 2 + dx) * c;
            let dst = ((bi * 2 * h + 2 * y + dy) * 2 * w + 2 * xx + dx) * c;
            (src, dst)
        };
        let mut out = Tensor::zeros(&[b, 2 * h, 2 * w, c]);
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (src, dst) = index(bi, y, xx, dy, dx);
                            out.data_mut()[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                        }
                    }
                }
            }
        }
        self.unary(out, move |g| {
            let mut gx = Tensor::zeros(&s);
            for bi in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (src, dst) = index(bi, y, xx, dy, dx);
                                gx.data_mut()[src..src + c].copy_from_slice(&g.data()[dst..dst + c]);
                            }
                        }
                    }
                }
            }
            gx
        })
    }

    /// Apply a sparse row map to a tensor viewed as `[rows, last_dim]`.
    /// The result has shape `out_shape` (its product must be
    /// `plan.out_rows * last_dim`).
    pub fn resample(&self, plan: Arc<ResamplePlan<R>>, out_shape: &[usize]) -> Var<'t, R> {
        let x = self.value();
        let c = x.last_dim();
        assert_eq!(x.rows(), plan.in_rows, "resample plan built for another input");
        let out = Tensor::new(out_shape, plan.apply(x.data(), c));
        let shape = x.shape().to_vec();
        self.unary(out, move |g| Tensor::new(&shape, plan.apply_transpose(g.data(), c)))
    }

    /// Mean over rows of `-weight_i * log softmax(logits_i)[target_i]`,
    /// divided by `norm` (not by the weight sum, so scaling weights scales
    /// the loss).
    pub fn weighted_cross_entropy(&self, targets: &[usize], weights: &[R], norm: R) -> Var<'t, R> {
        let x = self.value();
        let k = x.last_dim();
        let n = x.rows();
        assert_eq!(targets.len(), n, "one target per row");
        assert_eq!(weights.len(), n, "one weight per row");
        let p = softmax_rows(&x);
        let mut loss = R::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            assert!(t < k, "target {t} out of range {k}");
            let row = x.row(i);
            let m = row.iter().copied().fold(R::neg_infinity(), R::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<R>().ln();
            loss += w * (lse - row[t]);
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(loss / norm), move |g| {
            let s = g.data()[0] / norm;
            let mut gx = p.clone();
            for (i, row) in gx.data_mut().chunks_mut(k).enumerate() {
                row[targets[i]] -= R::one();
                row.iter_mut().for_each(|v| *v *= weights[i] * s);
            }
            gx.reshape(&shape)
        })
    }

    /// Sum of weighted binary cross-entropies with logits, divided by `norm`.
    pub fn bce_with_logits(&self, targets: &[R], weights: &[R], norm: R) -> Var<'t, R> {
        let x = self.value();
        assert_eq!(targets.len(), x.len());
        assert_eq!(weights.len(), x.len());
        let mut loss = R::zero();
        for ((&v, &t), &w) in x.data().iter().zip(targets).zip(weights) {
            // max(v,0) - v t + log(1 + e^-|v|) == log(1+e^v) - v t
            loss += w * (stable_log1p_exp(v) - v * t);
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.unary(Tensor::scalar(loss / norm), move |g| {
            let s = g.data()[0] / norm;
            let mut gx = (*x).clone();
            for ((v, &t), &w) in gx.data_mut().iter_mut().zip(&targets).zip(&weights) {
                *v = w * (sigmoid(*v) - t) * s;
            }
            gx
        })
    }

    /// Sum of smooth-L1 (Huber with transition `beta`) over elements whose
    /// weight is nonzero, divided by `norm`.
    pub fn smooth_l1(&self, targets: &[R], weights: &[R], beta: R, norm: R) -> Var<'t, R> {
        let x = self.value();
        assert_eq!(targets.len(), x.len());
        assert_eq!(weights.len(), x.len());
        let half = R::from_f64_lossy(0.5);
        let mut loss = R::zero();
        for ((&v, &t), &w) in x.data().iter().zip(targets).zip(weights) {
            let d = (v - t).abs();
            let l = if d < beta { half * d * d / beta } else { d - half * beta };
            loss += w * l;
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.unary(Tensor::scalar(loss / norm), move |g| {
            let s = g.data()[0] / norm;
            let mut gx = (*x).clone();
            for ((v, &t), &w) in gx.data_mut().iter_mut().zip(&targets).zip(&weights) {
                let d = *v - t;
                let dl = if d.abs() < beta { d / beta } else { d.signum() };
                *v = w * dl * s;
            }
            gx
        })
    }
}
