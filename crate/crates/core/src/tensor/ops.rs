use rayon::prelude::*;

use super::{numel_of, Real, Tensor};
use crate::error::{Error, Result};

/// Rows-times-inner-times-cols threshold above which matmul rows are
/// distributed over the rayon pool. Each output row is still reduced in a
/// fixed order, so results do not depend on the thread count.
const PAR_GEMM_WORK: usize = 1 << 16;

/// `a[m×k] · b[k×n]`.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_GEMM_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_GEMM_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]` giving `k×n`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm(&transpose2(a, m, k), b, k, m, n)
}

fn transpose2<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "rank mismatch {a:?} vs {b:?} (no implicit rank promotion)"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For each flat index of `out_shape`, the flat index into `in_shape`
/// (size-1 dims repeat).
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = numel_of(out_shape);
    let in_strides = strides(in_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx
            .iter()
            .zip(in_shape)
            .zip(&in_strides)
            .map(|((&i, &d), &s)| if d == 1 { 0 } else { i * s })
            .sum();
        map.push(off);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_by_map<T: Real>(g: &[T], map: Option<&[usize]>, in_len: usize) -> Vec<T> {
    match map {
        None => g.to_vec(),
        Some(map) => {
            let mut out = vec![T::zero(); in_len];
            for (&gi, &m) in g.iter().zip(map) {
                out[m] += gi;
            }
            out
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_scalar<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Real> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let (map_a, map_b) = if self.shape() == other.shape() {
            (None, None)
        } else {
            (
                (self.shape() != out_shape.as_slice()).then(|| broadcast_map(&out_shape, self.shape())),
                (other.shape() != out_shape.as_slice()).then(|| broadcast_map(&out_shape, other.shape())),
            )
        };
        let a = self.to_vec();
        let b = other.to_vec();
        let n = numel_of(&out_shape);
        let ai = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
        let bi = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (a[ai(i)], b[bi(i)]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();

        let (len_a, len_b) = (a.len(), b.len());
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        Ok(Tensor::from_op(
            data,
            out_shape,
            name,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ai = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
                let bi = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
                let (ga, gb): (Vec<T>, Vec<T>) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                    Binary::Mul => (
                        g.iter().enumerate().map(|(i, &v)| v * b[bi(i)]).collect(),
                        g.iter().enumerate().map(|(i, &v)| v * a[ai(i)]).collect(),
                    ),
                    Binary::Div => (
                        g.iter().enumerate().map(|(i, &v)| v / b[bi(i)]).collect(),
                        g.iter()
                            .enumerate()
                            .map(|(i, &v)| {
                                let y = b[bi(i)];
                                -v * a[ai(i)] / (y * y)
                            })
                            .collect(),
                    ),
                };
                vec![
                    Some(reduce_by_map(&ga, map_a.as_deref(), len_a)),
                    Some(reduce_by_map(&gb, map_b.as_deref(), len_b)),
                ]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise map whose derivative is expressed through `(x, y)`.
    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let x = self.to_vec();
        let y: Vec<T> = x.iter().map(|&v| f(v)).collect();
        let y_saved = y.clone();
        Tensor::from_op(
            y,
            self.shape().to_vec(),
            name,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(&y_saved))
                        .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                        .collect(),
                )]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn softplus(&self) -> Tensor<T> {
        self.unary("softplus", softplus_scalar, |x, _| sigmoid(x))
    }

    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn reciprocal(&self) -> Tensor<T> {
        self.unary("reciprocal", |x| T::one() / x, |_, y| -y * y)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    /// Matrix product. Accepts `[m,k]·[k,n]`, batched `[B,m,k]·[B,k,n]`, and
    /// `[B,m,k]·[k,n]` (shared right operand).
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        match (self.rank(), other.rank()) {
            (2, 2) => self.matmul2(other),
            (3, 2) => {
                let (b, m, k) = (self.dim(0), self.dim(1), self.dim(2));
                let n = other.dim(1);
                self.reshape(&[b * m, k])?.matmul2(other)?.reshape(&[b, m, n])
            }
            (3, 3) => self.matmul_batched(other),
            (ra, rb) => Err(Error::dim(format!("matmul of rank {ra} by rank {rb}"))),
        }
    }

    fn matmul2(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (self.dim(0), self.dim(1));
        let (k2, n) = (other.dim(0), other.dim(1));
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let data = gemm(&a, &b, m, k, n);
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    need_a.then(|| gemm_nt(g, &b, m, n, k)),
                    need_b.then(|| gemm_tn(&a, g, m, k, n)),
                ]
            }),
        ))
    }

    fn matmul_batched(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (bs, m, k) = (self.dim(0), self.dim(1), self.dim(2));
        let (bs2, k2, n) = (other.dim(0), other.dim(1), other.dim(2));
        if bs != bs2 || k != k2 {
            return Err(Error::dim(format!(
                "batched matmul mismatch: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let mut data = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            data.extend(gemm(&a[i * m * k..(i + 1) * m * k], &b[i * k * n..(i + 1) * k * n], m, k, n));
        }
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        Ok(Tensor::from_op(
            data,
            vec![bs, m, n],
            "bmm",
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(if need_a { bs * m * k } else { 0 });
                let mut gb = Vec::with_capacity(if need_b { bs * k * n } else { 0 });
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if need_a {
                        ga.extend(gemm_nt(gi, &b[i * k * n..(i + 1) * k * n], m, n, k));
                    }
                    if need_b {
                        gb.extend(gemm_tn(&a[i * m * k..(i + 1) * m * k], gi, m, k, n));
                    }
                }
                vec![need_a.then_some(ga), need_b.then_some(gb)]
            }),
        ))
    }

    /// Splits the shape into (outer, axis length, inner) around `axis`.
    fn around(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::dim(format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let s = self.shape();
        Ok((
            numel_of(&s[..axis]),
            s[axis],
            numel_of(&s[axis + 1..]),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.around(axis)?;
        let x = self.data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let max = (0..len).map(|i| x[at(i)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    y[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    y[at(i)] /= sum;
                }
            }
        }
        drop(x);
        let y_saved = y.clone();
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            "softmax",
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let dot: T = (0..len).map(|i| g[at(i)] * y_saved[at(i)]).sum();
                        for i in 0..len {
                            gx[at(i)] = y_saved[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes over the last dimension, then applies `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm over width {d} with gain {:?} and bias {:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let eps = T::lit(eps);
        let x = self.to_vec();
        let gv = gain.to_vec();
        let bv = bias.to_vec();
        let rows = x.len() / d;
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let (need_x, need_g, need_b) = (self.requires_grad(), gain.requires_grad(), bias.requires_grad());
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            "layer_norm",
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); if need_x { g.len() } else { 0 }];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for c in 0..d {
                        gg[c] += gr[c] * hr[c];
                        gb[c] += gr[c];
                    }
                    if need_x {
                        let dh: Vec<T> = (0..d).map(|c| gr[c] * gv[c]).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for c in 0..d {
                            gx[r * d + c] = rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
                vec![need_x.then_some(gx), need_g.then_some(gg), need_b.then_some(gb)]
            }),
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<T> {
        let n = self.numel();
        let s = self.data().iter().copied().sum::<T>();
        Tensor::from_op(
            vec![s],
            vec![1],
            "sum",
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().mul_scalar(1.0 / self.numel() as f64)
    }

    /// Sums out `axis`. A rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.around(axis)?;
        let x = self.data();
        let mut y = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    y[o * inner + j] += x[o * len * inner + i * inner + j];
                }
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::from_op(
            y,
            shape,
            "sum_axis",
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            gx[o * len * inner + i * inner + j] = g[o * inner + j];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let len = self.around(axis)?.1;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / len as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.is_empty() || shape.contains(&0) || numel_of(shape) != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!("invalid permutation {axes:?} for rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides(&in_shape);
        let n = self.numel();
        // map[out_flat] = in_flat
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            map.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum::<usize>());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let x = self.data();
        let y: Vec<T> = map.iter().map(|&m| x[m]).collect();
        drop(x);
        Ok(Tensor::from_op(
            y,
            out_shape,
            "permute",
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); g.len()];
                for (&gi, &m) in g.iter().zip(&map) {
                    gx[m] = gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let (outer, full, inner) = self.around(axis)?;
        if len == 0 || start + len > full {
            return Err(Error::dim(format!(
                "narrow [{start}, {}) out of axis size {full}",
                start + len
            )));
        }
        let x = self.data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            y.extend_from_slice(&x[base..base + len * inner]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            y,
            shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (outer, _, inner) = first.around(axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            lens.push(p.dim(axis));
        }
        let total: usize = lens.iter().sum();
        let mut y = Vec::with_capacity(outer * total * inner);
        let datas: Vec<Vec<T>> = parts.iter().map(|p| p.to_vec()).collect();
        for o in 0..outer {
            for (d, &l) in datas.iter().zip(&lens) {
                y.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            y,
            shape,
            "concat",
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Reverses the order along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = self.around(axis)?;
        let flip_data = move |x: &[T]| {
            let mut y = Vec::with_capacity(x.len());
            for o in 0..outer {
                for i in (0..len).rev() {
                    let base = o * len * inner + i * inner;
                    y.extend_from_slice(&x[base..base + inner]);
                }
            }
            y
        };
        let y = flip_data(&self.data());
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            "flip",
            vec![self.clone()],
            Box::new(move |g| vec![Some(flip_data(g))]),
        ))
    }
}
