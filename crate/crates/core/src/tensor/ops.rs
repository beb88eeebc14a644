//! Forward and backward kernels. All matrices are row-major; sequence maps
//! are `[time x features]`.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Score given to pooled positions that see only padding.
pub const MASKED: f64 = -1.0e4;

/// `y += a * x`
#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent partial sums; the summation order
/// depends only on the length, so results are reproducible.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

pub fn embedding<T: Real>(table: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    if table.shape().len() != 2 {
        return Err(shape_err("embedding", table.shape(), &[0, 0]));
    }
    if indices.is_empty() {
        return Err(Error::InvalidArgument("embedding lookup of empty sequence".into()));
    }
    let (rows, dim) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        if i >= rows {
            return Err(Error::IndexOutOfRange { index: i, rows });
        }
        out.extend_from_slice(table.row(i));
    }
    Tensor::matrix(indices.len(), dim, out)
}

pub fn embedding_backward<T: Real>(grad_table: &mut Tensor<T>, indices: &[usize], dy: &Tensor<T>) {
    for (t, &i) in indices.iter().enumerate() {
        let src = dy.row(t).to_vec();
        axpy(grad_table.row_mut(i), T::one(), &src);
    }
}

/// Valid 1-D cross-correlation over time. `weight` is `[width*D x F]`
/// (row `k*D + d` holds tap `k`, depth `d` of every filter).
pub fn conv1d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>, width: usize) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(shape_err("conv1d", x.shape(), weight.shape()));
    }
    let (len, dim) = (x.shape()[0], x.shape()[1]);
    let taps = width * dim;
    if weight.shape().len() != 2 || weight.shape()[0] != taps {
        return Err(shape_err("conv1d", x.shape(), weight.shape()));
    }
    let filters = weight.shape()[1];
    if bias.len() != filters {
        return Err(shape_err("conv1d", weight.shape(), bias.shape()));
    }
    if width == 0 || len < width {
        return Err(Error::InvalidArgument(format!(
            "conv1d: sequence length {len} shorter than filter width {width}"
        )));
    }
    let steps = len - width + 1;
    let xs = x.data();
    let mut out = Vec::with_capacity(steps * filters);
    for t in 0..steps {
        let mut row = bias.data().to_vec();
        let window = &xs[t * dim..t * dim + taps];
        for (j, &a) in window.iter().enumerate() {
            if a != T::zero() {
                axpy(&mut row, a, weight.row(j));
            }
        }
        out.extend(row);
    }
    Tensor::matrix(steps, filters, out)
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv1d_backward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, width: usize, dy: &Tensor<T>) -> ConvGrads<T> {
    let dim = x.shape()[1];
    let taps = width * dim;
    let filters = weight.shape()[1];
    let mut dx = Tensor::zeros(x.shape());
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(&[filters]);
    let xs = x.data();
    for t in 0..dy.rows() {
        let g = dy.row(t);
        if g.iter().all(|v| *v == T::zero()) {
            continue;
        }
        axpy(dbias.data_mut(), T::one(), g);
        for j in 0..taps {
            let xv = xs[t * dim + j];
            dx.data_mut()[t * dim + j] += dot(g, weight.row(j));
            if xv != T::zero() {
                axpy(dweight.row_mut(j), xv, g);
            }
        }
    }
    ConvGrads { dx, dweight, dbias }
}

/// Max over time per column. Positions with `mask[t] == false` are excluded;
/// a column with no unmasked position yields [`MASKED`] and no argmax.
/// Ties go to the earliest position.
pub fn maxpool_time<T: Real>(map: &Tensor<T>, mask: Option<&[bool]>) -> Result<(Tensor<T>, Vec<Option<usize>>)> {
    let (steps, cols) = (map.rows(), map.cols());
    if let Some(m) = mask {
        if m.len() != steps {
            return Err(shape_err("maxpool_time", map.shape(), &[m.len()]));
        }
    }
    let mut best: Vec<Option<usize>> = vec![None; cols];
    for t in 0..steps {
        if mask.is_some_and(|m| !m[t]) {
            continue;
        }
        let row = map.row(t);
        for (f, b) in best.iter_mut().enumerate() {
            match b {
                Some(bt) if map.row(*bt)[f] >= row[f] => {}
                _ => *b = Some(t),
            }
        }
    }
    let out = best
        .iter()
        .enumerate()
        .map(|(f, b)| b.map_or(T::lit(MASKED), |t| map.row(t)[f]))
        .collect();
    Ok((Tensor::vector(out), best))
}

pub fn maxpool_time_backward<T: Real>(shape: &[usize], argmax: &[Option<usize>], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape);
    for (f, a) in argmax.iter().enumerate() {
        if let Some(t) = a {
            dx.row_mut(*t)[f] += dy.data()[f];
        }
    }
    dx
}

/// Mean of the first `count` rows; all zeros when `count` is 0.
pub fn mean_time<T: Real>(map: &Tensor<T>, count: usize) -> Result<Tensor<T>> {
    if count > map.rows() {
        return Err(Error::InvalidArgument(format!(
            "mean_time: count {count} exceeds {} rows",
            map.rows()
        )));
    }
    let mut out = vec![T::zero(); map.cols()];
    if count > 0 {
        for t in 0..count {
            axpy(&mut out, T::one(), map.row(t));
        }
        let inv = T::one() / T::lit(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Tensor::vector(out))
}

pub fn mean_time_backward<T: Real>(shape: &[usize], count: usize, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape);
    if count > 0 {
        let inv = T::one() / T::lit(count as f64);
        for t in 0..count {
            axpy(dx.row_mut(t), inv, dy.data());
        }
    }
    dx
}

/// `x . W + b` for `x` of shape `[B x I]` or `[I]`, `W` of `[I x O]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let inputs = x.cols();
    if weight.shape().len() != 2 || weight.shape()[0] != inputs {
        return Err(shape_err("linear", x.shape(), weight.shape()));
    }
    let outputs = weight.shape()[1];
    if bias.len() != outputs {
        return Err(shape_err("linear", weight.shape(), bias.shape()));
    }
    let mut out = Vec::with_capacity(x.rows() * outputs);
    for b in 0..x.rows() {
        let mut row = bias.data().to_vec();
        for (i, &a) in x.row(b).iter().enumerate() {
            if a != T::zero() {
                axpy(&mut row, a, weight.row(i));
            }
        }
        out.extend(row);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = outputs;
    Tensor::new(shape, out)
}

pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn linear_backward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, dy: &Tensor<T>) -> LinearGrads<T> {
    let mut dx = Tensor::zeros(x.shape());
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(&[weight.shape()[1]]);
    for b in 0..x.rows() {
        let g = dy.row(b);
        axpy(dbias.data_mut(), T::one(), g);
        let xr = x.row(b).to_vec();
        let dxr = dx.row_mut(b);
        for (i, &xv) in xr.iter().enumerate() {
            dxr[i] = dot(g, weight.row(i));
            if xv != T::zero() {
                axpy(dweight.row_mut(i), xv, g);
            }
        }
    }
    LinearGrads { dx, dweight, dbias }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
    y
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Concatenation along the last axis; leading axes must agree.
pub fn concat<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    let lead = &first.shape()[..first.shape().len() - 1];
    for p in parts {
        if &p.shape()[..p.shape().len() - 1] != lead {
            return Err(shape_err("concat", first.shape(), p.shape()));
        }
    }
    let rows = first.rows();
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, out)
}

/// Splits a last-axis gradient back into the widths of the concatenated parts.
pub fn concat_backward<T: Real>(shapes: &[Vec<usize>], dy: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut outs: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for r in 0..dy.rows() {
        let row = dy.row(r);
        let mut off = 0;
        for o in outs.iter_mut() {
            let c = o.cols();
            o.row_mut(r).copy_from_slice(&row[off..off + c]);
            off += c;
        }
    }
    outs
}

/// Stacks equal-length vectors into a `[B x F]` matrix.
pub fn stack_rows<T: Real>(rows: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("stack of nothing".into()))?;
    let width = first.len();
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(shape_err("stack_rows", first.shape(), r.shape()));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::matrix(rows.len(), width, data)
}

/// Row-wise softmax with the max shifted out.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Mean over rows of `-log softmax(logits)[label]`, plus the probabilities.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let classes = logits.cols();
    if labels.len() != logits.rows() {
        return Err(shape_err("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    let mut total = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::IndexOutOfRange { index: y, rows: classes });
        }
        let row = logits.row(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        total += lse - row[y];
    }
    let n = T::lit(labels.len() as f64);
    Ok((total / n, softmax(logits)))
}

pub fn softmax_cross_entropy_backward<T: Real>(probs: &Tensor<T>, labels: &[usize], upstream: T) -> Tensor<T> {
    let mut d = probs.clone();
    let scale = upstream / T::lit(labels.len() as f64);
    for (r, &y) in labels.iter().enumerate() {
        let row = d.row_mut(r);
        row[y] -= T::one();
        row.iter_mut().for_each(|v| *v *= scale);
    }
    d
}
