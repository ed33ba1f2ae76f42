use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Shape of the broadcast of two equal-rank shapes. Each axis must either
/// match or be 1 on one side (e.g. a `[1, C, 1, 1]` per-channel vector or a
/// `[B, 1, H, W]` gate against `[B, C, H, W]`).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cannot broadcast shapes of different rank: {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::invalid(format!("incompatible shapes {a:?} and {b:?}"))),
        })
        .collect()
}

/// Row-major strides of `shape` as seen from `out`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == out[i] { acc } else { 0 };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the output.
fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, op);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), &shape, |o, i, j| out[o] = op(ad[i], bd[j]));
    Tensor::new(shape, out)
}

/// Element-wise product with broadcasting.
pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, |x, y| x * y)
}

/// Element-wise sum with broadcasting.
pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, |x, y| x + y)
}

/// Sums `grad` (of the broadcast output shape) back down to `shape`.
pub fn sum_to_shape<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = vec![T::zero(); shape.iter().product()];
    let gd = grad.data();
    for_each_broadcast(shape, grad.shape(), grad.shape(), |o, i, _| out[i] += gd[o]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// Broadcasts `x` up to `shape`.
pub(crate) fn expand<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let out = broadcast_shape(x.shape(), shape)?;
    if out != shape {
        return Err(Error::invalid(format!("cannot expand {:?} to {shape:?}", x.shape())));
    }
    let zero = Tensor::zeros(shape)?;
    add(&zero, x)
}
