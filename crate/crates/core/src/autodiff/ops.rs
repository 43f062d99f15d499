//! Eager (tape-free) forms of the tensor operations, plus `log_sum_exp`.
//!
//! Each wrapper records onto a throwaway [`Tape`] so eager and differentiable
//! paths share one implementation.

use super::Tape;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn unary<T: Real>(
    x: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, super::Var) -> Result<super::Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x)?;
    let out = f(&mut tape, v)?;
    Ok(tape.tensor(out))
}

fn binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, super::Var, super::Var) -> Result<super::Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let va = tape.constant(a)?;
    let vb = tape.constant(b)?;
    let out = f(&mut tape, va, vb)?;
    Ok(tape.tensor(out))
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input)?;
    let w = tape.constant(weight)?;
    let b = bias.map(|b| tape.constant(b)).transpose()?;
    let y = tape.conv2d(x, w, b, stride, padding)?;
    Ok(tape.tensor(y))
}

pub fn conv_transpose2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input)?;
    let w = tape.constant(weight)?;
    let b = bias.map(|b| tape.constant(b)).transpose()?;
    let y = tape.conv_transpose2d(x, w, b, stride, padding)?;
    Ok(tape.tensor(y))
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, |t, x, y| t.add(x, y))
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, |t, x, y| t.sub(x, y))
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(a, b, |t, x, y| t.mul(x, y))
}

pub fn scale<T: Real>(x: &Tensor<T>, k: T) -> Result<Tensor<T>> {
    unary(x, |t, v| t.scale(v, k))
}

pub fn exp<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |t, v| t.exp(v))
}

pub fn log<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |t, v| t.log(v))
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |t, v| t.tanh(v))
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    unary(x, |t, v| t.leaky_relu(v, slope))
}

pub fn square<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    unary(x, |t, v| t.square(v))
}

pub fn sum<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    unary(x, |t, v| t.sum(v, axes))
}

pub fn mean<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    unary(x, |t, v| t.mean(v, axes))
}

/// `max(v) + ln Σ exp(v − max(v))`. A singleton returns its value exactly.
pub fn log_sum_exp<T: Real>(values: &[T]) -> Result<T> {
    let (&first, rest) = values
        .split_first()
        .ok_or_else(|| Error::arg("log_sum_exp of an empty sequence"))?;
    if rest.is_empty() {
        return Ok(first);
    }
    let max = rest.iter().copied().fold(first, T::max);
    if max == T::infinity() {
        return Ok(max);
    }
    if max == T::neg_infinity() {
        return Ok(max);
    }
    let s: T = values.iter().map(|v| (*v - max).exp()).sum();
    Ok(max + s.ln())
}

/// `log_sum_exp(values) − ln(len)`.
pub fn log_mean_exp<T: Real>(values: &[T]) -> Result<T> {
    let lse = log_sum_exp(values)?;
    Ok(lse - T::c(values.len() as f64).ln())
}
