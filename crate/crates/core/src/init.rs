//! Parameter initialization.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::tensor::{Result, Tensor, TensorError};

/// `(fan_in, fan_out)` for a dense `[out, in]` or conv `[out, in, kh, kw]` weight.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [out, inp] => Ok((inp, out)),
        [out, inp, kh, kw] => Ok((inp * kh * kw, out * kh * kw)),
        _ => Err(TensorError::InvalidArgument {
            op: "xavier_init",
            msg: format!("cannot derive fans from shape {shape:?}"),
        }),
    }
}

/// Bound of the Xavier/Glorot uniform distribution, `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(shape: &[usize]) -> Result<f64> {
    let (fi, fo) = fans(shape)?;
    Ok((6.0 / (fi + fo) as f64).sqrt())
}

/// Xavier/Glorot uniform initialization.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let bound = xavier_bound(shape)?;
    let dist = Uniform::new_inclusive(-bound, bound);
    Ok(Tensor::from_fn(shape, |_| dist.sample(rng)))
}
