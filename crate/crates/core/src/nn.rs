//! Layer building blocks shared by the backbones and the fusion head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};
use crate::tensor::params::Bound;

/// Variance floor of the per-channel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Uniform `±1/√fan_in` initialization.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

/// Registers `{name}.weight` of shape `(volume × c_in × c_out)`.
pub(crate) fn add_kernel(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    volume: usize,
    c_in: usize,
    c_out: usize,
) -> Result<()> {
    store.insert(
        &format!("{name}.weight"),
        uniform(rng, &[volume, c_in, c_out], volume * c_in),
    )
}

/// Registers `{name}.scale` (ones) and `{name}.shift` (zeros).
pub(crate) fn add_norm(store: &mut ParamStore<f32>, name: &str, c: usize) -> Result<()> {
    store.insert(&format!("{name}.scale"), Tensor::full(&[c], 1.0))?;
    store.insert(&format!("{name}.shift"), Tensor::zeros(&[c]))
}

/// Registers `{name}.weight (c_in × c_out)` and, if `bias`, `{name}.bias`.
pub(crate) fn add_linear(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    bias: bool,
) -> Result<()> {
    store.insert(&format!("{name}.weight"), uniform(rng, &[c_in, c_out], c_in))?;
    if bias {
        store.insert(&format!("{name}.bias"), uniform(rng, &[c_out], c_in))?;
    }
    Ok(())
}

/// Per-channel standardization over the rows, then learned scale and shift.
pub(crate) fn norm<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let z = tape.normalize_cols(x, NORM_EPS)?;
    let z = tape.mul_row(z, p.get(&format!("{name}.scale"))?)?;
    tape.add_row(z, p.get(&format!("{name}.shift"))?)
}

pub(crate) fn linear<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, bias: bool) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.weight"))?)?;
    if bias {
        tape.add_row(y, p.get(&format!("{name}.bias"))?)
    } else {
        Ok(y)
    }
}
