use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SparseGeometry, KERNEL_VOLUME};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::params::Bound;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

pub const ENCODER: &str = "sfcn.encoder";
pub const DECODER: &str = "sfcn.decoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfcnConfig {
    pub voxel_size: f64,
    /// Channel width per level; the last one is the encoder output width.
    pub widths: Vec<usize>,
    /// Descriptor width.
    pub d_out: usize,
}

impl SfcnConfig {
    pub fn desk() -> Self {
        Self {
            voxel_size: 0.05,
            widths: vec![16, 32, 64],
            d_out: 16,
        }
    }

    pub fn full() -> Self {
        Self {
            voxel_size: 0.025,
            widths: vec![32, 64, 128, 256],
            d_out: 32,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn d_enc(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.d_out == 0 {
            return Err(Error::InvalidArgument(format!("bad sfcn widths {:?}/{}", self.widths, self.d_out)));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::InvalidArgument("sfcn voxel size must be positive".into()));
        }
        Ok(())
    }
}

/// Registers every encoder and decoder tensor.
pub fn init_params(cfg: &SfcnConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let w = &cfg.widths;
    for l in 0..w.len() {
        let c_in = if l == 0 { 1 } else { w[l - 1] };
        nn::add_kernel(store, rng, &format!("{ENCODER}.conv{l}"), KERNEL_VOLUME, c_in, w[l])?;
        nn::add_norm(store, &format!("{ENCODER}.norm{l}"), w[l])?;
        for j in 1..=2 {
            nn::add_kernel(store, rng, &format!("{ENCODER}.block{l}.conv{j}"), KERNEL_VOLUME, w[l], w[l])?;
            nn::add_norm(store, &format!("{ENCODER}.block{l}.norm{j}"), w[l])?;
        }
    }
    for l in (1..w.len()).rev() {
        nn::add_kernel(store, rng, &format!("{DECODER}.up{l}"), KERNEL_VOLUME, w[l], w[l - 1])?;
        nn::add_norm(store, &format!("{DECODER}.norm{l}"), w[l - 1])?;
    }
    nn::add_linear(store, rng, &format!("{DECODER}.final"), w[0], cfg.d_out, true)
}

/// Encoder outputs: the coarsest features (N′ × D_enc) and the per-level
/// activations the decoder adds back in.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub coarse: Var,
    pub skips: Vec<Var>,
}

fn conv<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    map: std::sync::Arc<crate::tensor::KernelMap>,
) -> Result<Var> {
    tape.kernel_conv(x, p.get(&format!("{name}.weight"))?, map)
}

pub fn sfcn_encode<T: Real>(tape: &mut Tape<T>, p: &Bound, geom: &SparseGeometry, cfg: &SfcnConfig) -> Result<Encoded> {
    if geom.depth() != cfg.levels() {
        return Err(Error::InvalidArgument(format!(
            "geometry has {} levels, network {}",
            geom.depth(),
            cfg.levels()
        )));
    }
    let mut x = tape.constant(Tensor::full(&[geom.levels[0].len(), 1], T::one()));
    let mut skips = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        let map = if l == 0 { geom.same(0) } else { geom.down(l - 1) };
        let h = conv(tape, p, &format!("{ENCODER}.conv{l}"), x, map)?;
        let h = nn::norm(tape, p, &format!("{ENCODER}.norm{l}"), h)?;
        let h = tape.relu(h)?;

        let b = format!("{ENCODER}.block{l}");
        let r = conv(tape, p, &format!("{b}.conv1"), h, geom.same(l))?;
        let r = nn::norm(tape, p, &format!("{b}.norm1"), r)?;
        let r = tape.relu(r)?;
        let r = conv(tape, p, &format!("{b}.conv2"), r, geom.same(l))?;
        let r = nn::norm(tape, p, &format!("{b}.norm2"), r)?;
        let sum = tape.add(r, h)?;
        x = tape.relu(sum)?;
        skips.push(x);
    }
    let coarse = skips.pop().expect("at least one level");
    Ok(Encoded { coarse, skips })
}

/// Upsamples `fused` (N′ × D_enc) back through the pyramid and returns unit
/// descriptors for every input point (N × D_out).
pub fn sfcn_decode<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    geom: &SparseGeometry,
    cfg: &SfcnConfig,
    fused: Var,
    enc: &Encoded,
) -> Result<Var> {
    if tape.value(fused).rows() != geom.coarse_len() || enc.skips.len() + 1 != geom.depth() {
        return Err(Error::InvalidArgument(format!(
            "decoder input has {} rows for {} coarse voxels",
            tape.value(fused).rows(),
            geom.coarse_len()
        )));
    }
    let mut x = fused;
    for l in (1..cfg.levels()).rev() {
        let h = conv(tape, p, &format!("{DECODER}.up{l}"), x, geom.up(l - 1))?;
        let h = nn::norm(tape, p, &format!("{DECODER}.norm{l}"), h)?;
        let h = tape.relu(h)?;
        x = tape.add(h, enc.skips[l - 1])?;
    }
    let y = nn::linear(tape, p, &format!("{DECODER}.final"), x, true)?;
    let per_point = tape.gather_rows(y, geom.point_rows.clone())?;
    tape.l2_normalize_rows(per_point)
}
