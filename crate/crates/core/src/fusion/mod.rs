//! Cross-attention fusion and the two assembled networks.
//!
//! The student ([`DbeNet`]) fuses sparse-voxel features with kernel-point
//! features. The teacher ([`Teacher`]) has the same sparse branch but takes
//! its keys and values from a pointwise encoder over auxiliary channels.
//! Both expose their pre-decoder fused features for distillation.

mod attention;
mod aux;

pub use attention::{cross_attention, init_attention, Attended, ATTENTION};
pub use aux::{synth_aux_modality, with_synth_aux, ColorField, AUX_CHANNELS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{voxel_downsample, PointCloud};
use crate::kpfcn::{self, KernelDisposition, KpGeometry, KpfcnConfig};
use crate::nn;
use crate::sfcn::{self, SfcnConfig, SparseGeometry};
use crate::tensor::params::Bound;
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

pub const AUX: &str = "aux";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub sfcn: SfcnConfig,
    pub kpfcn: KpfcnConfig,
    /// Seed of the kernel-point repulsion.
    pub kernel_seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            sfcn: SfcnConfig::desk(),
            kpfcn: KpfcnConfig::desk(),
            kernel_seed: 15,
        }
    }

    pub fn full() -> Self {
        Self {
            sfcn: SfcnConfig::full(),
            kpfcn: KpfcnConfig::full(),
            kernel_seed: 15,
        }
    }

    /// Width of the attention keys and values.
    pub fn d_kv(&self) -> usize {
        self.kpfcn.d_kp()
    }

    pub fn validate(&self) -> Result<()> {
        self.sfcn.validate()?;
        self.kpfcn.validate()
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Unit descriptors, one row per input point.
    pub descriptors: Var,
    /// Pre-decoder fused features (N′ × D_enc).
    pub fused: Var,
    /// Attention weights (N′ × M′).
    pub attention: Var,
}

/// Common interface of student and teacher.
pub trait Network: Sync {
    /// Per-cloud geometry, built once and reused.
    type Input: Send + Sync;

    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
    fn prepare(&self, cloud: &PointCloud) -> Result<Self::Input>;
    fn sparse<'a>(&self, input: &'a Self::Input) -> &'a SparseGeometry;
    fn forward_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, input: &Self::Input) -> Result<Forward>;

    /// Unit descriptors for every point of `cloud`.
    fn describe(&self, cloud: &PointCloud) -> Result<Tensor<f32>> {
        let input = self.prepare(cloud)?;
        self.describe_prepared(&input)
    }

    fn describe_prepared(&self, input: &Self::Input) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.params().bind(&mut tape);
        let out = self.forward_on(&mut tape, &p, input)?;
        Ok(tape.value(out.descriptors).clone())
    }

    /// Fused features of a cloud, as used by distillation.
    fn fused_prepared(&self, input: &Self::Input) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = self.params().bind(&mut tape);
        let out = self.forward_on(&mut tape, &p, input)?;
        Ok(tape.value(out.fused).clone())
    }
}

/// Student: sparse-voxel branch fused with the kernel-point branch.
#[derive(Clone, Debug, PartialEq)]
pub struct DbeNet {
    pub config: ModelConfig,
    pub kernel: KernelDisposition,
    pub params: ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct StudentInput {
    pub sparse: SparseGeometry,
    pub kp: KpGeometry,
}

impl DbeNet {
    /// Random initialization (uniform `±1/√fan_in`) from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        sfcn::init_params(&config.sfcn, &mut params, &mut rng)?;
        kpfcn::init_params(&config.kpfcn, &mut params, &mut rng)?;
        init_attention(&mut params, &mut rng, config.sfcn.d_enc(), config.d_kv())?;
        let kernel = KernelDisposition::generate(config.kpfcn.kernel_points, config.kernel_seed);
        Ok(Self { config, kernel, params })
    }
}

impl Network for DbeNet {
    type Input = StudentInput;

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn prepare(&self, cloud: &PointCloud) -> Result<StudentInput> {
        let c = &self.config;
        Ok(StudentInput {
            sparse: SparseGeometry::build(cloud, c.sfcn.voxel_size, c.sfcn.levels())?,
            kp: KpGeometry::build(cloud, &c.kpfcn, &self.kernel)?,
        })
    }

    fn sparse<'a>(&self, input: &'a StudentInput) -> &'a SparseGeometry {
        &input.sparse
    }

    fn forward_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, input: &StudentInput) -> Result<Forward> {
        let c = &self.config;
        let enc = sfcn::sfcn_encode(tape, p, &input.sparse, &c.sfcn)?;
        let kp = kpfcn::kpfcn_encode(tape, p, &input.kp, &c.kpfcn)?;
        let att = cross_attention(tape, p, enc.coarse, kp)?;
        let descriptors = sfcn::sfcn_decode(tape, p, &input.sparse, &c.sfcn, att.fused, &enc)?;
        Ok(Forward {
            descriptors,
            fused: att.fused,
            attention: att.weights,
        })
    }
}

/// Teacher: the same sparse branch fused with a pointwise encoder over the
/// auxiliary channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct TeacherInput {
    pub sparse: SparseGeometry,
    /// Auxiliary channels averaged over the coarsest sparse grid (M′ × 3).
    pub aux: Tensor<f64>,
}

impl Teacher {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        sfcn::init_params(&config.sfcn, &mut params, &mut rng)?;
        nn::add_linear(&mut params, &mut rng, &format!("{AUX}.fc1"), AUX_CHANNELS, config.d_kv(), true)?;
        nn::add_linear(&mut params, &mut rng, &format!("{AUX}.fc2"), config.d_kv(), config.d_kv(), true)?;
        init_attention(&mut params, &mut rng, config.sfcn.d_enc(), config.d_kv())?;
        Ok(Self { config, params })
    }
}

impl Network for Teacher {
    type Input = TeacherInput;

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn prepare(&self, cloud: &PointCloud) -> Result<TeacherInput> {
        if cloud.aux_channels() != AUX_CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "teacher needs {AUX_CHANNELS} auxiliary channels, cloud has {}",
                cloud.aux_channels()
            )));
        }
        let c = &self.config.sfcn;
        let sparse = SparseGeometry::build(cloud, c.voxel_size, c.levels())?;
        let cell = c.voxel_size * (1u64 << (c.levels() - 1)) as f64;
        let coarse = voxel_downsample(cloud, cell)?;
        let aux = Tensor::new(vec![coarse.len(), AUX_CHANNELS], coarse.aux().to_vec())?;
        Ok(TeacherInput { sparse, aux })
    }

    fn sparse<'a>(&self, input: &'a TeacherInput) -> &'a SparseGeometry {
        &input.sparse
    }

    fn forward_on<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, input: &TeacherInput) -> Result<Forward> {
        let c = &self.config;
        let enc = sfcn::sfcn_encode(tape, p, &input.sparse, &c.sfcn)?;
        let x = tape.constant(input.aux.cast());
        let h = nn::linear(tape, p, &format!("{AUX}.fc1"), x, true)?;
        let h = tape.relu(h)?;
        let kv = nn::linear(tape, p, &format!("{AUX}.fc2"), h, true)?;
        let att = cross_attention(tape, p, enc.coarse, kv)?;
        let descriptors = sfcn::sfcn_decode(tape, p, &input.sparse, &c.sfcn, att.fused, &enc)?;
        Ok(Forward {
            descriptors,
            fused: att.fused,
            attention: att.weights,
        })
    }
}
