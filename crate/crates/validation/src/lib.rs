//! Seeded end-to-end experiments: a fine-tuning loss curve, and a
//! transfer-versus-scratch comparison scored by registration recall.
//!
//! Every number is a function of the master seed alone, so reruns
//! reproduce them bit for bit at any thread count.

use std::time::Instant;

use dbenet_core::fusion::{DbeNet, ModelConfig, Network, Teacher};
use dbenet_core::io::{gen_dataset, Preset, SynthSceneConfig};
use dbenet_core::metrics::{rr, PairEvalRecord, RR_THRESHOLD};
use dbenet_core::registration::{register_pair, MatchMode, RansacConfig};
use dbenet_core::training::{self, default_scope, transfer_weights, FreezeMask, TrainConfig, TrainPair};
use dbenet_core::Result;

/// Seed from which every experiment derives its data, weights and RANSAC
/// streams.
pub const MASTER_SEED: u64 = 7;

/// Held-out pairs are drawn from an independent stream of the same generator.
const HELD_OUT_SALT: u64 = 0x6865_6c64;

pub fn train_pairs(preset: Preset, pairs: usize, seed: u64) -> Result<Vec<TrainPair>> {
    let name = match preset {
        Preset::Match => "match",
        Preset::Lomatch => "lomatch",
    };
    Ok(gen_dataset(&SynthSceneConfig::desk(), preset, pairs, seed)?
        .into_iter()
        .enumerate()
        .map(|(k, p)| TrainPair::from_synth(format!("{name}_{k:04}"), p))
        .collect())
}

fn train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::for_voxel(ModelConfig::desk().sfcn.voxel_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossCurve {
    pub epoch_loss: Vec<f64>,
    pub seconds: f64,
}

impl LossCurve {
    /// `1 − last / first`; 0.5 means the final epoch halved the first.
    pub fn reduction(&self) -> f64 {
        match (self.epoch_loss.first(), self.epoch_loss.last()) {
            (Some(&a), Some(&b)) if a > 0.0 => 1.0 - b / a,
            _ => 0.0,
        }
    }
}

/// Fine-tunes a freshly initialized student, every parameter trainable,
/// on `pairs` match-preset pairs.
pub fn loss_curve(pairs: usize, epochs: usize, seed: u64) -> Result<LossCurve> {
    let clock = Instant::now();
    let data = train_pairs(Preset::Match, pairs, seed)?;
    let mut net = DbeNet::new(ModelConfig::desk(), seed)?;
    let report = training::finetune(&mut net, &data, &FreezeMask::none(), &train_config(epochs, seed), None)?;
    Ok(LossCurve {
        epoch_loss: report.epoch_loss,
        seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Registration recall (%) of `net` over `pairs`. A pair without a model
/// counts as unregistered.
pub fn registration_recall<N: Network>(net: &N, pairs: &[TrainPair], seed: u64) -> Result<f64> {
    let voxel = net.config().sfcn.voxel_size;
    let ransac = RansacConfig {
        seed,
        ..RansacConfig::for_voxel(voxel)
    };
    let tau_pos = train_config(0, seed).loss.tau_pos;
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (r, corr) = register_pair(net, &p.src, &p.dst, MatchMode::Mutual, &ransac)?;
        let estimate = r.has_model().then_some(r.transform);
        records.push(PairEvalRecord::evaluate(
            &p.id,
            &corr,
            &p.src.points,
            &p.dst.points,
            &p.t_gt,
            estimate.as_ref(),
            tau_pos,
        ));
    }
    rr(&records, RR_THRESHOLD)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferComparison {
    pub rr_transfer: f64,
    pub rr_scratch: f64,
    pub seconds: f64,
}

/// Pretrains a teacher, then trains two students with the same data,
/// epochs and learning rate: one initialized from the teacher (encoder,
/// decoder and, shapes permitting, attention) with encoder and decoder
/// frozen, one from scratch with nothing frozen. Both are scored on `held_out` unseen pairs.
pub fn transfer_vs_scratch(train: usize, held_out: usize, epochs: usize, seed: u64) -> Result<TransferComparison> {
    let clock = Instant::now();
    let data = train_pairs(Preset::Match, train, seed)?;
    let test = train_pairs(Preset::Match, held_out, seed ^ HELD_OUT_SALT)?;
    let cfg = train_config(epochs, seed);

    let mut teacher = Teacher::new(ModelConfig::desk(), seed)?;
    let (ck, _) = training::pretrain_teacher(&mut teacher, &data, &cfg)?;

    let student_seed = seed.wrapping_add(1);
    let mut transferred = DbeNet::new(ModelConfig::desk(), student_seed)?;
    let scope = default_scope(&ck, &transferred.params);
    transferred.params = transfer_weights(&ck, &transferred.params, &scope)?.0;
    training::finetune(&mut transferred, &data, &FreezeMask::default_set(), &cfg, None)?;

    let mut scratch = DbeNet::new(ModelConfig::desk(), student_seed)?;
    training::finetune(&mut scratch, &data, &FreezeMask::none(), &cfg, None)?;

    Ok(TransferComparison {
        rr_transfer: registration_recall(&transferred, &test, seed)?,
        rr_scratch: registration_recall(&scratch, &test, seed)?,
        seconds: clock.elapsed().as_secs_f64(),
    })
}
