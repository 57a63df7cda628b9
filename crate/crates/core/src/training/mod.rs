//! Correspondence mining, the contrastive and distillation objectives, weight
//! transfer, freezing, and the optimization loops.

mod loss;
mod mining;
mod transfer;

pub use loss::{hardest_contrastive_loss, kd_loss, ContrastiveTerms, KdConfig, KdVariant};
pub use mining::{mine_pairs, LossConfig, MiningResult};
pub use transfer::{default_scope, transfer_weights, FreezeMask, Scope, TransferReport, FREEZE_PRESETS};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Network, Teacher};
use crate::geom::{PointCloud, RigidTransform};
use crate::io::synth::SynthPair;
use crate::io::Checkpoint;
use crate::tensor::{Adam, AdamConfig, Gradients, Tape, Tensor};

/// One registered training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub id: String,
    pub src: PointCloud,
    pub dst: PointCloud,
    pub t_gt: RigidTransform,
}

impl TrainPair {
    pub fn from_synth(id: impl Into<String>, p: SynthPair) -> Self {
        Self {
            id: id.into(),
            src: p.src,
            dst: p.dst,
            t_gt: p.t_gt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub kd: Option<KdConfig>,
}

impl TrainConfig {
    pub fn for_voxel(voxel_size: f64) -> Self {
        Self {
            epochs: 10,
            batch_size: 2,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossConfig::for_voxel(voxel_size),
            kd: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if let Some(kd) = &self.kd {
            kd.validate()?;
        }
        self.loss.validate()
    }
}

/// Per-pair training record, one line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub epoch: usize,
    pub pair: String,
    pub skipped: bool,
    pub positives: usize,
    pub loss: Option<f64>,
    pub positive: Option<f64>,
    pub neg_src: Option<f64>,
    pub neg_dst: Option<f64>,
    pub kd: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the trained pairs of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Pair visits skipped for lack of positives.
    pub skipped: usize,
    pub records: Vec<StepRecord>,
}

struct Outcome {
    record: StepRecord,
    grads: Option<Gradients<f32>>,
}

const MINING_SALT: u64 = 0x6d69_6e65;

fn mining_seed(seed: u64, epoch: usize, pair: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MINING_SALT);
    rng.set_stream(((epoch as u64) << 32) | pair as u64);
    rng.next_u64()
}

fn scalar(tape: &Tape<f32>, v: crate::tensor::Var) -> f64 {
    tape.value(v).data()[0] as f64
}

fn pair_step<N: Network>(
    net: &N,
    inputs: &(N::Input, N::Input),
    pair: &TrainPair,
    teacher: Option<&(Tensor<f32>, Tensor<f32>)>,
    cfg: &TrainConfig,
    epoch: usize,
    seed: u64,
) -> Result<Outcome> {
    let mut tape = Tape::<f32>::new();
    let p = net.params().bind(&mut tape);
    let fs = net.forward_on(&mut tape, &p, &inputs.0)?;
    let fd = net.forward_on(&mut tape, &p, &inputs.1)?;
    let mut record = StepRecord {
        epoch,
        pair: pair.id.clone(),
        skipped: false,
        positives: 0,
        loss: None,
        positive: None,
        neg_src: None,
        neg_dst: None,
        kd: None,
    };
    let mining = match mine_pairs(
        tape.value(fs.descriptors),
        tape.value(fd.descriptors),
        &pair.src.points,
        &pair.dst.points,
        &pair.t_gt,
        &cfg.loss,
        seed,
    ) {
        Ok(m) => m,
        Err(Error::EmptyPositives) => {
            record.skipped = true;
            return Ok(Outcome { record, grads: None });
        }
        Err(e) => return Err(e),
    };
    let terms = hardest_contrastive_loss(&mut tape, fs.descriptors, fd.descriptors, &mining, &cfg.loss)?;
    let mut total = terms.total;
    if let (Some(kd), Some((ts, td))) = (&cfg.kd, teacher) {
        let a = kd_loss(&mut tape, ts, fs.fused, kd)?;
        let b = kd_loss(&mut tape, td, fd.fused, kd)?;
        let k = tape.add(a, b)?;
        let k = tape.scale(k, kd.weight)?;
        record.kd = Some(scalar(&tape, k));
        total = tape.add(total, k)?;
    }
    record.positives = mining.positives.len();
    record.loss = Some(scalar(&tape, total));
    record.positive = Some(scalar(&tape, terms.positive));
    record.neg_src = terms.neg_src.map(|v| scalar(&tape, v));
    record.neg_dst = terms.neg_dst.map(|v| scalar(&tape, v));
    if !record.loss.is_some_and(f64::is_finite) {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = tape.backward(total)?;
    Ok(Outcome {
        record,
        grads: Some(grads),
    })
}

/// Fine-tunes `net` with the hardest-contrastive loss, optionally plus
/// distillation against `teacher`'s fused features. Parameters matched by
/// `freeze` are never updated. Pairs of a batch run concurrently on
/// separate tapes; their gradients are averaged in pair order, so results
/// do not depend on the thread count.
pub fn finetune<N: Network>(
    net: &mut N,
    pairs: &[TrainPair],
    freeze: &FreezeMask,
    cfg: &TrainConfig,
    teacher: Option<&Teacher>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if cfg.kd.is_some() && teacher.is_none() {
        return Err(Error::InvalidArgument("distillation needs a teacher".into()));
    }
    freeze.apply(net.params_mut())?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }

    let inputs: Vec<(N::Input, N::Input)> = crate::par::map_slice(pairs, |p| Ok((net.prepare(&p.src)?, net.prepare(&p.dst)?)))
        .into_iter()
        .collect::<Result<_>>()?;
    let teacher_fused: Option<Vec<(Tensor<f32>, Tensor<f32>)>> = match (teacher, &cfg.kd) {
        (Some(t), Some(_)) => Some(
            crate::par::map_slice(pairs, |p| {
                Ok((
                    t.fused_prepared(&t.prepare(&p.src)?)?,
                    t.fused_prepared(&t.prepare(&p.dst)?)?,
                ))
            })
            .into_iter()
            .collect::<Result<_>>()?,
        ),
        _ => None,
    };

    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut sum, mut trained) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let net_ref: &N = net;
            let outcomes = crate::par::map_slice(batch, |&k| {
                pair_step(
                    net_ref,
                    &inputs[k],
                    &pairs[k],
                    teacher_fused.as_ref().map(|t| &t[k]),
                    cfg,
                    epoch,
                    mining_seed(cfg.seed, epoch, k),
                )
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

            let mut merged: Option<Gradients<f32>> = None;
            let mut used = 0usize;
            for o in outcomes {
                if o.record.skipped {
                    report.skipped += 1;
                } else {
                    sum += o.record.loss.unwrap_or(0.0);
                    trained += 1;
                }
                report.records.push(o.record);
                let Some(g) = o.grads else { continue };
                used += 1;
                match &mut merged {
                    None => merged = Some(g),
                    Some(acc) => {
                        for (name, t) in g {
                            match acc.get_mut(&name) {
                                Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(x, &y)| *x += y),
                                None => {
                                    acc.insert(name, t);
                                }
                            }
                        }
                    }
                }
            }
            let Some(mut grads) = merged else { continue };
            let inv = 1.0 / used as f32;
            grads.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
            // Trainable parameters the loss did not reach get a zero gradient.
            for (name, p) in net.params().iter() {
                if p.trainable && !grads.contains_key(name) {
                    grads.insert(name.clone(), Tensor::zeros(p.tensor.shape()));
                }
            }
            adam.step(net.params_mut(), &grads)?;
        }
        if trained == 0 {
            return Err(Error::EmptyPositives);
        }
        report.epoch_loss.push(sum / trained as f64);
    }
    Ok(report)
}

/// Trains every teacher parameter with the contrastive objective and
/// returns the resulting checkpoint.
pub fn pretrain_teacher(teacher: &mut Teacher, pairs: &[TrainPair], cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    let cfg = TrainConfig { kd: None, ..cfg.clone() };
    let report = finetune(teacher, pairs, &FreezeMask::none(), &cfg, None)?;
    Ok((Checkpoint::from_teacher(teacher, cfg.seed), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{DbeNet, ModelConfig};
    use crate::io::synth::{gen_pair, SynthSceneConfig};

    fn small_pairs(n: usize) -> Vec<TrainPair> {
        let cfg = SynthSceneConfig {
            points: 256,
            density: 400.0,
            overlap: 0.7,
            ..SynthSceneConfig::desk()
        };
        (0..n)
            .map(|k| TrainPair::from_synth(format!("p{k}"), gen_pair(&cfg, 100 + k as u64).unwrap()))
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: 5,
            loss: LossConfig {
                sample_count: 64,
                ..LossConfig::for_voxel(0.05)
            },
            ..TrainConfig::for_voxel(0.05)
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let mut net = DbeNet::new(ModelConfig::desk(), 1).unwrap();
        let before = net.params.clone();
        let r = finetune(&mut net, &small_pairs(1), &FreezeMask::none(), &cfg(0), None).unwrap();
        assert!(r.epoch_loss.is_empty());
        assert_eq!(net.params, before);
    }

    #[test]
    fn frozen_tensors_are_bit_invariant_and_others_move() {
        let mut net = DbeNet::new(ModelConfig::desk(), 1).unwrap();
        let before = net.params.clone();
        let mask = FreezeMask::default_set();
        let r = finetune(&mut net, &small_pairs(2), &mask, &cfg(1), None).unwrap();
        assert_eq!(r.epoch_loss.len(), 1);
        for (name, p) in net.params.iter() {
            let old = &before.get(name).unwrap().tensor;
            if mask.is_frozen(name) {
                assert_eq!(&p.tensor, old, "{name}");
            }
        }
        assert_ne!(net.params.tensor("kpfcn.conv0.weight").unwrap(), before.tensor("kpfcn.conv0.weight").unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = small_pairs(2);
        let run = || {
            let mut net = DbeNet::new(ModelConfig::desk(), 4).unwrap();
            let r = finetune(&mut net, &pairs, &FreezeMask::none(), &cfg(2), None).unwrap();
            (net.params, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pairs_without_positives_are_skipped() {
        let mut pairs = small_pairs(2);
        pairs[1].t_gt = RigidTransform::from_translation(nalgebra::Vector3::new(100.0, 0.0, 0.0));
        let mut net = DbeNet::new(ModelConfig::desk(), 1).unwrap();
        let r = finetune(&mut net, &pairs, &FreezeMask::none(), &cfg(1), None).unwrap();
        assert_eq!(r.skipped, 1);
        assert!(r.records.iter().any(|x| x.skipped && x.pair == "p1"));
    }

    #[test]
    fn distillation_adds_a_term() {
        let pairs = small_pairs(1);
        let teacher = Teacher::new(ModelConfig::desk(), 9).unwrap();
        let mut net = DbeNet::new(ModelConfig::desk(), 1).unwrap();
        let c = TrainConfig {
            kd: Some(KdConfig::new(KdVariant::Kl)),
            ..cfg(1)
        };
        let r = finetune(&mut net, &pairs, &FreezeMask::none(), &c, Some(&teacher)).unwrap();
        assert!(r.records[0].kd.is_some_and(|v| v > 0.0));
        let mut net = DbeNet::new(ModelConfig::desk(), 1).unwrap();
        assert!(finetune(&mut net, &pairs, &FreezeMask::none(), &c, None).is_err());
    }

    #[test]
    fn teacher_pretraining_emits_a_loadable_checkpoint() {
        let mut t = Teacher::new(ModelConfig::desk(), 2).unwrap();
        let (ck, r) = pretrain_teacher(&mut t, &small_pairs(1), &cfg(1)).unwrap();
        assert_eq!(r.epoch_loss.len(), 1);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_teacher().unwrap(), t);
    }
}
