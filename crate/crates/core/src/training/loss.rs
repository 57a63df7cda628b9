use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mining::{LossConfig, MiningResult};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Scalar handles of the three hinge terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveTerms {
    pub total: Var,
    pub positive: Var,
    pub neg_src: Option<Var>,
    pub neg_dst: Option<Var>,
}

fn idx(v: impl IntoIterator<Item = usize>) -> Arc<Vec<usize>> {
    Arc::new(v.into_iter().collect())
}

/// `Σ [m − D]₊²` over rows of `a` against rows of `b`.
fn negative_hinge<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, m_n: f64) -> Result<Var> {
    let d = tape.row_distance(a, b)?;
    let d = tape.scale(d, -1.0)?;
    let h = tape.add_scalar(d, m_n)?;
    let h = tape.relu(h)?;
    let h = tape.square(h)?;
    tape.reduce_sum(h)
}

fn side<T: Real>(
    tape: &mut Tape<T>,
    anchors: Var,
    others: Var,
    pairs: &[(usize, Option<usize>)],
    cfg: &LossConfig,
    denom: usize,
) -> Result<Option<Var>> {
    let valid: Vec<(usize, usize)> = pairs.iter().filter_map(|&(a, n)| n.map(|n| (a, n))).collect();
    if valid.is_empty() {
        return Ok(None);
    }
    let a = tape.gather_rows(anchors, idx(valid.iter().map(|p| p.0)))?;
    let b = tape.gather_rows(others, idx(valid.iter().map(|p| p.1)))?;
    let s = negative_hinge(tape, a, b, cfg.m_n)?;
    Ok(Some(tape.scale(s, cfg.lambda_n / denom as f64)?))
}

/// Hardest-contrastive loss over mined pairs:
/// `Σ_P [D(f_i, f_j) − m_p]₊² / |P|` plus, for each side with a valid
/// negative, `λ_n [m_n − D(anchor, hardest)]₊²` divided by that side's
/// distinct-anchor count.
pub fn hardest_contrastive_loss<T: Real>(
    tape: &mut Tape<T>,
    f_src: Var,
    f_dst: Var,
    mining: &MiningResult,
    cfg: &LossConfig,
) -> Result<ContrastiveTerms> {
    let p = &mining.positives;
    if p.is_empty() {
        return Err(Error::EmptyPositives);
    }
    if mining.neg_src.len() != p.len() || mining.neg_dst.len() != p.len() {
        return Err(Error::InvalidArgument("mining result has ragged negative lists".into()));
    }
    let a = tape.gather_rows(f_src, idx(p.iter().map(|x| x.0)))?;
    let b = tape.gather_rows(f_dst, idx(p.iter().map(|x| x.1)))?;
    let d = tape.row_distance(a, b)?;
    let h = tape.add_scalar(d, -cfg.m_p)?;
    let h = tape.relu(h)?;
    let h = tape.square(h)?;
    let s = tape.reduce_sum(h)?;
    let positive = tape.scale(s, 1.0 / p.len() as f64)?;

    let src_pairs: Vec<(usize, Option<usize>)> = p.iter().zip(&mining.neg_src).map(|(x, &n)| (x.0, n)).collect();
    let dst_pairs: Vec<(usize, Option<usize>)> = p.iter().zip(&mining.neg_dst).map(|(x, &n)| (x.1, n)).collect();
    let neg_src = side(tape, f_src, f_dst, &src_pairs, cfg, mining.n_pi.max(1))?;
    let neg_dst = side(tape, f_dst, f_src, &dst_pairs, cfg, mining.n_pj.max(1))?;

    let mut total = positive;
    for t in [neg_src, neg_dst].into_iter().flatten() {
        total = tape.add(total, t)?;
    }
    Ok(ContrastiveTerms {
        total,
        positive,
        neg_src,
        neg_dst,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdVariant {
    Kl,
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub temperature: f64,
    pub variant: KdVariant,
    pub weight: f64,
}

impl KdConfig {
    pub fn new(variant: KdVariant) -> Self {
        Self {
            temperature: 1.0,
            variant,
            weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.weight >= 0.0) {
            return Err(Error::InvalidArgument("KD needs T > 0 and a non-negative weight".into()));
        }
        Ok(())
    }
}

/// Point-to-point distillation between fused features of equal shape.
/// `kl`: `Σ φ(t)·(log φ(t) − log φ(s)) / (N·C)` with the channel softmax
/// `φ` at temperature `T`; `l1`: mean `|t − s|`. The teacher is a constant.
pub fn kd_loss<T: Real>(tape: &mut Tape<T>, teacher: &Tensor<T>, student: Var, cfg: &KdConfig) -> Result<Var> {
    cfg.validate()?;
    if teacher.shape() != tape.shape(student) {
        return Err(Error::shape("kd_loss", teacher.shape(), tape.shape(student)));
    }
    let n = teacher.len();
    if n == 0 {
        return Err(Error::EmptyInput("kd_loss"));
    }
    let t = tape.constant(teacher.clone());
    let sum = match cfg.variant {
        KdVariant::L1 => {
            let d = tape.sub(student, t)?;
            let d = tape.abs(d)?;
            tape.reduce_sum(d)?
        }
        KdVariant::Kl => {
            let inv = 1.0 / cfg.temperature;
            let ts = tape.scale(t, inv)?;
            let ss = tape.scale(student, inv)?;
            let pt = tape.softmax_rows(ts)?;
            let lpt = tape.log_softmax_rows(ts)?;
            let lps = tape.log_softmax_rows(ss)?;
            let diff = tape.sub(lpt, lps)?;
            let e = tape.mul(pt, diff)?;
            tape.reduce_sum(e)?
        }
    };
    tape.scale(sum, 1.0 / n as f64)
}
