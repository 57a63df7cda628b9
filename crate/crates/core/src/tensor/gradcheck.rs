//! Central finite-difference checks of tape gradients (64-bit).
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it checks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::Bound;
use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central difference step.
    pub step: f64,
    /// Seeds the random output projection and entry sampling.
    pub seed: u64,
    /// Check at most this many entries of each tensor (all when `None`).
    pub max_entries_per_tensor: Option<usize>,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            seed: 0x5eed,
            max_entries_per_tensor: None,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Checks the gradient of `Σ build(x) ⊙ R` (fixed random `R`) with respect
/// to every input tensor. Inputs are bound as `in0`, `in1`, ….
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::<f64>::new();
    for (i, t) in inputs.iter().enumerate() {
        store.insert(&format!("in{i}"), t.clone())?;
    }
    let n = inputs.len();
    check_params(
        &store,
        |tape, bound| {
            let vars = (0..n)
                .map(|i| bound.get(&format!("in{i}")))
                .collect::<Result<Vec<_>>>()?;
            build(tape, &vars)
        },
        cfg,
    )
}

/// Checks gradients with respect to every trainable parameter of `store`.
pub fn check_params<F>(store: &ParamStore<f64>, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let out = build(&mut tape, &bound)?;
    let shape = tape.shape(out).to_vec();
    let projection = Tensor::new(
        shape.clone(),
        (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let r = tape.constant(projection.clone());
    let weighted = tape.mul(out, r)?;
    let loss = tape.reduce_sum(weighted)?;
    let analytic = tape.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let out = build(&mut tape, &bound)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let len = store.tensor(&name)?.len();
        let entries: Vec<usize> = match cfg.max_entries_per_tensor {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let zeros = Tensor::zeros(store.tensor(&name)?.shape());
        let grad = analytic.get(&name).unwrap_or(&zeros);
        for idx in entries {
            let orig = store.tensor(&name)?.data()[idx];
            work.get_mut(&name).expect("cloned store").tensor.data_mut()[idx] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("cloned store").tensor.data_mut()[idx] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("cloned store").tensor.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = format!("{name}[{idx}]");
                }
            }
        }
    }
    Ok(report)
}
