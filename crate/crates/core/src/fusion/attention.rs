use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::params::Bound;
use crate::tensor::{ParamStore, Real, Tape, Var};

pub const ATTENTION: &str = "attention";

/// Registers `W_Q (D_enc × d)`, `W_K`, `W_V (D_kv × d)` and the two-layer MLP
/// `d → d → D_enc`, with `d = D_kv`.
pub fn init_attention(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, d_enc: usize, d_kv: usize) -> Result<()> {
    let d = d_kv;
    nn::add_linear(store, rng, &format!("{ATTENTION}.wq"), d_enc, d, false)?;
    nn::add_linear(store, rng, &format!("{ATTENTION}.wk"), d_kv, d, false)?;
    nn::add_linear(store, rng, &format!("{ATTENTION}.wv"), d_kv, d, false)?;
    nn::add_linear(store, rng, &format!("{ATTENTION}.mlp1"), d, d, true)?;
    nn::add_linear(store, rng, &format!("{ATTENTION}.mlp2"), d, d_enc, true)
}

/// Output of [`cross_attention`] plus the softmax weights (N′ × M′).
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub fused: Var,
    pub weights: Var,
}

/// `F_q + MLP(softmax(Q Kᵀ / √d) V)` with `Q = F_q W_Q`, `K = F_kv W_K`,
/// `V = F_kv W_V`. The two row sets need not correspond.
pub fn cross_attention<T: Real>(tape: &mut Tape<T>, p: &Bound, fq: Var, fkv: Var) -> Result<Attended> {
    if tape.value(fkv).rows() == 0 || tape.value(fkv).is_empty() {
        return Err(Error::EmptyContext);
    }
    let q = nn::linear(tape, p, &format!("{ATTENTION}.wq"), fq, false)?;
    let k = nn::linear(tape, p, &format!("{ATTENTION}.wk"), fkv, false)?;
    let v = nn::linear(tape, p, &format!("{ATTENTION}.wv"), fkv, false)?;
    let d = tape.value(q).cols();
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax_rows(logits)?;
    let ctx = tape.matmul(weights, v)?;
    let h = nn::linear(tape, p, &format!("{ATTENTION}.mlp1"), ctx, true)?;
    let h = tape.relu(h)?;
    let m = nn::linear(tape, p, &format!("{ATTENTION}.mlp2"), h, true)?;
    let fused = tape.add(fq, m)?;
    Ok(Attended { fused, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn store(d_enc: usize, d_kv: usize) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        init_attention(&mut s, &mut ChaCha8Rng::seed_from_u64(1), d_enc, d_kv).unwrap();
        s
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f32> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_mlp(s: &mut ParamStore<f32>) {
        for n in ["mlp2.weight", "mlp2.bias"] {
            let p = s.get_mut(&format!("{ATTENTION}.{n}")).unwrap();
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_mlp_is_exact_identity() {
        let mut s = store(6, 4);
        zero_mlp(&mut s);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (fq, fkv) = (random(&mut rng, 5, 6), random(&mut rng, 3, 4));
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let (q, kv) = (tape.constant(fq.clone()), tape.constant(fkv));
        let out = cross_attention(&mut tape, &p, q, kv).unwrap();
        assert_eq!(tape.value(out.fused), &fq);
    }

    #[test]
    fn single_key_broadcasts_its_value() {
        let s = store(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (fq, fkv) = (random(&mut rng, 4, 3), random(&mut rng, 1, 2));
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let (q, kv) = (tape.constant(fq.clone()), tape.constant(fkv));
        let out = cross_attention(&mut tape, &p, q, kv).unwrap();
        assert!(tape.value(out.weights).data().iter().all(|&w| w == 1.0));
        let delta: Vec<Vec<f32>> = (0..4)
            .map(|i| {
                tape.value(out.fused)
                    .row(i)
                    .iter()
                    .zip(fq.row(i))
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        for row in &delta[1..] {
            for (a, b) in row.iter().zip(&delta[0]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_context_is_an_error() {
        let s = store(3, 2);
        let mut tape = Tape::<f32>::new();
        let p = s.bind(&mut tape);
        let q = tape.constant(Tensor::zeros(&[2, 3]));
        let kv = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(cross_attention(&mut tape, &p, q, kv), Err(Error::EmptyContext)));
    }

    #[test]
    fn two_by_two_matches_hand_evaluation() {
        // D_enc = d = D_kv = 2, identity projections, MLP with identity
        // layers and zero bias (relu keeps positive entries).
        let mut s = ParamStore::<f64>::new();
        let eye = Tensor::<f64>::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        for n in ["wq", "wk", "wv", "mlp1", "mlp2"] {
            s.insert(&format!("{ATTENTION}.{n}.weight"), eye.clone()).unwrap();
        }
        for n in ["mlp1", "mlp2"] {
            s.insert(&format!("{ATTENTION}.{n}.bias"), Tensor::zeros(&[2])).unwrap();
        }
        let fq = Tensor::<f64>::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let fkv = Tensor::<f64>::matrix(2, 2, vec![0.5, 1.0, 2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let (q, kv) = (tape.constant(fq.clone()), tape.constant(fkv.clone()));
        let out = cross_attention(&mut tape, &p, q, kv).unwrap();

        let r2 = 2f64.sqrt();
        let expected = |qi: [f64; 2]| -> [f64; 2] {
            let l0 = (qi[0] * 0.5 + qi[1] * 1.0) / r2;
            let l1 = (qi[0] * 2.0 + qi[1] * 0.0) / r2;
            let (e0, e1) = (l0.exp(), l1.exp());
            let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let ctx = [w0 * 0.5 + w1 * 2.0, w0 * 1.0 + w1 * 0.0];
            [qi[0] + ctx[0].max(0.0), qi[1] + ctx[1].max(0.0)]
        };
        for (i, qi) in [[1.0, 0.0], [0.0, 2.0]].into_iter().enumerate() {
            let e = expected(qi);
            let got = tape.value(out.fused).row(i);
            assert!((got[0] - e[0]).abs() < 1e-12 && (got[1] - e[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = store(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let q = tape.constant(random(&mut rng, 7, 8));
        let kv = tape.constant(random(&mut rng, 11, 4));
        let out = cross_attention(&mut tape, &p, q, kv).unwrap();
        let w = tape.value(out.weights);
        assert_eq!(w.shape(), &[7, 11]);
        for i in 0..7 {
            assert!((w.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(tape.value(out.fused).shape(), &[7, 8]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = store(3, 2).cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fq = random(&mut rng, 4, 3).cast::<f64>();
        let fkv = random(&mut rng, 5, 2).cast::<f64>();
        let names: Vec<String> = s.names().cloned().collect();
        let mut inputs = vec![fq, fkv];
        inputs.extend(names.iter().map(|n| s.tensor(n).unwrap().clone()));
        let report = check_gradients(
            &inputs,
            |tape, v| {
                let bound = crate::tensor::params::Bound::from_pairs(
                    names.iter().cloned().zip(v[2..].iter().copied()),
                );
                Ok(cross_attention(tape, &bound, v[0], v[1])?.fused)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
