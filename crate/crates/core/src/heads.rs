//! Classification heads: pooled linear scoring and label-wise attention.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Scalar, Tape, Tensor, TensorError, Var};
use crate::params::{xavier, Bound, ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("cannot aggregate an empty sequence of segment representations")]
    EmptySequence,
    #[error("missing head parameter {0}")]
    MissingParam(String),
    #[error("head parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParamShape { name: String, actual: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn stack<T: Scalar>(tape: &mut Tape<T>, reps: &[Var]) -> Result<Var, HeadError> {
    match reps {
        [] => Err(HeadError::EmptySequence),
        [one] => Ok(*one),
        _ => Ok(tape.concat(reps, 0)?),
    }
}

/// Elementwise mean of `(1, d)` segment representations.
pub fn aggregate_mean<T: Scalar>(tape: &mut Tape<T>, reps: &[Var]) -> Result<Var, HeadError> {
    let s = stack(tape, reps)?;
    let d = tape.shape(s)[1];
    let m = tape.reduce_mean(s, 0)?;
    Ok(tape.reshape(m, &[1, d])?)
}

/// Elementwise maximum of `(1, d)` segment representations.
pub fn aggregate_max<T: Scalar>(tape: &mut Tape<T>, reps: &[Var]) -> Result<Var, HeadError> {
    let s = stack(tape, reps)?;
    let d = tape.shape(s)[1];
    let m = tape.reduce_max(s, 0)?;
    Ok(tape.reshape(m, &[1, d])?)
}

fn find<T: Scalar>(store: &ParamStore<T>, name: String, shape: &[usize]) -> Result<ParamId, HeadError> {
    let id = store.id(&name).ok_or_else(|| HeadError::MissingParam(name.clone()))?;
    let actual = store.get(id).shape();
    if actual != shape {
        return Err(HeadError::ParamShape { name, actual: actual.to_vec(), expected: shape.to_vec() });
    }
    Ok(id)
}

/// `logits = x Mᵀ + b` with `M: (n_labels, d_model)`.
#[derive(Clone, Debug)]
pub struct LinearHead {
    m: ParamId,
    b: Option<ParamId>,
    n_labels: usize,
}

impl LinearHead {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, d_model: usize, n_labels: usize, bias: bool) -> Self {
        store.add("head.m", xavier(rng, n_labels, d_model));
        if bias {
            store.add("head.b", Tensor::zeros([n_labels]));
        }
        Self::from_store(store, d_model, n_labels, bias).expect("fresh parameters")
    }

    pub fn from_store<T: Scalar>(store: &ParamStore<T>, d_model: usize, n_labels: usize, bias: bool) -> Result<Self, HeadError> {
        let m = find(store, "head.m".into(), &[n_labels, d_model])?;
        let b = bias.then(|| find(store, "head.b".into(), &[n_labels])).transpose()?;
        Ok(Self { m, b, n_labels })
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    /// `doc_vec: (1, d_model)` to logits `(1, n_labels)`.
    ///
    /// Each logit is a row-wise product summed in index order, the same
    /// reduction the LAAT head uses, so a one-token LAAT head with `U = Mᵀ`
    /// reproduces these scores bit for bit.
    pub fn scores<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, doc_vec: Var) -> Result<Var, HeadError> {
        let d = tape.shape(params[self.m])[1];
        let x = tape.reshape(doc_vec, &[d])?;
        let prod = tape.mul(params[self.m], x)?;
        let z = tape.reduce_sum(prod, 1)?;
        let z = match self.b {
            Some(b) => tape.add(z, params[b])?,
            None => z,
        };
        Ok(tape.reshape(z, &[1, self.n_labels])?)
    }
}

/// Label-wise attention over token rows.
///
/// With `H: (n_tokens, d_model)` and parameters `V: (d_attn, d_model)`,
/// `W: (n_labels, d_attn)`, `U: (d_model, n_labels)`:
/// `Z = tanh(V Hᵀ)`, `A = softmax(W Z)` over tokens, label `i` is scored as
/// `⟨Σₜ A[i,t] H[t], U[:,i]⟩ + b_i`.
#[derive(Clone, Debug)]
pub struct LaatHead {
    v: ParamId,
    w: ParamId,
    u: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct LaatOutput {
    /// `(1, n_labels)`.
    pub logits: Var,
    /// `(n_labels, n_tokens)`, one distribution over tokens per label.
    pub attention: Var,
}

impl LaatHead {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        d_model: usize,
        d_attn: usize,
        n_labels: usize,
        bias: bool,
    ) -> Self {
        store.add("head.v", xavier(rng, d_attn, d_model));
        store.add("head.w", xavier(rng, n_labels, d_attn));
        store.add("head.u", xavier(rng, d_model, n_labels));
        if bias {
            store.add("head.b", Tensor::zeros([n_labels]));
        }
        Self::from_store(store, d_model, d_attn, n_labels, bias).expect("fresh parameters")
    }

    pub fn from_store<T: Scalar>(
        store: &ParamStore<T>,
        d_model: usize,
        d_attn: usize,
        n_labels: usize,
        bias: bool,
    ) -> Result<Self, HeadError> {
        Ok(Self {
            v: find(store, "head.v".into(), &[d_attn, d_model])?,
            w: find(store, "head.w".into(), &[n_labels, d_attn])?,
            u: find(store, "head.u".into(), &[d_model, n_labels])?,
            b: bias.then(|| find(store, "head.b".into(), &[n_labels])).transpose()?,
        })
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn scores<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, h: Var) -> Result<LaatOutput, HeadError> {
        let ht = tape.transpose(h)?;
        let z = tape.matmul(params[self.v], ht)?;
        let z = tape.tanh(z);
        let s = tape.matmul(params[self.w], z)?;
        let attention = tape.softmax(s, 1)?;
        let d = tape.matmul(attention, h)?;
        let ut = tape.transpose(params[self.u])?;
        let prod = tape.mul(d, ut)?;
        let logits = tape.reduce_sum(prod, 1)?;
        let logits = match self.b {
            Some(b) => tape.add(logits, params[b])?,
            None => logits,
        };
        let n = tape.shape(logits)[0];
        let logits = tape.reshape(logits, &[1, n])?;
        Ok(LaatOutput { logits, attention })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::params::normal;

    fn rows(t: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(t).unwrap()
    }

    fn laat_store(v: Tensor<f64>, w: Tensor<f64>, u: Tensor<f64>, b: Tensor<f64>) -> (LaatHead, ParamStore<f64>) {
        let (d_attn, d) = (v.shape()[0], v.shape()[1]);
        let n = w.shape()[0];
        let mut store = ParamStore::new();
        store.add("head.v", v);
        store.add("head.w", w);
        store.add("head.u", u);
        store.add("head.b", b);
        let head = LaatHead::from_store(&store, d, d_attn, n, true).unwrap();
        (head, store)
    }

    fn run_laat(head: &LaatHead, store: &ParamStore<f64>, h: &Tensor<f64>) -> (Vec<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let out = head.scores(&mut tape, &p, hv).unwrap();
        (tape.value(out.logits).data().to_vec(), tape.value(out.attention).clone())
    }

    fn random_laat(rng: &mut ChaCha8Rng, d: usize, d_attn: usize, n: usize) -> (LaatHead, ParamStore<f64>) {
        laat_store(
            normal(rng, &[d_attn, d], 1.0),
            normal(rng, &[n, d_attn], 1.0),
            normal(rng, &[d, n], 1.0),
            normal(rng, &[n], 1.0),
        )
    }

    fn aggregate(f: fn(&mut Tape<f64>, &[Var]) -> Result<Var, HeadError>, reps: &[Vec<f64>]) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = reps.iter().map(|r| tape.constant(rows(std::slice::from_ref(r)))).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate(aggregate_mean, &[vec![1.0, 3.0], vec![3.0, 5.0]]), [2.0, 4.0]);
        assert_eq!(aggregate(aggregate_mean, &[vec![7.0, -1.0]]), [7.0, -1.0]);
        assert_eq!(aggregate(aggregate_mean, &[vec![3.0, 5.0], vec![1.0, 3.0]]), [2.0, 4.0]);
        assert_eq!(aggregate(aggregate_max, &[vec![1.0, 5.0], vec![3.0, 2.0]]), [3.0, 5.0]);
        assert_eq!(aggregate(aggregate_max, &[vec![7.0, -1.0]]), [7.0, -1.0]);
        let twice = [vec![1.0, 5.0], vec![3.0, 2.0], vec![1.0, 5.0], vec![3.0, 2.0]];
        assert_eq!(aggregate(aggregate_max, &twice), [3.0, 5.0]);
        let mut tape = Tape::<f64>::new();
        assert_eq!(aggregate_mean(&mut tape, &[]), Err(HeadError::EmptySequence));
        assert_eq!(aggregate_max(&mut tape, &[]), Err(HeadError::EmptySequence));
    }

    fn linear(m: Tensor<f64>, b: Tensor<f64>, x: &[f64]) -> Vec<f64> {
        let (n, d) = (m.shape()[0], m.shape()[1]);
        let mut store = ParamStore::new();
        store.add("head.m", m);
        store.add("head.b", b);
        let head = LinearHead::from_store(&store, d, n, true).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(Tensor::new([1, d], x.to_vec()).unwrap());
        let out = head.scores(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.shape(out), [1, n]);
        tape.value(out).data().to_vec()
    }

    #[test]
    fn linear_examples() {
        assert_eq!(linear(Tensor::zeros([3, 4]), Tensor::zeros([3]), &[1.0, 2.0, 3.0, 4.0]), [0.0; 3]);
        let m = rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        let b = Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(linear(m, b, &[1.0, 0.0]), [1.5, -1.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = normal::<f64>(&mut rng, &[3, 5], 1.0);
        let b = normal::<f64>(&mut rng, &[3], 1.0);
        let x: Vec<f64> = normal::<f64>(&mut rng, &[5], 1.0).into_data();
        let got = linear(m.clone(), b.clone(), &x);
        for i in 0..3 {
            let want: f64 = (0..5).map(|j| m.at(&[i, j]) * x[j]).sum::<f64>() + b.data()[i];
            assert!((got[i] - want).abs() <= 1e-6);
        }
        let mut store = ParamStore::<f64>::new();
        store.add("head.m", Tensor::zeros([3, 4]));
        assert!(matches!(LinearHead::from_store(&store, 5, 3, false), Err(HeadError::ParamShape { .. })));
        assert!(matches!(LinearHead::from_store(&store, 4, 3, true), Err(HeadError::MissingParam(_))));
    }

    #[test]
    fn laat_two_by_two_matches_stepwise_oracle() {
        let id = || rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (head, store) = laat_store(id(), id(), id(), Tensor::zeros([2]));
        let (logits, a) = run_laat(&head, &store, &id());

        // Z = tanh(V Hᵀ) = tanh(I); scores = W Z = Z
        let t = 1f64.tanh();
        let z = [[t, 0.0], [0.0, t]];
        let mut want_a = [[0.0; 2]; 2];
        for i in 0..2 {
            let e = [z[i][0].exp(), z[i][1].exp()];
            want_a[i] = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        }
        for i in 0..2 {
            // D[:, i] = Σₜ A[i,t] H[t] = A[i]; logit_i = D[i, i]
            let want = want_a[i][i];
            assert!((logits[i] - want).abs() <= 1e-9, "{logits:?}");
            for tok in 0..2 {
                assert!((a.at(&[i, tok]) - want_a[i][tok]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn laat_single_token_equals_linear_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (head, store) = random_laat(&mut rng, 4, 4, 3);
        let h = normal::<f64>(&mut rng, &[1, 4], 1.0);
        let (logits, a) = run_laat(&head, &store, &h);
        assert_eq!(a.data(), [1.0; 3]);
        let u = store.get(store.id("head.u").unwrap());
        let mut ut = Vec::new();
        for i in 0..3 {
            for j in 0..4 {
                ut.push(u.at(&[j, i]));
            }
        }
        let b = store.get(store.id("head.b").unwrap()).clone();
        let lin = linear(Tensor::new([3, 4], ut).unwrap(), b, h.data());
        assert_eq!(logits, lin);
    }

    #[test]
    fn laat_zero_w_scores_the_token_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (head, mut store) = random_laat(&mut rng, 4, 6, 3);
        *store.get_mut(store.id("head.w").unwrap()) = Tensor::zeros([3, 6]);
        let h = normal::<f64>(&mut rng, &[5, 4], 1.0);
        let (logits, a) = run_laat(&head, &store, &h);
        assert!(a.data().iter().all(|&x| (x - 0.2).abs() <= 1e-12));
        let u = store.get(store.id("head.u").unwrap());
        let b = store.get(store.id("head.b").unwrap());
        for i in 0..3 {
            let mean: Vec<f64> = (0..4).map(|j| (0..5).map(|t| h.at(&[t, j])).sum::<f64>() / 5.0).collect();
            let want: f64 = (0..4).map(|j| mean[j] * u.at(&[j, i])).sum::<f64>() + b.data()[i];
            assert!((logits[i] - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn laat_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (head, store) = random_laat(&mut rng, 4, 4, 3);
        let h = normal::<f64>(&mut rng, &[5, 4], 1.0);
        let targets = Tensor::from_f64([1, 3], &[1.0, 0.0, 1.0]).unwrap();
        let mut params = store.tensors().to_vec();
        params.push(h);
        let err = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(vars[..4].to_vec());
                let out = head.scores(tape, &p, vars[4]).map_err(|e| match e {
                    HeadError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                tape.bce_with_logits(out.logits, &targets)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attention_rows_are_distributions(seed in any::<u64>(), d in 1usize..6, n in 1usize..5, t in 1usize..9, scale in 0.1f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (head, store) = random_laat(&mut rng, d, d, n);
            let h = normal::<f64>(&mut rng, &[t, d], scale);
            let (_, a) = run_laat(&head, &store, &h);
            for i in 0..n {
                let row: Vec<f64> = (0..t).map(|k| a.at(&[i, k])).collect();
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn token_permutation_is_equivariant(seed in any::<u64>(), t in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (head, store) = random_laat(&mut rng, 4, 4, 3);
            let h = normal::<f64>(&mut rng, &[t, 4], 1.0);
            let perm: Vec<usize> = rand::seq::index::sample(&mut rng, t, t).into_vec();
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&r| h.row(r).to_vec()).collect();
            let (l1, a1) = run_laat(&head, &store, &h);
            let (l2, a2) = run_laat(&head, &store, &rows(&permuted));
            for i in 0..3 {
                prop_assert!((l1[i] - l2[i]).abs() <= 1e-9);
                for (k, &src) in perm.iter().enumerate() {
                    prop_assert!((a2.at(&[i, k]) - a1.at(&[i, src])).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn mean_and_max_are_permutation_invariant(seed in any::<u64>(), s in 1usize..6, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reps: Vec<Vec<f64>> = (0..s).map(|_| normal::<f64>(&mut rng, &[d], 1.0).into_data()).collect();
            let mut rev = reps.clone();
            rev.reverse();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
            prop_assert!(close(&aggregate(aggregate_mean, &reps), &aggregate(aggregate_mean, &rev)));
            prop_assert_eq!(aggregate(aggregate_max, &reps), aggregate(aggregate_max, &rev));
        }
    }
}
