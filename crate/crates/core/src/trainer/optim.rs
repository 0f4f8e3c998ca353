use crate::autodiff::{Scalar, Tape, Tensor, TensorError, Var};

/// Mean binary cross-entropy of `logits` against 0/1 `targets` of equal shape.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var, TensorError> {
    tape.bce_with_logits(logits, targets)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub hyper: AdamHyper,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(hyper: AdamHyper, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { hyper, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. A `None` gradient counts as zero.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&[T]>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match parameters");
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.t += 1;
        let h = self.hyper;
        let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::one() - T::lit(h.beta1.powi(self.t as i32));
        let c2 = T::one() - T::lit(h.beta2.powi(self.t as i32));
        let lr = T::lit(h.lr);
        let eps = T::lit(h.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let data = p.data_mut();
            match g {
                Some(g) => {
                    for i in 0..data.len() {
                        m[i] = b1 * m[i] + one_b1 * g[i];
                        v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                        data[i] = data[i] - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
                None => {
                    for i in 0..data.len() {
                        m[i] = b1 * m[i];
                        v[i] = b2 * v[i];
                        data[i] = data[i] - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
