use super::{Scalar, Tape, Tensor, TensorError, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` receives a fresh tape and one leaf per entry of `params`, and must
/// return a scalar node. The result is the maximum over all parameter entries
/// of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], eps: T) -> Result<T, TensorError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<T>], requires_grad: bool| -> Result<(Tape<T>, Vec<Var>, Var), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect();
        let root = f(&mut tape, &vars)?;
        Ok((tape, vars, root))
    };

    let (tape, vars, root) = eval(params, true)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![T::zero(); p.numel()], <[T]>::to_vec))
        .collect();
    drop(tape);

    let floor = T::lit(1e-8);
    let two = T::lit(2.0);
    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, (p, grad)) in params.iter().zip(&analytic).enumerate() {
        for (k, &a) in grad.iter().enumerate().take(p.numel()) {
            let original = p.data()[k];
            work[pi].data_mut()[k] = original + eps;
            let (t_plus, _, r_plus) = eval(&work, false)?;
            let plus = t_plus.value(r_plus).data()[0];
            work[pi].data_mut()[k] = original - eps;
            let (t_minus, _, r_minus) = eval(&work, false)?;
            let minus = t_minus.value(r_minus).data()[0];
            work[pi].data_mut()[k] = original;

            let numeric = (plus - minus) / (two * eps);
            let rel = (a - numeric).abs() / floor.max(a.abs() + numeric.abs());
            if rel > worst || rel.is_nan() {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
