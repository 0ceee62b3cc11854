use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Scalar-valued function of the recorded inputs, used by [`grad_check`].
pub trait GradCheckFn: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> GradCheckFn for F {}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`, returning the largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over every entry of every input.
pub fn grad_check(f: impl GradCheckFn, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Domain(format!("grad_check step must be positive, got {h}")));
    }
    let eval = |inputs: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.shape(out)
            )));
        }
        let value = g.data(out)[0];
        let mut grads = Vec::new();
        if with_grad {
            g.backward(out)?;
            grads = vars
                .iter()
                .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
                .collect();
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[ti].data()[j];
            probe[ti].data_mut()[j] = orig + h;
            let (plus, _) = eval(&probe, false)?;
            probe[ti].data_mut()[j] = orig - h;
            let (minus, _) = eval(&probe, false)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
