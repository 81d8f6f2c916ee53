use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compare the tape gradient of a scalar function against central finite
/// differences. Returns `max |analytic - numeric| / max(1, |analytic|)` over
/// every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut data = t.data().to_vec();
                    data[coord] += delta;
                    tape.constant(Tensor::new(t.shape().to_vec(), data)?)
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut worst = 0.0f64;
    for (which, grads) in analytic.iter().enumerate() {
        for (coord, &a) in grads.iter().enumerate() {
            let numeric = (eval(which, coord, h)? - eval(which, coord, -h)?) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
