//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Builds `f` on a fresh tape from `params`, backpropagates, and compares
/// every analytic gradient entry against `(f(x+ε) − f(x−ε)) / 2ε`.
///
/// Returns the largest `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(v.data[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data[k];
            probe[pi].data[k] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data[k] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[pi].data[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
