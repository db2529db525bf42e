use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative error between the tape gradient of `f` at `x` and a
/// central finite difference with step `eps`, per coordinate
/// `|a − fd| / (|a| + |fd| + 1e-12)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", alloc::format!("must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(xv, x.shape());

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t);
        let l = f(&mut tape, v)?;
        Ok(tape.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / (a.abs() + fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
