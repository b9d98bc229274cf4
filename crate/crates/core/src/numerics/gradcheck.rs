use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of a scalar
/// function and its central finite difference:
/// `max_i |g_i − fd_i| / (|fd_i| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).expect("leaf gradient").to_vec();

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let y = f(&mut t, x)?;
        Ok(t.scalar(y))
    };

    let mut worst = 0.0f64;
    #[allow(clippy::needless_range_loop)]
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
