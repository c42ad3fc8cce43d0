//! Central finite-difference oracle for checking reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Largest relative disagreement between the taped gradient and a central
/// finite-difference estimate, maximized over every coordinate of every
/// parameter:
///
/// `max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`
///
/// `f` must build a scalar loss from the given parameters on the given
/// tape, and must be deterministic (dropout and any other RNG-driven
/// behaviour disabled); non-determinism is detected by evaluating the
/// base point twice and rejected with a contract error.
pub fn finite_difference_oracle<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference eps must lie in [1e-7, 1e-3], got {}",
            eps
        )));
    }

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, values)?;
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        Ok(loss.item())
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(
            "loss function is not deterministic; disable RNG-driven behaviour for gradient checks"
                .into(),
        ));
    }

    // Reverse-mode gradients at the base point.
    let mut tape = Tape::new();
    let tracked: Vec<Tensor> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &tracked)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = tracked.iter().map(|t| grads.get_or_zeros(t)).collect();

    let mut max_rel = 0.0_f64;
    for (pi, param) in params.iter().enumerate() {
        for j in 0..param.len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            let mut pd = param.data().to_vec();
            let orig = pd[j];
            pd[j] = orig + eps;
            plus[pi] = Tensor::new(param.shape(), pd.clone())?;
            pd[j] = orig - eps;
            minus[pi] = Tensor::new(param.shape(), pd)?;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let ad = analytic[pi].data()[j];
            let rel = (ad - fd).abs() / f64::max(1e-8, ad.abs() + fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
