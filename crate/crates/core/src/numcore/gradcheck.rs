use super::params::Parameters;
use super::tape::{Bound, Tape, Var};
use crate::error::{Error, Result};

/// Loss value and autodiff gradients for one parameter store.
pub fn value_and_grad<F>(params: &Parameters, loss_fn: &F) -> Result<(f64, super::ParamGrads)>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let loss = loss_fn(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.for_params(&bound)))
}

fn loss_value<F>(params: &Parameters, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params, false);
    let loss = loss_fn(&mut tape, &bound)?;
    tape.check_finite()?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok(v)
}

/// Compare autodiff gradients against central finite differences on every
/// scalar parameter. Returns `max |g_ad - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F>(params: &Parameters, epsilon: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [1e-6, 1e-3]")));
    }
    let (base, grads) = value_and_grad(params, &loss_fn)?;
    if !base.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        for i in 0..params.get(id).len() {
            let original = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = original + epsilon;
            let up = loss_value(&probe, &loss_fn)?;
            probe.get_mut(id).data_mut()[i] = original - epsilon;
            let down = loss_value(&probe, &loss_fn)?;
            probe.get_mut(id).data_mut()[i] = original;
            let fd = (up - down) / (2.0 * epsilon);
            let ad = grads.get(id).data()[i];
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
