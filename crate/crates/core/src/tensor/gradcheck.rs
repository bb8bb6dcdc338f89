use super::{NodeId, ParamStore, Scalar, Tape};
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale; central
/// differences cannot resolve them relative to their own magnitude.
pub const GRAD_REL_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, GRAD_REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, element by element over every parameter in
/// `params`, and returns the worst [`relative_error`].
///
/// `f` records a scalar loss onto the tape it is given. Grad slots of
/// `params` are overwritten.
pub fn finite_diff_check<F>(params: &mut ParamStore<f64>, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    finite_diff_check_with(params, h, GRAD_REL_FLOOR, f)
}

/// [`finite_diff_check`] at any precision, with an explicit floor for the
/// relative-error denominator. Lower precisions need a larger `h` and floor.
pub fn finite_diff_check_with<T, F>(params: &mut ParamStore<T>, h: f64, floor: f64, f: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<NodeId>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward_into(loss, params)?;
    drop(tape);

    let eval = |p: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, p)?;
        Ok(Scalar::to_f64(tape.value(loss).data()[0]))
    };

    let mut worst = 0.0f64;
    for id in params.ids().collect::<Vec<_>>() {
        let analytic: Vec<T> = params.get(id).grad().map(<[T]>::to_vec).unwrap_or_default();
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = T::from_f64(Scalar::to_f64(orig) + h);
            let plus = eval(params)?;
            params.get_mut(id).data_mut()[i] = T::from_f64(Scalar::to_f64(orig) - h);
            let minus = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(i).map_or(0.0, |&v| Scalar::to_f64(v));
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
