use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Compare analytic gradients against central differences.
///
/// `f` maps parameter blocks to `(loss, gradient blocks)`. Returns the max
/// over every parameter entry of `|analytic − numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(mut f: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss is {loss} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} parameter blocks but {} gradient blocks", params.len(), analytic.len()),
        ));
    }
    for (b, (p, g)) in params.iter().zip(&analytic).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "grad_check",
                format!("block {b}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for b in 0..work.len() {
        for idx in 0..work[b].as_slice().len() {
            let orig = work[b].as_slice()[idx];
            work[b].as_mut_slice()[idx] = orig + step;
            let plus = f(&work)?.0;
            work[b].as_mut_slice()[idx] = orig - step;
            let minus = f(&work)?.0;
            work[b].as_mut_slice()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is non-finite when perturbing block {b} entry {idx}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[b].as_slice()[idx] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
