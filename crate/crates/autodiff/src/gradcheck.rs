//! Central finite-difference oracle.
//!
//! Only forward values are used here, so the oracle stays independent of the
//! backward implementation it is checking.

use crate::params::{ParamId, ParamSet};

/// Norm-based relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central differences of `f` with respect to every trainable scalar.
///
/// Returns one vector per trainable parameter, in iteration order.
pub fn numeric_gradients<E>(
    params: &ParamSet,
    step: f64,
    mut f: impl FnMut(&ParamSet) -> Result<f64, E>,
) -> Result<Vec<(ParamId, Vec<f64>)>, E> {
    let mut work = params.clone();
    let mut out = Vec::new();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        if !params.is_trainable(id) {
            continue;
        }
        let n = params.get(id).len();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * step);
        }
        out.push((id, g));
    }
    Ok(out)
}

/// Flattens per-parameter gradients into one vector, in iteration order.
pub fn flatten(parts: &[(ParamId, Vec<f64>)]) -> Vec<f64> {
    parts.iter().flat_map(|(_, g)| g.iter().copied()).collect()
}
