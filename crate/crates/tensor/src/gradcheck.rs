use crate::error::TensorError;
use crate::graph::Graph;
use crate::params::{ParamId, ParamStore};
use crate::tape::Var;

/// Compares reverse-mode gradients of `f` against central differences over
/// every trainable entry of `store`.
///
/// Returns the maximum of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
/// Gradients in `store` are zeroed on return.
///
/// `f` may fail with any error type that tensor errors convert into.
pub fn gradient_check<F, E>(store: &mut ParamStore, eps: f64, mut f: F) -> Result<f64, E>
where
    F: FnMut(&mut Graph) -> Result<Var, E>,
    E: From<TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::Usage("gradient_check eps must be positive".into()).into());
    }
    store.zero_grads();
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let mut tape = g.into_tape();
    tape.backward(loss, store)?;

    let ids: Vec<ParamId> = (0..store.len())
        .map(ParamId)
        .filter(|&id| store.by_id(id).requires_grad())
        .collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let t = store.by_id(id);
            t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        Ok(g.scalar(out))
    };

    let mut worst = 0.0f64;
    for (&id, grads) in ids.iter().zip(&analytic) {
        for (j, &a) in grads.iter().enumerate() {
            let orig = store.by_id(id).data()[j];
            store.by_id_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.by_id_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.by_id_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "gradient check of `{}`[{j}]",
                    store.name(id)
                ))
                .into());
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
