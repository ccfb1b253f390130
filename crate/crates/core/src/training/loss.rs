//! Token-level losses over `[T x V]` logits.

use xmodal_tensor::{Graph, TensorError, Var};

use crate::error::{Error, Result};

fn check(g: &Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<(usize, usize)> {
    let shape = g.shape(logits);
    let [t, v] = *shape else {
        return Err(Error::Invalid(format!("logits must be [T x V], got {shape:?}")));
    };
    if targets.len() != t || mask.len() != t {
        return Err(Error::Invalid(format!(
            "{} targets and {} mask entries for {t} positions",
            targets.len(),
            mask.len()
        )));
    }
    if let Some(bad) = targets.iter().zip(mask).find(|(&id, &m)| m && id >= v) {
        return Err(Error::Invalid(format!("target {} outside vocabulary of {v}", bad.0)));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TensorError::Degenerate("loss over an all-masked sequence".into()).into());
    }
    Ok((v, count))
}

/// Mean of `-log softmax(logits)[target]` over unmasked positions.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let (v, count) = check(g, logits, targets, mask)?;
    let lsm = g.log_softmax(logits, 1)?;
    let idx: Vec<usize> = (0..targets.len())
        .filter(|&t| mask[t])
        .map(|t| t * v + targets[t])
        .collect();
    let picked = g.pick(lsm, &idx)?;
    let total = g.sum(picked)?;
    Ok(g.scale(total, -1.0 / count as f64)?)
}

/// `(1 - eps) * CE + (eps / V) * sum_k -log p_k`, averaged over unmasked
/// positions. At `eps == 0` this is [`cross_entropy_loss`].
pub fn label_smoothing_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool], epsilon: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config("training", "epsilon", format!("{epsilon} is not in [0, 1)")));
    }
    if epsilon == 0.0 {
        return cross_entropy_loss(g, logits, targets, mask);
    }
    let (v, count) = check(g, logits, targets, mask)?;
    let lsm = g.log_softmax(logits, 1)?;
    let rows: Vec<usize> = (0..targets.len()).filter(|&t| mask[t]).collect();
    let nll_idx: Vec<usize> = rows.iter().map(|&t| t * v + targets[t]).collect();
    let all_idx: Vec<usize> = rows.iter().flat_map(|&t| t * v..(t + 1) * v).collect();
    let nll = g.pick(lsm, &nll_idx)?;
    let nll = g.sum(nll)?;
    let smooth = g.pick(lsm, &all_idx)?;
    let smooth = g.sum(smooth)?;
    let a = g.scale(nll, -(1.0 - epsilon) / count as f64)?;
    let b = g.scale(smooth, -epsilon / (v * count) as f64)?;
    Ok(g.add(a, b)?)
}

/// Teacher-forcing probability `max(p_min, 1 - k * epoch)`.
pub fn scheduled_sampling_prob(epoch: usize, k: f64, p_min: f64) -> f64 {
    (1.0 - k * epoch as f64).max(p_min).min(1.0)
}
