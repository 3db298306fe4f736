use crate::error::{check_len, Error, Result};
use crate::fisher::InverseCurvature;
use crate::scalar::Real;
use crate::space::{Mask, ParamSpace};

use super::stats::group_curvature;

/// Weight update together with the coordinates it removes.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneDecision<T> {
    pub removed: Vec<usize>,
    pub delta_w: Vec<T>,
    pub predicted_delta_loss: T,
}

fn check_removed<T: Real>(w: &ParamSpace<T>, mask: &Mask, removed: &[usize]) -> Result<()> {
    check_len("mask", mask.len(), w.dim())?;
    for &q in removed {
        if q >= w.dim() || !w.prunable()[q] || !mask.is_active(q) {
            return Err(Error::Structural(format!(
                "index {q} is not an active prunable weight"
            )));
        }
    }
    Ok(())
}

/// Makes removed coordinates land exactly on zero and keeps pruned ones
/// where they are.
fn pin<T: Real>(delta: &mut [T], w: &[T], mask: &Mask, removed: &[usize]) {
    for &q in removed {
        delta[q] = -w[q];
    }
    for (d, &a) in delta.iter_mut().zip(mask.active()) {
        if !a {
            *d = T::zero();
        }
    }
}

/// Sum of the single-removal OBS perturbations
/// `-w_q H⁻¹e_q / [H⁻¹]_qq` over `removed`.
pub fn pruning_direction<T: Real, I: InverseCurvature<T> + ?Sized>(
    w: &ParamSpace<T>,
    inv: &I,
    mask: &Mask,
    removed: &[usize],
) -> Result<Vec<T>> {
    check_removed(w, mask, removed)?;
    check_len("inverse curvature", inv.dim(), w.dim())?;
    let mut delta = vec![T::zero(); w.dim()];
    if removed.is_empty() {
        return Ok(delta);
    }
    let diag = inv.inverse_diagonal();
    let v = w.values();
    let mut coef = vec![T::zero(); w.dim()];
    for &q in removed {
        if !(diag[q] > T::zero()) {
            return Err(Error::numeric(
                "inverse curvature diagonal",
                format!("entry {q} is {}", diag[q]),
            ));
        }
        coef[q] = v[q] / diag[q];
    }
    for (d, x) in delta.iter_mut().zip(inv.ihvp(&coef)?) {
        *d = -x;
    }
    pin(&mut delta, v, mask, removed);
    Ok(delta)
}

/// Perturbation with the first-order term kept:
/// `-Σ_q (w_q - h_q) H⁻¹e_q / [H⁻¹]_qq - h` where `h = H⁻¹∇L`.
pub fn woodtaylor_direction<T: Real, I: InverseCurvature<T> + ?Sized>(
    w: &ParamSpace<T>,
    inv: &I,
    grad: &[T],
    mask: &Mask,
    removed: &[usize],
) -> Result<Vec<T>> {
    check_removed(w, mask, removed)?;
    check_len("gradient", grad.len(), w.dim())?;
    check_len("inverse curvature", inv.dim(), w.dim())?;
    let h = inv.ihvp(grad)?;
    let diag = inv.inverse_diagonal();
    let v = w.values();
    let mut coef = vec![T::zero(); w.dim()];
    for &q in removed {
        if !(diag[q] > T::zero()) {
            return Err(Error::numeric(
                "inverse curvature diagonal",
                format!("entry {q} is {}", diag[q]),
            ));
        }
        coef[q] = (v[q] - h[q]) / diag[q];
    }
    let mut delta: Vec<T> = inv
        .ihvp(&coef)?
        .iter()
        .zip(&h)
        .map(|(&a, &b)| -a - b)
        .collect();
    pin(&mut delta, v, mask, removed);
    Ok(delta)
}

/// `-(wᵀẽ) H⁻¹ẽ / (ẽᵀH⁻¹ẽ)` for the indicator `ẽ` of `group`.
pub fn structured_direction<T: Real, I: InverseCurvature<T> + ?Sized>(
    w: &ParamSpace<T>,
    inv: &I,
    group: &[usize],
) -> Result<Vec<T>> {
    check_len("inverse curvature", inv.dim(), w.dim())?;
    if group.is_empty() {
        return Err(Error::Structural("empty group".into()));
    }
    if let Some(&q) = group.iter().find(|&&q| q >= w.dim()) {
        return Err(Error::Structural(format!("group index {q} out of range")));
    }
    let (den, he) = group_curvature(inv, group)?;
    let s: T = group.iter().map(|&q| w.values()[q]).sum();
    let scale = s / den;
    Ok(he.into_iter().map(|x| -(scale * x)).collect())
}
