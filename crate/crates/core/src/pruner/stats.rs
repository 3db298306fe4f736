use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fisher::InverseCurvature;
use crate::scalar::Real;
use crate::space::{LayerLayout, Mask, ParamSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatKind {
    WoodFisher,
    Obd,
    Magnitude,
    WoodTaylor,
    DiagonalFisher,
}

/// Per-coordinate predicted loss increase of removing that coordinate.
///
/// Has one entry per flat parameter. Entries that cannot be selected
/// (biases, already pruned weights) hold `+∞`.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneStat<T> {
    pub rho: Vec<T>,
    pub kind: StatKind,
}

impl<T: Real> PruneStat<T> {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// Active prunable coordinates.
pub(crate) fn eligible<T: Real>(w: &ParamSpace<T>, mask: &Mask) -> Result<Vec<bool>> {
    check_len("mask", mask.len(), w.dim())?;
    Ok(w.prunable()
        .iter()
        .zip(mask.active())
        .map(|(&p, &a)| p && a)
        .collect())
}

fn checked_diag<T: Real>(inv_diag: &[T], ok: &[bool]) -> Result<()> {
    for (q, (&d, &e)) in inv_diag.iter().zip(ok).enumerate() {
        if e && !(d > T::zero() && d.is_finite()) {
            return Err(Error::numeric(
                "inverse curvature diagonal",
                format!("entry {q} is {d}, expected > 0"),
            ));
        }
    }
    Ok(())
}

fn fill<T: Real>(ok: &[bool], kind: StatKind, f: impl Fn(usize) -> T) -> PruneStat<T> {
    let rho = ok
        .iter()
        .enumerate()
        .map(|(q, &e)| if e { f(q) } else { T::infinity() })
        .collect();
    PruneStat { rho, kind }
}

/// `ρ_q = w_q² / (2 [H⁻¹]_qq)`.
pub fn stat_woodfisher<T: Real, I: InverseCurvature<T> + ?Sized>(
    w: &ParamSpace<T>,
    inv: &I,
    mask: &Mask,
) -> Result<PruneStat<T>> {
    check_len("inverse curvature", inv.dim(), w.dim())?;
    let ok = eligible(w, mask)?;
    let diag = inv.inverse_diagonal();
    checked_diag(&diag, &ok)?;
    let v = w.values();
    let two = T::of(2.0);
    Ok(fill(&ok, StatKind::WoodFisher, |q| {
        v[q] * v[q] / (two * diag[q])
    }))
}

/// `ρ_q = ½ w_q² H_qq` for a diagonal curvature estimate.
pub fn stat_obd<T: Real>(
    w: &ParamSpace<T>,
    hess_diag: &[T],
    mask: &Mask,
    kind: StatKind,
) -> Result<PruneStat<T>> {
    check_len("hessian diagonal", hess_diag.len(), w.dim())?;
    let ok = eligible(w, mask)?;
    if let Some(q) = (0..ok.len()).find(|&q| ok[q] && !hess_diag[q].is_finite()) {
        return Err(Error::numeric(
            "hessian diagonal",
            format!("entry {q} not finite"),
        ));
    }
    let v = w.values();
    let half = T::of(0.5);
    Ok(fill(&ok, kind, |q| half * v[q] * v[q] * hess_diag[q]))
}

/// `ρ_q = ½ w_q²`.
pub fn stat_magnitude<T: Real>(w: &ParamSpace<T>, mask: &Mask) -> Result<PruneStat<T>> {
    let ok = eligible(w, mask)?;
    let v = w.values();
    let half = T::of(0.5);
    Ok(fill(&ok, StatKind::Magnitude, |q| half * v[q] * v[q]))
}

/// OBS statistic with the first-order term kept:
/// `ρ_q = w_q²/(2D) + ½ h_q²/D - w_q h_q / D` with `h = H⁻¹∇L` and
/// `D = [H⁻¹]_qq`.
pub fn stat_woodtaylor<T: Real, I: InverseCurvature<T> + ?Sized>(
    w: &ParamSpace<T>,
    inv: &I,
    grad: &[T],
    mask: &Mask,
) -> Result<PruneStat<T>> {
    check_len("gradient", grad.len(), w.dim())?;
    check_len("inverse curvature", inv.dim(), w.dim())?;
    let ok = eligible(w, mask)?;
    let diag = inv.inverse_diagonal();
    checked_diag(&diag, &ok)?;
    let h = inv.ihvp(grad)?;
    let v = w.values();
    let (half, two) = (T::of(0.5), T::of(2.0));
    Ok(fill(&ok, StatKind::WoodTaylor, |q| {
        v[q] * v[q] / (two * diag[q]) + half * h[q] * h[q] / diag[q] - v[q] * h[q] / diag[q]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupMode {
    /// Sum of the members' single-coordinate statistics.
    Sum,
    /// One combined constraint `ẽᵀ(w + δw) = 0` over the group.
    Correlated,
}

/// Disjoint groups of prunable coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    groups: Vec<Vec<usize>>,
    pub mode: GroupMode,
}

impl GroupSpec {
    pub fn new(groups: Vec<Vec<usize>>, mode: GroupMode, layout: &LayerLayout) -> Result<Self> {
        let prunable = layout.prunable_flags();
        let mut seen = vec![false; layout.dim()];
        for (k, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Structural(format!("group {k} is empty")));
            }
            for &q in g {
                if q >= layout.dim() || !prunable[q] {
                    return Err(Error::Structural(format!(
                        "group {k}: index {q} is not a prunable weight"
                    )));
                }
                if std::mem::replace(&mut seen[q], true) {
                    return Err(Error::Structural(format!(
                        "group {k}: index {q} appears in more than one group"
                    )));
                }
            }
        }
        Ok(Self { groups, mode })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
}

fn indicator<T: Real>(dim: usize, group: &[usize]) -> Vec<T> {
    let mut e = vec![T::zero(); dim];
    for &q in group {
        e[q] = T::one();
    }
    e
}

/// `ẽᵀ H⁻¹ ẽ` and `H⁻¹ ẽ` for the group indicator `ẽ`.
pub(crate) fn group_curvature<T: Real, I: InverseCurvature<T> + ?Sized>(
    inv: &I,
    group: &[usize],
) -> Result<(T, Vec<T>)> {
    let he = inv.ihvp(&indicator(inv.dim(), group))?;
    let den: T = group.iter().map(|&q| he[q]).sum();
    if !(den > T::zero() && den.is_finite()) {
        return Err(Error::numeric(
            "group curvature",
            format!("ẽᵀH⁻¹ẽ = {den} for group starting at {}", group[0]),
        ));
    }
    Ok((den, he))
}

/// One statistic per group.
pub fn stat_structured<T: Real, I: InverseCurvature<T> + ?Sized>(
    w: &ParamSpace<T>,
    inv: &I,
    groups: &GroupSpec,
) -> Result<Vec<T>> {
    check_len("inverse curvature", inv.dim(), w.dim())?;
    let v = w.values();
    let two = T::of(2.0);
    match groups.mode {
        GroupMode::Sum => {
            let diag = inv.inverse_diagonal();
            let all = vec![true; w.dim()];
            checked_diag(&diag, &all)?;
            Ok(groups
                .groups
                .iter()
                .map(|g| g.iter().map(|&q| v[q] * v[q] / (two * diag[q])).sum())
                .collect())
        }
        GroupMode::Correlated => groups
            .groups
            .iter()
            .map(|g| {
                let (den, _) = group_curvature(inv, g)?;
                let s: T = g.iter().map(|&q| v[q]).sum();
                Ok(s * s / (two * den))
            })
            .collect(),
    }
}

/// `ρ_q / fpp_q^β`. With `β = 0` the statistic is returned untouched.
pub fn flops_normalize<T: Real>(stat: &PruneStat<T>, fpp: &[T], beta: f64) -> Result<PruneStat<T>> {
    check_len("flops per parameter", fpp.len(), stat.rho.len())?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta {beta} must be >= 0")));
    }
    if beta == 0.0 {
        return Ok(stat.clone());
    }
    let b = T::of(beta);
    let mut rho = stat.rho.clone();
    for (q, (r, &f)) in rho.iter_mut().zip(fpp).enumerate() {
        if !r.is_finite() {
            continue;
        }
        if !(f > T::zero() && f.is_finite()) {
            return Err(Error::Config(format!(
                "flops per parameter at {q} is {f}, expected > 0"
            )));
        }
        *r /= f.powf(b);
    }
    Ok(PruneStat {
        rho,
        kind: stat.kind,
    })
}
