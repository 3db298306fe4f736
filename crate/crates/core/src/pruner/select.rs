use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::Real;
use crate::space::{count_for_fraction, Mask, ParamSpace};

use super::stats::{eligible, PruneStat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Every layer pruned to the same target sparsity.
    Independent,
    /// One ranking across all layers.
    Joint,
}

/// How many more coordinates to remove from a set of layout segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quota {
    pub segments: Vec<usize>,
    pub remove: usize,
}

/// Removals needed to bring prunable sparsity up to `target`.
///
/// Joint scope yields one quota over all weight segments, independent scope
/// one per segment. Independent layers already past the target get a zero
/// quota; a joint target below the current sparsity is an error.
pub fn quotas<T: Real>(
    space: &ParamSpace<T>,
    mask: &Mask,
    target: f64,
    scope: Scope,
) -> Result<Vec<Quota>> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!(
            "target sparsity {target} outside [0, 1]"
        )));
    }
    check_len("mask", mask.len(), space.dim())?;
    let segs: Vec<usize> = space
        .layout()
        .segments()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_prunable())
        .map(|(k, _)| k)
        .collect();
    let layout = space.layout();
    match scope {
        Scope::Joint => {
            let total = layout.n_prunable();
            let pruned = mask.pruned_count(space);
            let want = count_for_fraction(target, total);
            if want < pruned {
                return Err(Error::Config(format!(
                    "target sparsity {target} is below the current {pruned}/{total}"
                )));
            }
            Ok(vec![Quota {
                segments: segs,
                remove: want - pruned,
            }])
        }
        Scope::Independent => Ok(segs
            .into_iter()
            .map(|k| {
                let s = &layout.segments()[k];
                let want = count_for_fraction(target, s.len);
                Quota {
                    segments: vec![k],
                    remove: want.saturating_sub(mask.pruned_in_segment(s)),
                }
            })
            .collect()),
    }
}

/// Lowest-ρ active coordinates for each quota, ties broken by ascending
/// index. Returns the union sorted ascending.
pub fn select_quotas<T: Real>(
    stat: &PruneStat<T>,
    space: &ParamSpace<T>,
    mask: &Mask,
    quotas: &[Quota],
) -> Result<Vec<usize>> {
    check_len("statistic", stat.rho.len(), space.dim())?;
    let ok = eligible(space, mask)?;
    let mut out = Vec::new();
    for quota in quotas {
        if quota.remove == 0 {
            continue;
        }
        let mut cand: Vec<usize> = quota
            .segments
            .iter()
            .flat_map(|&k| space.layout().segments()[k].range())
            .filter(|&q| ok[q])
            .collect();
        if cand.len() < quota.remove {
            return Err(Error::Config(format!(
                "cannot remove {} weights, only {} active",
                quota.remove,
                cand.len()
            )));
        }
        let by_rank = |a: &usize, b: &usize| stat.rho[*a].total_cmp(&stat.rho[*b]).then(a.cmp(b));
        cand.select_nth_unstable_by(quota.remove - 1, by_rank);
        cand.truncate(quota.remove);
        out.extend(cand);
    }
    out.sort_unstable();
    Ok(out)
}

/// Coordinates to remove so that prunable sparsity reaches `target`.
pub fn select<T: Real>(
    stat: &PruneStat<T>,
    target: f64,
    scope: Scope,
    space: &ParamSpace<T>,
    mask: &Mask,
) -> Result<Vec<usize>> {
    let q = quotas(space, mask, target, scope)?;
    select_quotas(stat, space, mask, &q)
}

/// Splits each quota into `stages` integer parts whose running totals grow
/// linearly: stage `s` takes `⌊r·s/S⌋ - ⌊r·(s-1)/S⌋`.
pub fn staged(quotas: &[Quota], stages: usize) -> Vec<Vec<Quota>> {
    (1..=stages)
        .map(|s| {
            quotas
                .iter()
                .map(|q| Quota {
                    segments: q.segments.clone(),
                    remove: q.remove * s / stages - q.remove * (s - 1) / stages,
                })
                .collect()
        })
        .collect()
}
