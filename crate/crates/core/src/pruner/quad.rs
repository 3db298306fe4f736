use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fisher::{collect_grad_samples, woodfisher_build, EmpiricalFisher, FisherConfig};
use crate::io::Dataset;
use crate::model::{DatasetLoss, MlpModel};
use crate::objective::{Curvature, Objective};
use crate::scalar::{dot, Real};
use crate::space::{count_for_fraction, Mask};

use super::direction::pruning_direction;
use super::oneshot::SamplingRngs;
use super::select::{quotas, select_quotas, Quota, Scope};
use super::stats::stat_woodfisher;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub t: f64,
    pub actual: f64,
    pub predicted: f64,
}

/// Compares `L(w + t δw)` with the local quadratic model
/// `L(w) + ½ t² δwᵀĤδw` at `steps` evenly spaced `t` in `[0, 1]`.
pub fn quad_scan<T, O, C>(
    objective: &O,
    w: &[T],
    delta_w: &[T],
    steps: usize,
    curvature: &C,
) -> Result<Vec<ScanPoint>>
where
    T: Real,
    O: Objective<T> + ?Sized,
    C: Curvature<T> + ?Sized,
{
    check_len("weights", w.len(), objective.dim())?;
    check_len("direction", delta_w.len(), w.len())?;
    if steps == 0 {
        return Err(Error::Config("quad scan needs at least one step".into()));
    }
    let base = objective.loss(w)?;
    let curv = dot(delta_w, &curvature.hvp(delta_w)?);
    let half = T::of(0.5);
    let mut out = Vec::with_capacity(steps);
    let mut x = vec![T::zero(); w.len()];
    for i in 0..steps {
        let t = if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        };
        let (actual, predicted) = if i == 0 {
            (base, base)
        } else {
            let tt = T::of(t);
            for ((xi, &wi), &di) in x.iter_mut().zip(w).zip(delta_w) {
                *xi = wi + tt * di;
            }
            (objective.loss(&x)?, base + half * tt * tt * curv)
        };
        out.push(ScanPoint {
            t,
            actual: actual.as_f64(),
            predicted: predicted.as_f64(),
        });
    }
    Ok(out)
}

/// Scans the loss along the WoodFisher direction that prunes `layer` (or
/// every layer jointly) to `sparsity`. The Fisher samples are drawn from
/// `data`, which also defines the loss; the local model uses the same
/// samples through [`EmpiricalFisher`].
pub fn pruning_scan<T: Real>(
    model: &MlpModel<T>,
    data: &Dataset<T>,
    fisher: &FisherConfig,
    layer: Option<&str>,
    sparsity: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<ScanPoint>> {
    fisher.validate()?;
    let space = model.space();
    let mask = Mask::from_zeros(space);
    let todo = match layer {
        Some(name) => {
            let (k, seg) = space
                .layout()
                .segments()
                .iter()
                .enumerate()
                .find(|(_, s)| s.name == name && s.is_prunable())
                .ok_or_else(|| Error::Config(format!("no prunable layer named `{name}`")))?;
            vec![Quota {
                segments: vec![k],
                remove: count_for_fraction(sparsity, seg.len)
                    .saturating_sub(mask.pruned_in_segment(seg)),
            }]
        }
        None => quotas(space, &mask, sparsity, Scope::Joint)?,
    };
    let mut rngs = SamplingRngs::new(seed);
    let samples = collect_grad_samples(model, data, fisher, &mut rngs.index, &mut rngs.label)?;
    let inv = woodfisher_build(&samples, space.layout(), fisher)?;
    let stat = stat_woodfisher(space, &inv, &mask)?;
    let removed = select_quotas(&stat, space, &mask, &todo)?;
    let delta = pruning_direction(space, &inv, &mask, &removed)?;
    let objective = DatasetLoss { model, data };
    let curvature = EmpiricalFisher {
        samples: &samples,
        damp: T::of(fisher.damp),
    };
    quad_scan(&objective, space.values(), &delta, steps, &curvature)
}
