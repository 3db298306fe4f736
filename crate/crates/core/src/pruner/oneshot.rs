use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{
    collect_grad_samples, diagonal_fisher, mean_gradient, per_example_diagonal_fisher,
    woodfisher_build, FisherConfig, IsotropicInverse,
};
use crate::io::Dataset;
use crate::model::MlpModel;
use crate::rng::{self, Stream, StreamRng};
use crate::scalar::Real;
use crate::space::{flops_per_param, layer_sparsity, sparsity_of, FlopTable, LayerSparsity, Mask};

use super::direction::{
    pruning_direction, structured_direction, woodtaylor_direction, PruneDecision,
};
use super::select::{quotas, select_quotas, staged, Quota, Scope};
use super::stats::{
    flops_normalize, stat_magnitude, stat_obd, stat_structured, stat_woodfisher, stat_woodtaylor,
    GroupMode, GroupSpec, PruneStat, StatKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "woodfisher")]
    WoodFisher,
    #[serde(rename = "woodtaylor")]
    WoodTaylor,
    /// Smallest |w| within each layer.
    #[serde(rename = "magnitude")]
    Magnitude,
    /// Smallest |w| across the network.
    #[serde(rename = "global-magnitude")]
    GlobalMagnitude,
    /// Diagonal Fisher from individual example gradients.
    #[serde(rename = "diag-fisher")]
    DiagFisher,
    /// Diagonal of the minibatch-averaged Fisher samples.
    #[serde(rename = "obd")]
    Obd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::WoodFisher,
        Method::WoodTaylor,
        Method::Magnitude,
        Method::GlobalMagnitude,
        Method::DiagFisher,
        Method::Obd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::WoodFisher => "woodfisher",
            Method::WoodTaylor => "woodtaylor",
            Method::Magnitude => "magnitude",
            Method::GlobalMagnitude => "global-magnitude",
            Method::DiagFisher => "diag-fisher",
            Method::Obd => "obd",
        }
    }

    /// The magnitude baselines have a fixed scope.
    pub fn scope(self, requested: Scope) -> Scope {
        match self {
            Method::Magnitude => Scope::Independent,
            Method::GlobalMagnitude => Scope::Joint,
            _ => requested,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Index and label streams for Fisher sampling, advanced across steps so
/// each step sees fresh examples.
pub struct SamplingRngs {
    pub index: StreamRng,
    pub label: StreamRng,
}

impl SamplingRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            index: rng::stream(seed, Stream::FisherSampling),
            label: rng::stream(seed, Stream::LabelSampling),
        }
    }
}

/// Everything a pruning step needs besides the model.
#[derive(Clone, Copy, Debug)]
pub struct StepConfig<'a> {
    pub method: Method,
    pub scope: Scope,
    pub fisher: &'a FisherConfig,
    /// Per-layer FLOPs for the normalized statistic; the dense count of the
    /// model is used when absent.
    pub flops: Option<&'a FlopTable>,
    pub beta: f64,
}

/// Statistic, decision and the unnormalized statistic used for the loss
/// prediction, for one step.
fn decide<T: Real>(
    model: &MlpModel<T>,
    mask: &Mask,
    data: &Dataset<T>,
    cfg: &StepConfig<'_>,
    quotas: &[Quota],
    rngs: &mut SamplingRngs,
) -> Result<PruneDecision<T>> {
    let w = model.space();
    let d = w.dim();
    let damp = T::of(cfg.fisher.damp);
    let normalize = |s: PruneStat<T>| -> Result<(PruneStat<T>, PruneStat<T>)> {
        if cfg.beta == 0.0 {
            return Ok((s.clone(), s));
        }
        let table = match cfg.flops {
            Some(t) => t.clone(),
            None => FlopTable::dense(w.layout(), mask),
        };
        let fpp = flops_per_param::<T>(&table, w.layout())?;
        Ok((flops_normalize(&s, &fpp, cfg.beta)?, s))
    };
    let finish =
        |ranked: PruneStat<T>, raw: PruneStat<T>, dir: &dyn Fn(&[usize]) -> Result<Vec<T>>| {
            let removed = select_quotas(&ranked, w, mask, quotas)?;
            let delta_w = dir(&removed)?;
            let predicted_delta_loss = removed.iter().map(|&q| raw.rho[q]).sum();
            Ok(PruneDecision {
                removed,
                delta_w,
                predicted_delta_loss,
            })
        };
    match cfg.method {
        Method::Magnitude | Method::GlobalMagnitude => {
            let (ranked, raw) = normalize(stat_magnitude(w, mask)?)?;
            let iso = IsotropicInverse {
                dim: d,
                scale: T::one(),
            };
            finish(ranked, raw, &|r| pruning_direction(w, &iso, mask, r))
        }
        Method::WoodFisher | Method::WoodTaylor => {
            let samples =
                collect_grad_samples(model, data, cfg.fisher, &mut rngs.index, &mut rngs.label)?;
            let inv = woodfisher_build(&samples, w.layout(), cfg.fisher)?;
            if cfg.method == Method::WoodFisher {
                let (ranked, raw) = normalize(stat_woodfisher(w, &inv, mask)?)?;
                finish(ranked, raw, &|r| pruning_direction(w, &inv, mask, r))
            } else {
                let grad = mean_gradient(&samples, d)?;
                let (ranked, raw) = normalize(stat_woodtaylor(w, &inv, &grad, mask)?)?;
                finish(ranked, raw, &|r| {
                    woodtaylor_direction(w, &inv, &grad, mask, r)
                })
            }
        }
        Method::Obd | Method::DiagFisher => {
            let (diag, kind) = if cfg.method == Method::Obd {
                let samples = collect_grad_samples(
                    model,
                    data,
                    cfg.fisher,
                    &mut rngs.index,
                    &mut rngs.label,
                )?;
                (diagonal_fisher(&samples, d, damp)?, StatKind::Obd)
            } else {
                let count = cfg.fisher.subsample_size * cfg.fisher.minibatch_size;
                let diag = per_example_diagonal_fisher(
                    model,
                    data,
                    count,
                    damp,
                    cfg.fisher.label_mode,
                    &mut rngs.index,
                    &mut rngs.label,
                )?;
                (diag, StatKind::DiagonalFisher)
            };
            let (ranked, raw) = normalize(stat_obd(w, &diag.diag, mask, kind)?)?;
            finish(ranked, raw, &|r| pruning_direction(w, &diag, mask, r))
        }
    }
}

/// Applies `decision` to the model and marks its coordinates as pruned.
pub fn apply_decision<T: Real>(
    model: &mut MlpModel<T>,
    mask: &mut Mask,
    decision: &PruneDecision<T>,
) -> Result<()> {
    let mut w = model.space().values().to_vec();
    for (x, &dx) in w.iter_mut().zip(&decision.delta_w) {
        *x += dx;
    }
    for &q in &decision.removed {
        mask.prune(q, model.space())?;
    }
    mask.apply(&mut w);
    model.space_mut().set_values(w)
}

/// One pruning step: estimate curvature on the current model, select
/// according to `quotas` and apply the update. A step with nothing to
/// remove leaves the model untouched and draws no samples.
pub fn prune_step<T: Real>(
    model: &mut MlpModel<T>,
    mask: &mut Mask,
    data: &Dataset<T>,
    cfg: &StepConfig<'_>,
    quotas: &[Quota],
    rngs: &mut SamplingRngs,
) -> Result<PruneDecision<T>> {
    if quotas.iter().all(|q| q.remove == 0) {
        return Ok(PruneDecision {
            removed: Vec::new(),
            delta_w: vec![T::zero(); model.space().dim()],
            predicted_delta_loss: T::zero(),
        });
    }
    let decision = decide(model, mask, data, cfg, quotas, rngs)?;
    apply_decision(model, mask, &decision)?;
    Ok(decision)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotConfig {
    pub method: Method,
    pub scope: Scope,
    pub target: f64,
    pub recompute_steps: usize,
    pub beta: f64,
    pub fisher: FisherConfig,
    pub seed: u64,
}

impl Default for OneShotConfig {
    fn default() -> Self {
        Self {
            method: Method::WoodFisher,
            scope: Scope::Joint,
            target: 0.5,
            recompute_steps: 1,
            beta: 0.0,
            fisher: FisherConfig::default(),
            seed: 0,
        }
    }
}

impl OneShotConfig {
    pub fn validate(&self) -> Result<()> {
        self.fisher.validate()?;
        if !(0.0..=1.0).contains(&self.target) {
            return Err(Error::Config(format!(
                "target sparsity {} outside [0, 1]",
                self.target
            )));
        }
        if self.recompute_steps == 0 {
            return Err(Error::Config("recompute steps must be >= 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotReport {
    pub method: Method,
    /// Scope actually used; the magnitude baselines override the request.
    pub scope: Scope,
    pub target: f64,
    pub sparsity: f64,
    pub removed: usize,
    pub layers: Vec<LayerSparsity>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub predicted_delta_loss: f64,
    pub seed: u64,
    pub config: OneShotConfig,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub timestamp: u64,
}

pub struct OneShotOutcome<T> {
    pub model: MlpModel<T>,
    pub mask: Mask,
    pub report: OneShotReport,
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Prunes a copy of `model` to `cfg.target` in `cfg.recompute_steps`
/// stages without retraining. The pruned count grows linearly across
/// stages and curvature is re-estimated before each one. Fisher samples
/// come from `train`; accuracies are measured on `test`.
pub fn one_shot_prune<T: Real>(
    model: &MlpModel<T>,
    mask: &Mask,
    train: &Dataset<T>,
    test: &Dataset<T>,
    cfg: &OneShotConfig,
    flops: Option<&FlopTable>,
) -> Result<OneShotOutcome<T>> {
    cfg.validate()?;
    let scope = cfg.method.scope(cfg.scope);
    let before = model.evaluate(test)?;
    let mut model = model.clone();
    let mut mask = mask.clone();
    mask.apply(model.space_mut().values_mut());
    let total = quotas(model.space(), &mask, cfg.target, scope)?;
    let step = StepConfig {
        method: cfg.method,
        scope,
        fisher: &cfg.fisher,
        flops,
        beta: cfg.beta,
    };
    let mut rngs = SamplingRngs::new(cfg.seed);
    let mut predicted = 0.0;
    let mut removed = 0;
    for stage in staged(&total, cfg.recompute_steps) {
        let d = prune_step(&mut model, &mut mask, train, &step, &stage, &mut rngs)?;
        predicted += d.predicted_delta_loss.as_f64();
        removed += d.removed.len();
    }
    let after = model.evaluate(test)?;
    let report = OneShotReport {
        method: cfg.method,
        scope,
        target: cfg.target,
        sparsity: sparsity_of(&mask, model.space())?,
        removed,
        layers: layer_sparsity(&mask, model.space()),
        accuracy_before: before.accuracy,
        accuracy_after: after.accuracy,
        loss_before: before.loss,
        loss_after: after.loss,
        predicted_delta_loss: predicted,
        seed: cfg.seed,
        config: cfg.clone(),
        timestamp: unix_now(),
    };
    Ok(OneShotOutcome {
        model,
        mask,
        report,
    })
}

/// Removes the `count` groups with the smallest statistic, moving the
/// remaining weights along the matching perturbation. Every member of a
/// removed group ends at exactly zero and is masked.
pub fn structured_prune<T: Real>(
    model: &mut MlpModel<T>,
    mask: &mut Mask,
    inv: &dyn crate::fisher::InverseCurvature<T>,
    groups: &GroupSpec,
    count: usize,
) -> Result<PruneDecision<T>> {
    let w = model.space();
    let rho = stat_structured(w, inv, groups)?;
    if count > rho.len() {
        return Err(Error::Config(format!(
            "cannot remove {count} of {} groups",
            rho.len()
        )));
    }
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[a].total_cmp(&rho[b]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    let mut delta = vec![T::zero(); w.dim()];
    let mut removed = Vec::new();
    for &g in &order {
        let members = &groups.groups()[g];
        let part = match groups.mode {
            GroupMode::Correlated => structured_direction(w, inv, members)?,
            GroupMode::Sum => {
                let mut sorted = members.clone();
                sorted.sort_unstable();
                pruning_direction(w, inv, mask, &sorted)?
            }
        };
        for (d, p) in delta.iter_mut().zip(part) {
            *d += p;
        }
        removed.extend(members.iter().copied().filter(|&q| mask.is_active(q)));
    }
    removed.sort_unstable();
    let v = w.values();
    for &q in &removed {
        delta[q] = -v[q];
    }
    for (d, &a) in delta.iter_mut().zip(mask.active()) {
        if !a {
            *d = T::zero();
        }
    }
    let decision = PruneDecision {
        removed,
        delta_w: delta,
        predicted_delta_loss: order.iter().map(|&g| rho[g]).sum(),
    };
    apply_decision(model, mask, &decision)?;
    Ok(decision)
}
