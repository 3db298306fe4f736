//! Gradual pruning: cubic sparsity ramp interleaved with masked SGD.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fisher::FisherConfig;
use crate::io::Dataset;
use crate::model::{MlpModel, Sgd, TrainConfig};
use crate::pruner::{prune_step, quotas, Method, SamplingRngs, Scope, StepConfig};
use crate::rng::{self, Stream};
use crate::scalar::Real;
use crate::space::{count_for_fraction, sparsity_of, FlopTable, Mask};

/// `lr ← lr · factor` every `period` epochs, starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub start: usize,
    pub factor: f64,
    pub period: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub first_prune_epoch: usize,
    pub prune_interval: usize,
    /// Inclusive upper bound on pruning epochs.
    pub last_prune_epoch: usize,
    pub total_epochs: usize,
    pub lr_decay: LrDecay,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            initial_sparsity: 0.05,
            final_sparsity: 0.9,
            first_prune_epoch: 1,
            prune_interval: 3,
            last_prune_epoch: 12,
            total_epochs: 20,
            lr_decay: LrDecay {
                start: 12,
                factor: 0.6,
                period: 2,
            },
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let (si, sf) = (self.initial_sparsity, self.final_sparsity);
        if !(0.0 <= si && si <= sf && sf <= 1.0) {
            return Err(Error::Config(format!(
                "sparsities must satisfy 0 <= initial ({si}) <= final ({sf}) <= 1"
            )));
        }
        if self.prune_interval == 0 {
            return Err(Error::Config("prune interval must be >= 1".into()));
        }
        if self.first_prune_epoch <= self.last_prune_epoch
            && self.first_prune_epoch >= self.total_epochs
        {
            return Err(Error::Config(format!(
                "first prune epoch {} is past the last epoch {}",
                self.first_prune_epoch,
                self.total_epochs.saturating_sub(1)
            )));
        }
        let d = self.lr_decay;
        if !(d.factor > 0.0 && d.factor <= 1.0) || d.period == 0 {
            return Err(Error::Config(format!(
                "lr decay needs factor in (0, 1] and period >= 1, got {} and {}",
                d.factor, d.period
            )));
        }
        Ok(())
    }

    /// Epochs at which a pruning step happens, in order.
    pub fn prune_epochs(&self) -> Vec<usize> {
        if self.prune_interval == 0 {
            return Vec::new();
        }
        (self.first_prune_epoch..=self.last_prune_epoch)
            .step_by(self.prune_interval)
            .filter(|&e| e < self.total_epochs)
            .collect()
    }

    /// Learning rate for `epoch` given the base rate.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        let d = self.lr_decay;
        if epoch < d.start {
            return base;
        }
        let times = (epoch - d.start) / d.period + 1;
        base * d.factor.powi(times as i32)
    }
}

/// `s(k) = s_f + (s_i - s_f)(1 - k/K)³` for step `k` of `0..=K`.
pub fn sparsity_at(cfg: &ScheduleConfig, k: usize, last_step: usize) -> Result<f64> {
    let (si, sf) = (cfg.initial_sparsity, cfg.final_sparsity);
    if k > last_step {
        return Err(Error::Config(format!(
            "prune step {k} past the last step {last_step}"
        )));
    }
    if last_step == 0 {
        if si != sf {
            return Err(Error::Config(format!(
                "a single prune step cannot ramp from {si} to {sf}"
            )));
        }
        return Ok(sf);
    }
    if k == last_step {
        return Ok(sf);
    }
    if k == 0 {
        return Ok(si);
    }
    let r = 1.0 - k as f64 / last_step as f64;
    Ok(sf + (si - sf) * r * r * r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradualConfig {
    pub schedule: ScheduleConfig,
    /// SGD settings; `epochs` is ignored in favour of the schedule's total.
    pub train: TrainConfig,
    pub fisher: FisherConfig,
    pub method: Method,
    pub scope: Scope,
    pub beta: f64,
}

impl Default for GradualConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            fisher: FisherConfig::default(),
            method: Method::WoodFisher,
            scope: Scope::Joint,
            beta: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Prunable sparsity during this epoch's training.
    pub sparsity: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub learning_rate: f64,
    /// Schedule step applied at the start of this epoch.
    pub prune_step: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradualTrace {
    pub rows: Vec<TraceRow>,
}

impl GradualTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,sparsity,train_loss,test_acc,lr\n");
        for r in &self.rows {
            let acc = r.test_accuracy.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.sparsity, r.train_loss, acc, r.learning_rate
            )
            .unwrap();
        }
        out
    }
}

pub struct GradualOutcome<T> {
    pub model: MlpModel<T>,
    pub mask: Mask,
    pub trace: GradualTrace,
}

/// Runs the schedule on a copy of `model`. At each pruning epoch the
/// curvature is re-estimated on the current weights and the network is
/// pruned up to the scheduled sparsity; every epoch then trains with masked
/// SGD whose momentum persists across epochs.
pub fn gradual_prune<T: Real>(
    model: &MlpModel<T>,
    mask: &Mask,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
    cfg: &GradualConfig,
    flops: Option<&FlopTable>,
) -> Result<GradualOutcome<T>> {
    cfg.schedule.validate()?;
    cfg.train.validate()?;
    let epochs = cfg.schedule.prune_epochs();
    if !epochs.is_empty() {
        cfg.fisher.validate()?;
        sparsity_at(&cfg.schedule, 0, epochs.len() - 1)?;
    }
    let mut model = model.clone();
    let mut mask = mask.clone();
    check_len("mask", mask.len(), model.space().dim())?;
    mask.apply(model.space_mut().values_mut());
    let scope = cfg.method.scope(cfg.scope);
    let step = StepConfig {
        method: cfg.method,
        scope,
        fisher: &cfg.fisher,
        flops,
        beta: cfg.beta,
    };
    let seed = cfg.train.seed;
    let mut shuffle = rng::stream(seed, Stream::TrainShuffle);
    let mut sampling = SamplingRngs::new(seed);
    let mut opt = Sgd::new(model.space().dim());
    let n_prunable = model.space().layout().n_prunable();
    let mut trace = GradualTrace::default();
    for epoch in 0..cfg.schedule.total_epochs {
        let k = epochs.iter().position(|&e| e == epoch);
        if let Some(k) = k {
            let target = sparsity_at(&cfg.schedule, k, epochs.len() - 1)?;
            let behind = match scope {
                Scope::Joint => {
                    count_for_fraction(target, n_prunable) > mask.pruned_count(model.space())
                }
                Scope::Independent => true,
            };
            if behind {
                let q = quotas(model.space(), &mask, target, scope)?;
                prune_step(&mut model, &mut mask, train, &step, &q, &mut sampling)?;
                opt.apply_mask(&mask);
            }
        }
        let lr = cfg.schedule.lr_at(cfg.train.learning_rate, epoch);
        let train_loss = opt.epoch(
            &mut model,
            train,
            &mask,
            lr,
            &cfg.train,
            &mut shuffle,
            epoch,
        )?;
        let test_accuracy = test
            .map(|t| model.evaluate(t))
            .transpose()?
            .map(|m| m.accuracy);
        trace.rows.push(TraceRow {
            epoch,
            sparsity: sparsity_of(&mask, model.space())?,
            train_loss,
            test_accuracy,
            learning_rate: lr,
            prune_step: k,
        });
    }
    Ok(GradualOutcome { model, mask, trace })
}
