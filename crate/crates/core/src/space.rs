//! Flat parameter vectors, their layer layout, pruning masks and FLOP tables.
//!
//! Everything else addresses parameters by their index into one flat vector.
//! Dense weight segments are prunable; bias segments never are, and they are
//! left out of both numerator and denominator of every sparsity figure.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::{all_finite, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentKind {
    DenseWeight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn is_prunable(&self) -> bool {
        self.kind == SegmentKind::DenseWeight
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    segments: Vec<Segment>,
    dim: usize,
}

impl LayerLayout {
    /// Validates contiguity, coverage of `[0, d)` and weight segment sizes.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.offset != next {
                return Err(Error::Structural(format!(
                    "segment `{}` starts at {}, expected {}",
                    s.name, s.offset, next
                )));
            }
            if s.kind == SegmentKind::DenseWeight && s.len != s.fan_in * s.fan_out {
                return Err(Error::Structural(format!(
                    "weight segment `{}` has {} entries, expected {}x{}",
                    s.name, s.len, s.fan_in, s.fan_out
                )));
            }
            next += s.len;
        }
        Ok(Self {
            segments,
            dim: next,
        })
    }

    /// Layout of a fully-connected stack: `fcK.weight` (fan_in x fan_out,
    /// row-major) followed by `fcK.bias` for every layer.
    pub fn mlp(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes {layer_sizes:?}: need at least two positive sizes"
            )));
        }
        let mut segments = Vec::new();
        let mut offset = 0;
        for (k, pair) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            segments.push(Segment {
                name: format!("fc{}.weight", k + 1),
                kind: SegmentKind::DenseWeight,
                offset,
                len: fan_in * fan_out,
                fan_in,
                fan_out,
            });
            offset += fan_in * fan_out;
            segments.push(Segment {
                name: format!("fc{}.bias", k + 1),
                kind: SegmentKind::Bias,
                offset,
                len: fan_out,
                fan_in: 1,
                fan_out,
            });
            offset += fan_out;
        }
        Self::new(segments)
    }

    /// Prunable weight-only layers `w0`, `w1`, ..., each a `1 x len` row.
    pub fn weight_blocks(lens: &[usize]) -> Result<Self> {
        let mut segments = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for (k, &len) in lens.iter().enumerate() {
            segments.push(Segment {
                name: format!("w{k}"),
                kind: SegmentKind::DenseWeight,
                offset,
                len,
                fan_in: 1,
                fan_out: len,
            });
            offset += len;
        }
        Self::new(segments)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Index of the segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<usize> {
        if i >= self.dim {
            return None;
        }
        Some(self.segments.partition_point(|s| s.offset + s.len <= i))
    }

    pub fn segment_by_name(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn prunable_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.dim];
        for s in self.segments.iter().filter(|s| s.is_prunable()) {
            flags[s.range()].fill(true);
        }
        flags
    }

    pub fn n_prunable(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.is_prunable())
            .map(|s| s.len)
            .sum()
    }
}

/// Flat parameter vector `w` with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpace<T> {
    values: Vec<T>,
    layout: LayerLayout,
    prunable: Vec<bool>,
}

impl<T: Real> ParamSpace<T> {
    pub fn new(values: Vec<T>, layout: LayerLayout) -> Result<Self> {
        check_len("parameter vector", values.len(), layout.dim())?;
        if !all_finite(&values) {
            return Err(Error::numeric("parameter vector", "non-finite entry"));
        }
        let prunable = layout.prunable_flags();
        Ok(Self {
            values,
            layout,
            prunable,
        })
    }

    pub fn zeros(layout: LayerLayout) -> Self {
        let prunable = layout.prunable_flags();
        Self {
            values: vec![T::zero(); layout.dim()],
            layout,
            prunable,
        }
    }

    /// Concatenates per-segment parts in layout order.
    pub fn from_segments(layout: LayerLayout, parts: &[Vec<T>]) -> Result<Self> {
        check_len("segment list", parts.len(), layout.segments().len())?;
        let mut values = Vec::with_capacity(layout.dim());
        for (seg, part) in layout.segments().iter().zip(parts) {
            check_len(&seg.name, part.len(), seg.len)?;
            values.extend_from_slice(part);
        }
        Self::new(values, layout)
    }

    /// Splits the flat vector back into per-segment parts.
    pub fn to_segments(&self) -> Vec<Vec<T>> {
        self.layout
            .segments()
            .iter()
            .map(|s| self.values[s.range()].to_vec())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Replaces all values, re-checking finiteness.
    pub fn set_values(&mut self, values: Vec<T>) -> Result<()> {
        check_len("parameter vector", values.len(), self.dim())?;
        if !all_finite(&values) {
            return Err(Error::numeric("parameter vector", "non-finite entry"));
        }
        self.values = values;
        Ok(())
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn prunable(&self) -> &[bool] {
        &self.prunable
    }

    pub fn segment_values(&self, seg: usize) -> &[T] {
        &self.values[self.layout.segments()[seg].range()]
    }
}

/// Which parameters are still alive. Non-prunable entries are always active.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    active: Vec<bool>,
}

impl Mask {
    pub fn all_active(dim: usize) -> Self {
        Self {
            active: vec![true; dim],
        }
    }

    /// Treats every prunable entry that is exactly zero as pruned.
    pub fn from_zeros<T: Real>(space: &ParamSpace<T>) -> Self {
        let active = space
            .values()
            .iter()
            .zip(space.prunable())
            .map(|(v, &p)| !p || !v.is_zero())
            .collect();
        Self { active }
    }

    pub fn from_active<T: Real>(active: Vec<bool>, space: &ParamSpace<T>) -> Result<Self> {
        check_len("mask", active.len(), space.dim())?;
        if active.iter().zip(space.prunable()).any(|(&a, &p)| !a && !p) {
            return Err(Error::Structural(
                "mask deactivates a non-prunable parameter".into(),
            ));
        }
        Ok(Self { active })
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn prune<T: Real>(&mut self, i: usize, space: &ParamSpace<T>) -> Result<()> {
        if !space.prunable()[i] {
            return Err(Error::Structural(format!("index {i} is not prunable")));
        }
        self.active[i] = false;
        Ok(())
    }

    /// Zeroes every inactive entry of `values`.
    pub fn apply<T: Real>(&self, values: &mut [T]) {
        for (v, &a) in values.iter_mut().zip(&self.active) {
            if !a {
                *v = T::zero();
            }
        }
    }

    pub fn pruned_count<T: Real>(&self, space: &ParamSpace<T>) -> usize {
        self.active
            .iter()
            .zip(space.prunable())
            .filter(|(&a, &p)| p && !a)
            .count()
    }

    pub fn pruned_in_segment(&self, seg: &Segment) -> usize {
        self.active[seg.range()].iter().filter(|a| !**a).count()
    }
}

/// Fraction of prunable parameters that are pruned.
pub fn sparsity_of<T: Real>(mask: &Mask, space: &ParamSpace<T>) -> Result<f64> {
    check_len("mask", mask.len(), space.dim())?;
    let total = space.layout().n_prunable();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(mask.pruned_count(space) as f64 / total as f64)
}

/// Largest count not exceeding `fraction * total`.
///
/// A relative slack of 1e-12 absorbs representation error, so a fraction
/// like 0.05 of 32360 gives 1618 rather than 1617.
pub fn count_for_fraction(fraction: f64, total: usize) -> usize {
    let exact = fraction * total as f64;
    let n = (exact * (1.0 + 1e-12)).floor();
    (n.max(0.0) as usize).min(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: String,
    pub dense_params: usize,
    pub sparsity_pct: f64,
}

/// Per prunable layer: name, parameter count, percent pruned.
pub fn layer_sparsity<T: Real>(mask: &Mask, space: &ParamSpace<T>) -> Vec<LayerSparsity> {
    space
        .layout()
        .segments()
        .iter()
        .filter(|s| s.is_prunable())
        .map(|s| LayerSparsity {
            layer: s.name.clone(),
            dense_params: s.len,
            sparsity_pct: 100.0 * mask.pruned_in_segment(s) as f64 / s.len as f64,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopEntry {
    pub layer: String,
    /// FLOPs of the layer counted over its active parameters.
    pub flops_total: f64,
    pub active_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopTable {
    pub entries: Vec<FlopEntry>,
}

impl FlopTable {
    /// Dense layers cost 2 FLOPs (multiply and add) per active weight.
    pub fn dense(layout: &LayerLayout, mask: &Mask) -> Self {
        let entries = layout
            .segments()
            .iter()
            .filter(|s| s.is_prunable())
            .map(|s| {
                let active = s.len - mask.pruned_in_segment(s);
                FlopEntry {
                    layer: s.name.clone(),
                    flops_total: 2.0 * active as f64,
                    active_params: active,
                }
            })
            .collect();
        Self { entries }
    }

    /// Rescales every entry to the active counts of `mask`, keeping each
    /// layer's FLOPs per parameter fixed.
    pub fn rescaled(&self, layout: &LayerLayout, mask: &Mask) -> Result<Self> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let seg = layout.segment_by_name(&e.layer).ok_or_else(|| {
                Error::Structural(format!("flop table layer `{}` not in layout", e.layer))
            })?;
            if e.active_params == 0 {
                return Err(Error::DegenerateLayer(e.layer.clone()));
            }
            let per_param = e.flops_total / e.active_params as f64;
            let active = seg.len - mask.pruned_in_segment(seg);
            entries.push(FlopEntry {
                layer: e.layer.clone(),
                flops_total: per_param * active as f64,
                active_params: active,
            });
        }
        Ok(Self { entries })
    }

    pub fn entry(&self, layer: &str) -> Option<&FlopEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }
}

/// FLOPs per active parameter at every flat index.
///
/// Indices of segments absent from the table (biases) get 1, which leaves
/// their (never selected) statistic untouched.
pub fn flops_per_param<T: Real>(table: &FlopTable, layout: &LayerLayout) -> Result<Vec<T>> {
    let mut out = vec![T::one(); layout.dim()];
    for seg in layout.segments() {
        match table.entry(&seg.name) {
            Some(e) => {
                if e.active_params == 0 {
                    return Err(Error::DegenerateLayer(e.layer.clone()));
                }
                let v = T::of(e.flops_total / e.active_params as f64);
                out[seg.range()].fill(v);
            }
            None if seg.is_prunable() => {
                return Err(Error::Structural(format!(
                    "prunable layer `{}` missing from flop table",
                    seg.name
                )))
            }
            None => {}
        }
    }
    Ok(out)
}
