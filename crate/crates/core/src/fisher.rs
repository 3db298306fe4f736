//! Dampened empirical Fisher estimates and their inverses.
//!
//! [`woodfisher_build`] inverts `λI + (1/m) Σₙ gₙ gₙᵀ` block-wise, one block
//! per chunk of a layer, by running the Sherman–Morrison recurrence
//!
//! ```text
//! A₀ = λ⁻¹ I
//! Aₙ₊₁ = Aₙ - (Aₙ g)(Aₙ g)ᵀ / (m + gᵀ Aₙ g)
//! ```
//!
//! over the `m` gradient samples. A block is either kept as a dense `c x c`
//! matrix, or in factored form `λ⁻¹ I - Σₙ uₙ uₙᵀ / dₙ` with `uₙ = Aₙ gₙ`.
//! Both run the same recurrence; the factored form costs `O(m² c)` time and
//! `O(m c)` memory instead of `O(m c²)` and `O(c²)`, which is what makes
//! full-layer blocks affordable when `c` is much larger than `m`.

use std::ops::Range;

use ndarray::Axis;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::io::Dataset;
use crate::model::{sample_categorical, MlpModel};
use crate::objective::Curvature;
use crate::scalar::{all_finite, axpy, dot, Real};
use crate::space::LayerLayout;

/// One rank-one term: a gradient, possibly averaged over `weight` examples.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSample<T> {
    pub grad: Vec<T>,
    pub weight: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Labels from the dataset.
    Empirical,
    /// One label per input drawn from the model's own softmax.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockStorage {
    /// Dense when `2c <= m`, factored otherwise.
    Auto,
    Dense,
    Factored,
}

/// Chunk size that keeps every layer in a single block.
pub const FULL_LAYER: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherConfig {
    /// Number of rank-one terms `m`.
    pub subsample_size: usize,
    /// Examples averaged into each term.
    pub minibatch_size: usize,
    /// Dampening `λ`.
    pub damp: f64,
    /// Block size `c`; [`FULL_LAYER`] for whole layers.
    pub chunk_size: usize,
    pub label_mode: LabelMode,
    pub storage: BlockStorage,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            subsample_size: 240,
            minibatch_size: 100,
            damp: 1e-5,
            chunk_size: 1000,
            label_mode: LabelMode::Empirical,
            storage: BlockStorage::Auto,
        }
    }
}

impl FisherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subsample_size == 0 {
            return Err(Error::Config("fisher subsample size must be >= 1".into()));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Config("fisher minibatch size must be >= 1".into()));
        }
        if !(self.damp > 0.0 && self.damp.is_finite()) {
            return Err(Error::Config(format!(
                "dampening {} must be > 0",
                self.damp
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `m` (minibatch-averaged) gradients from `data` without replacement.
///
/// `index_rng` picks the examples; `label_rng` is only consumed in the
/// sampled-label mode.
pub fn collect_grad_samples<T: Real, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    model: &MlpModel<T>,
    data: &Dataset<T>,
    cfg: &FisherConfig,
    index_rng: &mut R1,
    label_rng: &mut R2,
) -> Result<Vec<GradSample<T>>> {
    cfg.validate()?;
    let need = cfg.subsample_size * cfg.minibatch_size;
    if data.len() < need {
        return Err(Error::Data(format!(
            "need {need} examples for {} x {} fisher samples, dataset has {}",
            cfg.subsample_size,
            cfg.minibatch_size,
            data.len()
        )));
    }
    let picked = rand::seq::index::sample(index_rng, data.len(), need).into_vec();
    let mut samples = Vec::with_capacity(cfg.subsample_size);
    for batch in picked.chunks(cfg.minibatch_size) {
        let x = data.inputs().select(Axis(0), batch);
        let labels: Vec<usize> = match cfg.label_mode {
            LabelMode::Empirical => batch.iter().map(|&i| data.labels()[i]).collect(),
            LabelMode::Sampled => {
                let logits = model.forward(x.view())?;
                logits
                    .rows()
                    .into_iter()
                    .map(|row| sample_categorical(&row.to_vec(), label_rng))
                    .collect::<Result<_>>()?
            }
        };
        let (_, grad) = model.batch_loss_and_grad(x.view(), &labels)?;
        samples.push(GradSample {
            grad,
            weight: batch.len(),
        });
    }
    Ok(samples)
}

/// Example-weighted mean of the samples, an estimate of the loss gradient.
pub fn mean_gradient<T: Real>(samples: &[GradSample<T>], dim: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); dim];
    let total: usize = samples.iter().map(|s| s.weight).sum();
    if total == 0 {
        return Ok(out);
    }
    for s in samples {
        check_len("gradient sample", s.grad.len(), dim)?;
        axpy(
            T::of_usize(s.weight) / T::of_usize(total),
            &s.grad,
            &mut out,
        );
    }
    Ok(out)
}

/// Splits every layout segment into consecutive chunks of at most
/// `chunk_size` entries; the last chunk of a segment may be shorter.
pub fn chunk_ranges(layout: &LayerLayout, chunk_size: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    for seg in layout.segments() {
        let mut start = seg.offset;
        let end = seg.offset + seg.len;
        while start < end {
            let stop = end.min(start.saturating_add(chunk_size));
            out.push(start..stop);
            start = stop;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
enum Block<T> {
    Dense {
        n: usize,
        a: Vec<T>,
    },
    Factored {
        n: usize,
        inv_damp: T,
        /// `uₖ` stacked row-wise.
        us: Vec<T>,
        /// `1 / dₖ`.
        scales: Vec<T>,
    },
}

impl<T: Real> Block<T> {
    fn size(&self) -> usize {
        match self {
            Block::Dense { n, .. } | Block::Factored { n, .. } => *n,
        }
    }

    fn build(grads: &[&[T]], n: usize, damp: T, dense: bool, first_index: usize) -> Result<Self> {
        let m = T::of_usize(grads.len());
        let inv_damp = T::one() / damp;
        let fail = |k: usize, what: &str| {
            Error::numeric(
                format!("woodbury update {k} of chunk starting at {first_index}"),
                what.to_string(),
            )
        };
        if dense {
            let mut a = vec![T::zero(); n * n];
            for i in 0..n {
                a[i * n + i] = inv_damp;
            }
            let mut u = vec![T::zero(); n];
            for (k, g) in grads.iter().enumerate() {
                for (i, ui) in u.iter_mut().enumerate() {
                    *ui = dot(&a[i * n..(i + 1) * n], g);
                }
                let den = m + dot(g, &u);
                if !(den.is_finite() && den > T::zero()) || !all_finite(&u) {
                    return Err(fail(k, "non-finite or non-positive denominator"));
                }
                let s = T::one() / den;
                for i in 0..n {
                    let row = &mut a[i * n..(i + 1) * n];
                    for (j, aij) in row.iter_mut().enumerate() {
                        *aij -= (u[i] * u[j]) * s;
                    }
                }
            }
            Ok(Block::Dense { n, a })
        } else {
            let mut us: Vec<T> = Vec::with_capacity(grads.len() * n);
            let mut scales: Vec<T> = Vec::with_capacity(grads.len());
            for (k, g) in grads.iter().enumerate() {
                let mut u: Vec<T> = g.iter().map(|&x| x * inv_damp).collect();
                for (j, &sj) in scales.iter().enumerate() {
                    let uj = &us[j * n..(j + 1) * n];
                    let coef = dot(uj, g) * sj;
                    axpy(-coef, uj, &mut u);
                }
                let den = m + dot(g, &u);
                if !(den.is_finite() && den > T::zero()) || !all_finite(&u) {
                    return Err(fail(k, "non-finite or non-positive denominator"));
                }
                us.extend_from_slice(&u);
                scales.push(T::one() / den);
            }
            Ok(Block::Factored {
                n,
                inv_damp,
                us,
                scales,
            })
        }
    }

    fn matvec(&self, v: &[T], out: &mut [T]) {
        match self {
            Block::Dense { n, a } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(&a[i * n..(i + 1) * n], v);
                }
            }
            Block::Factored {
                n,
                inv_damp,
                us,
                scales,
            } => {
                for (o, &x) in out.iter_mut().zip(v) {
                    *o = x * *inv_damp;
                }
                for (u, &s) in us.chunks_exact(*n).zip(scales) {
                    let coef = dot(u, v) * s;
                    axpy(-coef, u, out);
                }
            }
        }
    }

    fn diagonal(&self, out: &mut [T]) {
        match self {
            Block::Dense { n, a } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = a[i * n + i];
                }
            }
            Block::Factored {
                n,
                inv_damp,
                us,
                scales,
            } => {
                out.fill(*inv_damp);
                for (u, &s) in us.chunks_exact(*n).zip(scales) {
                    for (o, &ui) in out.iter_mut().zip(u) {
                        *o -= ui * ui * s;
                    }
                }
            }
        }
    }

    fn to_dense(&self) -> Vec<T> {
        match self {
            Block::Dense { a, .. } => a.clone(),
            Block::Factored { n, .. } => {
                let n = *n;
                let mut a = vec![T::zero(); n * n];
                let mut e = vec![T::zero(); n];
                let mut col = vec![T::zero(); n];
                for j in 0..n {
                    e[j] = T::one();
                    self.matvec(&e, &mut col);
                    e[j] = T::zero();
                    for i in 0..n {
                        a[i * n + j] = col[i];
                    }
                }
                a
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk<T> {
    pub range: Range<usize>,
    block: Block<T>,
}

impl<T: Real> Chunk<T> {
    /// Row-major copy of this chunk's inverse block.
    pub fn to_dense(&self) -> Vec<T> {
        self.block.to_dense()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.block, Block::Dense { .. })
    }
}

/// Block-diagonal inverse of the dampened empirical Fisher.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedFisherInverse<T> {
    dim: usize,
    damp: T,
    terms: usize,
    chunks: Vec<Chunk<T>>,
}

/// Builds one inverse block per chunk. Blocks are independent and built in
/// parallel on the current rayon pool; the result does not depend on the
/// number of threads.
pub fn woodfisher_build<T: Real>(
    samples: &[GradSample<T>],
    layout: &LayerLayout,
    cfg: &FisherConfig,
) -> Result<ChunkedFisherInverse<T>> {
    if !(cfg.damp > 0.0 && cfg.damp.is_finite()) {
        return Err(Error::Config(format!("dampening {} must be > 0", cfg.damp)));
    }
    if cfg.chunk_size == 0 {
        return Err(Error::Config("chunk size must be >= 1".into()));
    }
    let d = layout.dim();
    for (k, s) in samples.iter().enumerate() {
        check_len(&format!("gradient sample {k}"), s.grad.len(), d)?;
        if !all_finite(&s.grad) {
            return Err(Error::numeric(
                format!("gradient sample {k}"),
                "non-finite entry",
            ));
        }
    }
    let damp = T::of(cfg.damp);
    let m = samples.len();
    let chunks = chunk_ranges(layout, cfg.chunk_size)
        .into_par_iter()
        .map(|range| {
            let n = range.len();
            let dense = match cfg.storage {
                BlockStorage::Dense => true,
                BlockStorage::Factored => false,
                BlockStorage::Auto => m > 0 && 2 * n <= m,
            };
            let grads: Vec<&[T]> = samples.iter().map(|s| &s.grad[range.clone()]).collect();
            let block = Block::build(&grads, n, damp, dense, range.start)?;
            Ok(Chunk { range, block })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChunkedFisherInverse {
        dim: d,
        damp,
        terms: m,
        chunks,
    })
}

impl<T: Real> ChunkedFisherInverse<T> {
    pub fn chunks(&self) -> &[Chunk<T>] {
        &self.chunks
    }

    pub fn damp(&self) -> T {
        self.damp
    }

    /// Number of rank-one terms the blocks were built from.
    pub fn terms(&self) -> usize {
        self.terms
    }

    /// Largest block size.
    pub fn max_block(&self) -> usize {
        self.chunks
            .iter()
            .map(|c| c.block.size())
            .max()
            .unwrap_or(0)
    }
}

/// Access to an inverse curvature estimate `H⁻¹`.
pub trait InverseCurvature<T: Real>: Sync {
    fn dim(&self) -> usize;

    /// `H⁻¹ v`.
    fn ihvp(&self, v: &[T]) -> Result<Vec<T>>;

    /// `[H⁻¹]_qq` for every `q`.
    fn inverse_diagonal(&self) -> Vec<T>;
}

impl<T: Real> InverseCurvature<T> for ChunkedFisherInverse<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    /// Block-diagonal product; coordinates outside every chunk get `v / λ`.
    fn ihvp(&self, v: &[T]) -> Result<Vec<T>> {
        check_len("ihvp argument", v.len(), self.dim)?;
        let mut out: Vec<T> = v.iter().map(|&x| x / self.damp).collect();
        for c in &self.chunks {
            c.block
                .matvec(&v[c.range.clone()], &mut out[c.range.clone()]);
        }
        Ok(out)
    }

    fn inverse_diagonal(&self) -> Vec<T> {
        let mut out = vec![T::one() / self.damp; self.dim];
        for c in &self.chunks {
            c.block.diagonal(&mut out[c.range.clone()]);
        }
        out
    }
}

/// `H⁻¹ = scale · I`; with `scale = 1` the OBS statistics reduce to
/// magnitude pruning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsotropicInverse<T> {
    pub dim: usize,
    pub scale: T,
}

impl<T: Real> InverseCurvature<T> for IsotropicInverse<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn ihvp(&self, v: &[T]) -> Result<Vec<T>> {
        check_len("ihvp argument", v.len(), self.dim)?;
        Ok(v.iter().map(|&x| x * self.scale).collect())
    }

    fn inverse_diagonal(&self) -> Vec<T> {
        vec![self.scale; self.dim]
    }
}

/// An explicitly given dense, symmetric `H⁻¹` (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitInverse<T> {
    n: usize,
    entries: Vec<T>,
}

impl<T: Real> ExplicitInverse<T> {
    pub fn new(n: usize, entries: Vec<T>) -> Result<Self> {
        check_len("explicit inverse", entries.len(), n * n)?;
        Ok(Self { n, entries })
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }
}

impl<T: Real> InverseCurvature<T> for ExplicitInverse<T> {
    fn dim(&self) -> usize {
        self.n
    }

    fn ihvp(&self, v: &[T]) -> Result<Vec<T>> {
        check_len("ihvp argument", v.len(), self.n)?;
        Ok((0..self.n)
            .map(|i| dot(&self.entries[i * self.n..(i + 1) * self.n], v))
            .collect())
    }

    fn inverse_diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.entries[i * self.n + i]).collect()
    }
}

/// `λ + (1/m) Σ g[q]²` per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalFisher<T> {
    pub diag: Vec<T>,
}

pub fn diagonal_fisher<T: Real>(
    samples: &[GradSample<T>],
    dim: usize,
    damp: T,
) -> Result<DiagonalFisher<T>> {
    let mut diag = vec![T::zero(); dim];
    for s in samples {
        check_len("gradient sample", s.grad.len(), dim)?;
        for (d, &g) in diag.iter_mut().zip(&s.grad) {
            *d += g * g;
        }
    }
    let m = T::of_usize(samples.len().max(1));
    for d in &mut diag {
        *d = damp + *d / m;
    }
    Ok(DiagonalFisher { diag })
}

/// Diagonal Fisher from `count` individual examples drawn without
/// replacement, accumulated one gradient at a time.
pub fn per_example_diagonal_fisher<T: Real, R1: Rng + ?Sized, R2: Rng + ?Sized>(
    model: &MlpModel<T>,
    data: &Dataset<T>,
    count: usize,
    damp: T,
    label_mode: LabelMode,
    index_rng: &mut R1,
    label_rng: &mut R2,
) -> Result<DiagonalFisher<T>> {
    if count > data.len() {
        return Err(Error::Data(format!(
            "need {count} examples for the diagonal fisher, dataset has {}",
            data.len()
        )));
    }
    let dim = model.space().dim();
    let mut diag = vec![T::zero(); dim];
    let picked = rand::seq::index::sample(index_rng, data.len(), count).into_vec();
    for &i in &picked {
        let x = data.inputs().row(i).to_vec();
        let y = match label_mode {
            LabelMode::Empirical => data.labels()[i],
            LabelMode::Sampled => model.sample_label(&x, label_rng)?,
        };
        let (_, g) = model.loss_and_grad(&x, y)?;
        for (d, gi) in diag.iter_mut().zip(g) {
            *d += gi * gi;
        }
    }
    let m = T::of_usize(count.max(1));
    for d in &mut diag {
        *d = damp + *d / m;
    }
    Ok(DiagonalFisher { diag })
}

impl<T: Real> InverseCurvature<T> for DiagonalFisher<T> {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn ihvp(&self, v: &[T]) -> Result<Vec<T>> {
        check_len("ihvp argument", v.len(), self.diag.len())?;
        Ok(v.iter().zip(&self.diag).map(|(&x, &d)| x / d).collect())
    }

    fn inverse_diagonal(&self) -> Vec<T> {
        self.diag.iter().map(|&d| T::one() / d).collect()
    }
}

/// The dampened empirical Fisher applied through its samples:
/// `F v = λ v + (1/m) Σ g (gᵀ v)`.
pub struct EmpiricalFisher<'a, T> {
    pub samples: &'a [GradSample<T>],
    pub damp: T,
}

impl<T: Real> Curvature<T> for EmpiricalFisher<'_, T> {
    fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.grad.len())
    }

    fn hvp(&self, v: &[T]) -> Result<Vec<T>> {
        let mut out: Vec<T> = v.iter().map(|&x| x * self.damp).collect();
        if self.samples.is_empty() {
            return Ok(out);
        }
        let inv_m = T::one() / T::of_usize(self.samples.len());
        for s in self.samples {
            check_len("hvp argument", v.len(), s.grad.len())?;
            axpy(dot(&s.grad, v) * inv_m, &s.grad, &mut out);
        }
        Ok(out)
    }
}
