//! Brute-force reference solvers for small problems.
//!
//! Nothing here calls into [`crate::fisher`] or [`crate::pruner`]; tests use
//! these routines to check the fast paths against explicit linear algebra.

use crate::error::{check_len, Error, Result};
use crate::fisher::GradSample;
use crate::objective::Objective;
use crate::scalar::Real;

/// Square row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![T::one(); n])
    }

    pub fn diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    pub fn from_vec(n: usize, data: Vec<T>) -> Result<Self> {
        check_len("dense matrix entries", data.len(), n * n)?;
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            check_len("dense matrix row", r.len(), n)?;
            data.extend_from_slice(r);
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn diag(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    /// `vᵀ M v`.
    pub fn quad_form(&self, v: &[T]) -> T {
        self.matvec(v).iter().zip(v).map(|(&a, &b)| a * b).sum()
    }

    /// `(M + Mᵀ) / 2`; the result is symmetric bit for bit.
    pub fn symmetrized(&self) -> Self {
        let half = T::of(0.5);
        let mut s = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                s.set(i, j, (self.get(i, j) + self.get(j, i)) * half);
            }
        }
        s
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.max_abs_diff(&self.transpose()) <= tol
    }
}

/// `λI + (1/m) Σ gₙ gₙᵀ`, term by term.
pub fn dense_empirical_fisher<T: Real>(
    samples: &[GradSample<T>],
    dim: usize,
    damp: T,
) -> Result<DenseMatrix<T>> {
    let mut f = DenseMatrix::zeros(dim);
    let m = T::of_usize(samples.len().max(1));
    for s in samples {
        check_len("gradient sample", s.grad.len(), dim)?;
        for i in 0..dim {
            for j in 0..dim {
                f.data[i * dim + j] += s.grad[i] * s.grad[j] / m;
            }
        }
    }
    for i in 0..dim {
        f.data[i * dim + i] += damp;
    }
    Ok(f)
}

/// Gauss-Jordan elimination with partial pivoting.
pub fn dense_inverse<T: Real>(m: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let n = m.n;
    let mut a = m.data.clone();
    let mut inv = DenseMatrix::<T>::identity(n).data;
    let scale = a.iter().fold(T::zero(), |s, &x| s.max(x.abs()));
    let tiny = scale * T::epsilon() * T::of_usize(n.max(1));
    for col in 0..n {
        let p = (col..n)
            .max_by(|&x, &y| {
                a[x * n + col]
                    .abs()
                    .partial_cmp(&a[y * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if !(a[p * n + col].abs() > tiny) {
            return Err(Error::numeric(
                "dense inverse",
                format!("singular at column {col}"),
            ));
        }
        if p != col {
            for j in 0..n {
                a.swap(col * n + j, p * n + j);
                inv.swap(col * n + j, p * n + j);
            }
        }
        let piv = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= piv;
            inv[col * n + j] /= piv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == T::zero() {
                continue;
            }
            for j in 0..n {
                let (pa, pi) = (a[col * n + j], inv[col * n + j]);
                a[r * n + j] -= f * pa;
                inv[r * n + j] -= f * pi;
            }
        }
    }
    Ok(DenseMatrix { n, data: inv })
}

/// Solves `A x = b` for a general (not necessarily square-symmetric) system
/// given as rows, by Gaussian elimination with partial pivoting.
pub fn solve_linear<T: Real>(rows: &[Vec<T>], b: &[T]) -> Result<Vec<T>> {
    let n = rows.len();
    check_len("right-hand side", b.len(), n)?;
    let mut a: Vec<Vec<T>> = rows.to_vec();
    let mut x = b.to_vec();
    for r in &a {
        check_len("system row", r.len(), n)?;
    }
    let scale = a.iter().flatten().fold(T::zero(), |s, &v| s.max(v.abs()));
    let tiny = scale * T::epsilon() * T::of_usize(n.max(1));
    for col in 0..n {
        let p = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if !(a[p][col].abs() > tiny) {
            return Err(Error::numeric(
                "linear solve",
                format!("singular at column {col}"),
            ));
        }
        a.swap(col, p);
        x.swap(col, p);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == T::zero() {
                continue;
            }
            for j in col..n {
                let v = a[col][j];
                a[r][j] -= f * v;
            }
            let v = x[col];
            x[r] -= f * v;
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for j in col + 1..n {
            s -= a[col][j] * x[j];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues<T: Real>(m: &DenseMatrix<T>) -> Vec<T> {
    let n = m.n;
    let mut a = m.symmetrized().data;
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= T::min_positive_value() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (T::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

pub fn is_positive_definite<T: Real>(m: &DenseMatrix<T>) -> bool {
    m.is_symmetric(T::of(1e-12) * m.data.iter().fold(T::one(), |s, &x| s.max(x.abs())))
        && jacobi_eigenvalues(m).first().is_none_or(|&e| e > T::zero())
}

/// Solution of `min ½ xᵀHx + gᵀx  s.t.  C x = r`.
#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    /// Lagrange multipliers, one per constraint row.
    pub multipliers: Vec<T>,
    /// Objective value at `x`, evaluated directly.
    pub objective: T,
}

/// Equality-constrained QP through its full KKT system
/// `[[H, Cᵀ], [C, 0]] [x; ν] = [-g; r]`.
pub fn kkt_solve<T: Real>(
    h: &DenseMatrix<T>,
    g: &[T],
    constraints: &[Vec<T>],
    rhs: &[T],
) -> Result<QpSolution<T>> {
    let d = h.n;
    let k = constraints.len();
    check_len("linear term", g.len(), d)?;
    check_len("constraint right-hand side", rhs.len(), k)?;
    let mut rows = vec![vec![T::zero(); d + k]; d + k];
    for i in 0..d {
        rows[i][..d].copy_from_slice(h.row(i));
    }
    for (c, row) in constraints.iter().enumerate() {
        check_len("constraint row", row.len(), d)?;
        for j in 0..d {
            rows[d + c][j] = row[j];
            rows[j][d + c] = row[j];
        }
    }
    let mut b: Vec<T> = g.iter().map(|&v| -v).collect();
    b.extend_from_slice(rhs);
    let sol = solve_linear(&rows, &b).map_err(|_| Error::numeric("kkt system", "singular"))?;
    let x = sol[..d].to_vec();
    let lin: T = g.iter().zip(&x).map(|(&a, &b)| a * b).sum();
    let objective = T::of(0.5) * h.quad_form(&x) + lin;
    Ok(QpSolution {
        x,
        multipliers: sol[d..].to_vec(),
        objective,
    })
}

/// Exact optimal removal of each single coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleRemovalTable<T> {
    /// First index attaining the smallest loss change.
    pub best: usize,
    pub delta_loss: Vec<T>,
    pub delta_w: Vec<Vec<T>>,
}

fn unit<T: Real>(d: usize, q: usize) -> Vec<T> {
    let mut e = vec![T::zero(); d];
    e[q] = T::one();
    e
}

/// For every `q`: `min ½ δᵀHδ  s.t.  δ_q = -w_q`.
pub fn exact_single_removal<T: Real>(w: &[T], h: &DenseMatrix<T>) -> Result<SingleRemovalTable<T>> {
    let d = h.n;
    check_len("weights", w.len(), d)?;
    let zero = vec![T::zero(); d];
    let mut delta_loss = Vec::with_capacity(d);
    let mut delta_w = Vec::with_capacity(d);
    for q in 0..d {
        let s = kkt_solve(h, &zero, &[unit(d, q)], &[-w[q]])?;
        delta_loss.push(s.objective);
        delta_w.push(s.x);
    }
    let mut best = 0;
    for q in 1..d {
        if delta_loss[q] < delta_loss[best] {
            best = q;
        }
    }
    Ok(SingleRemovalTable {
        best,
        delta_loss,
        delta_w,
    })
}

/// Exact joint removal of two coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRemoval<T> {
    pub multipliers: [T; 2],
    pub delta_w: Vec<T>,
    pub delta_loss: T,
}

/// Solves the 2x2 multiplier system `[H⁻¹]_{QQ} ν = w_Q` and sets
/// `δw = -H⁻¹(ν₁ e_{q1} + ν₂ e_{q2})`.
pub fn exact_pair_removal<T: Real>(
    w: &[T],
    h: &DenseMatrix<T>,
    q1: usize,
    q2: usize,
) -> Result<PairRemoval<T>> {
    let d = h.n;
    check_len("weights", w.len(), d)?;
    if q1 == q2 || q1 >= d || q2 >= d {
        return Err(Error::Structural(format!(
            "invalid pair ({q1}, {q2}) for dimension {d}"
        )));
    }
    let hi = dense_inverse(h)?;
    let sys = vec![
        vec![hi.get(q1, q1), hi.get(q1, q2)],
        vec![hi.get(q2, q1), hi.get(q2, q2)],
    ];
    let nu = solve_linear(&sys, &[w[q1], w[q2]])?;
    let delta_w: Vec<T> = (0..d)
        .map(|i| -(hi.get(i, q1) * nu[0] + hi.get(i, q2) * nu[1]))
        .collect();
    let delta_loss = T::of(0.5) * h.quad_form(&delta_w);
    Ok(PairRemoval {
        multipliers: [nu[0], nu[1]],
        delta_w,
        delta_loss,
    })
}

/// Largest dimension [`fd_hessian`] accepts.
pub const FD_MAX_DIM: usize = 200;

/// Central differences of the analytic gradient, step `1e-4`, symmetrized.
pub fn fd_hessian<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    w: &[T],
) -> Result<DenseMatrix<T>> {
    let d = objective.dim();
    check_len("weights", w.len(), d)?;
    if d > FD_MAX_DIM {
        return Err(Error::Structural(format!(
            "finite-difference hessian limited to {FD_MAX_DIM} parameters, got {d}"
        )));
    }
    let h = T::of(1e-4);
    let mut a = DenseMatrix::zeros(d);
    let mut x = w.to_vec();
    for j in 0..d {
        x[j] = w[j] + h;
        let gp = objective.gradient(&x)?;
        x[j] = w[j] - h;
        let gm = objective.gradient(&x)?;
        x[j] = w[j];
        for i in 0..d {
            a.set(i, j, (gp[i] - gm[i]) / (h + h));
        }
    }
    Ok(a.symmetrized())
}
