use crate::error::Result;
use crate::scalar::Real;

/// A scalar loss over a flat parameter vector.
pub trait Objective<T: Real> {
    fn dim(&self) -> usize;

    fn loss(&self, w: &[T]) -> Result<T>;

    fn gradient(&self, w: &[T]) -> Result<Vec<T>>;
}

/// Applies a curvature matrix to a vector.
pub trait Curvature<T: Real> {
    fn dim(&self) -> usize;

    fn hvp(&self, v: &[T]) -> Result<Vec<T>>;
}

/// `½ wᵀ A w + bᵀ w + c` for an explicit symmetric `A` (row-major).
#[derive(Clone, Debug)]
pub struct Quadratic<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: T,
}

impl<T: Real> Quadratic<T> {
    fn n(&self) -> usize {
        self.b.len()
    }

    fn matvec(&self, w: &[T]) -> Vec<T> {
        let n = self.n();
        (0..n)
            .map(|i| crate::scalar::dot(&self.a[i * n..(i + 1) * n], w))
            .collect()
    }
}

impl<T: Real> Objective<T> for Quadratic<T> {
    fn dim(&self) -> usize {
        self.n()
    }

    fn loss(&self, w: &[T]) -> Result<T> {
        crate::error::check_len("quadratic argument", w.len(), self.n())?;
        let aw = self.matvec(w);
        let half = T::of(0.5);
        Ok(half * crate::scalar::dot(w, &aw) + crate::scalar::dot(&self.b, w) + self.c)
    }

    fn gradient(&self, w: &[T]) -> Result<Vec<T>> {
        crate::error::check_len("quadratic argument", w.len(), self.n())?;
        let mut g = self.matvec(w);
        for (gi, &bi) in g.iter_mut().zip(&self.b) {
            *gi += bi;
        }
        Ok(g)
    }
}

impl<T: Real> Curvature<T> for Quadratic<T> {
    fn dim(&self) -> usize {
        self.n()
    }

    fn hvp(&self, v: &[T]) -> Result<Vec<T>> {
        crate::error::check_len("hvp argument", v.len(), self.n())?;
        Ok(self.matvec(v))
    }
}
