//! Compensated (Kahan–Neumaier) summation.
//!
//! Energy values and residual norms are accumulated over thousands of faces
//! and later compared against tolerances as tight as 1e-18; plain summation
//! noise would be visible at that scale. All energy accumulations in this
//! crate go through [`Kahan`] so results are both accurate and independent of
//! any parallel chunking (reductions are always performed in index order).

/// Running compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    /// Fresh accumulator at zero.
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one term (Neumaier variant: also safe when `x` dominates `sum`).
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// Current value of the sum.
    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    /// Sum an iterator of terms.
    pub fn sum_iter<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
        let mut k = Kahan::new();
        for x in iter {
            k.add(x);
        }
        k.value()
    }
}
