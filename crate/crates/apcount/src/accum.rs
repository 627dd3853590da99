//! Compensated floating-point accumulation (Kahan–Babuška–Neumaier).
//!
//! Long enumerations accumulate millions of terms; plain `+=` loses low-order
//! bits in a schedule-dependent way. The accumulators here keep a running
//! compensation term, and merging two accumulators in a fixed order is how
//! parallel partial sums are combined deterministically.

use num::complex::Complex64;

#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    compensation: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// Folds another accumulator in; order of merges must be fixed by the
    /// caller for run-to-run determinism.
    pub fn merge(&mut self, other: Kahan) {
        self.add(other.sum);
        self.add(other.compensation);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KahanComplex {
    re: Kahan,
    im: Kahan,
}

impl KahanComplex {
    pub fn add(&mut self, z: Complex64) {
        self.re.add(z.re);
        self.im.add(z.im);
    }

    pub fn merge(&mut self, other: KahanComplex) {
        self.re.merge(other.re);
        self.im.merge(other.im);
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re.value(), self.im.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancellation_that_naive_sum_loses() {
        let mut k = Kahan::default();
        let mut naive = 0.0f64;
        for _ in 0..10_000 {
            for &x in &[1.0e16, 1.0, -1.0e16] {
                k.add(x);
                naive += x;
            }
        }
        assert_eq!(k.value(), 10_000.0);
        assert_ne!(naive, 10_000.0);
    }

    #[test]
    fn ordered_merge_matches_sequential_sum() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 1e-3).collect();
        let mut whole = Kahan::default();
        for &x in &xs {
            whole.add(x);
        }
        let mut merged = Kahan::default();
        for chunk in xs.chunks(64) {
            let mut part = Kahan::default();
            for &x in chunk {
                part.add(x);
            }
            merged.merge(part);
        }
        assert!((whole.value() - merged.value()).abs() <= 1e-12 * whole.value().abs());
    }
}
