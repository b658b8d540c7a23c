//! Bracketed one-dimensional minimization.
//!
//! A coarse uniform grid locates the best bracket (so a non-unimodal
//! objective still lands in the basin of the global minimum on the grid), then
//! golden-section search narrows it to the requested width.

/// Grid points used to bracket the minimum.
pub const COARSE_GRID: usize = 64;

#[derive(Debug, Clone, Copy)]
pub struct ScalarSearch {
    pub lo: f64,
    pub hi: f64,
    /// Final bracket width.
    pub tol: f64,
    /// Returned when the objective is flat; also breaks ties.
    pub prefer: f64,
}

impl ScalarSearch {
    pub fn new(lo: f64, hi: f64, tol: f64, prefer: f64) -> Self {
        assert!(lo < hi, "empty search interval");
        Self {
            lo,
            hi,
            tol: tol.max(f64::EPSILON),
            prefer: prefer.clamp(lo, hi),
        }
    }

    pub fn grid_spacing(&self) -> f64 {
        (self.hi - self.lo) / (COARSE_GRID - 1) as f64
    }

    pub fn minimize<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let f = |x: f64| {
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        let step = self.grid_spacing();
        let xs: Vec<f64> = (0..COARSE_GRID)
            .map(|i| {
                if i + 1 == COARSE_GRID {
                    self.hi
                } else {
                    self.lo + step * i as f64
                }
            })
            .collect();
        let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();

        let fmin = fs.iter().copied().fold(f64::INFINITY, f64::min);
        let fmax = fs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if fmin.is_finite() && fmax - fmin <= 1e-12 * (1.0 + fmin.abs()) {
            return self.prefer;
        }

        let mut best = 0;
        for i in 1..COARSE_GRID {
            let closer = (xs[i] - self.prefer).abs() < (xs[best] - self.prefer).abs();
            if fs[i] < fs[best] || (fs[i] == fs[best] && closer) {
                best = i;
            }
        }
        let a = xs[best.saturating_sub(1)];
        let b = xs[(best + 1).min(COARSE_GRID - 1)];
        let x = self.golden(&f, a, b);
        if f(x) <= fs[best] {
            x
        } else {
            xs[best]
        }
    }

    fn golden<F: Fn(f64) -> f64>(&self, f: &F, mut a: f64, mut b: f64) -> f64 {
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let mut fc = f(c);
        let mut fd = f(d);
        while b - a > self.tol {
            let go_left = fc < fd || (fc == fd && self.prefer < (c + d) / 2.0);
            if go_left {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = f(d);
            }
        }
        (a + b) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_quadratic_minimum() {
        let s = ScalarSearch::new(-5.0, 5.0, 1e-8, 0.0);
        let x = s.minimize(|x| (x - 1.234).powi(2));
        assert!((x - 1.234).abs() < 1e-7);
    }

    #[test]
    fn flat_objective_returns_preferred_point() {
        let s = ScalarSearch::new(-3.0, 3.0, 1e-6, 0.5);
        assert_eq!(s.minimize(|_| 2.0), 0.5);
    }

    #[test]
    fn boundary_minimum() {
        let s = ScalarSearch::new(-1.0, 1.0, 1e-9, 0.0);
        let x = s.minimize(|x| x);
        assert!((x + 1.0).abs() < 1e-8);
    }

    #[test]
    fn escapes_local_minimum() {
        // Deep minimum near 3, shallow one near -2.
        let f = |x: f64| -(-(x - 3.0).powi(2) * 4.0).exp() - 0.3 * (-(x + 2.0).powi(2)).exp();
        let s = ScalarSearch::new(-6.0, 6.0, 1e-8, -2.0);
        let x = s.minimize(f);
        assert!((x - 3.0).abs() < 1e-4, "{x}");
    }
}
