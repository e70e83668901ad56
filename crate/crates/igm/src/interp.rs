//! Monotone piecewise-cubic interpolation (Fritsch–Carlson slope
//! limiting), used for tabulated volume laws that must stay monotone and
//! carry a derivative everywhere.

/// Cubic Hermite interpolant with Fritsch–Carlson limited slopes.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    /// Build from samples with strictly increasing `xs`. The data is
    /// interpolated exactly; slopes are limited so the interpolant is
    /// monotone on every interval where the data is.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert_eq!(xs.len(), ys.len());
        assert!(xs.len() >= 2, "need at least two samples");
        for w in xs.windows(2) {
            assert!(w[1] > w[0], "xs must be strictly increasing");
        }
        let n = xs.len();
        let mut deltas = vec![0.0; n - 1];
        for i in 0..n - 1 {
            deltas[i] = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        }
        let mut slopes = vec![0.0; n];
        slopes[0] = deltas[0];
        slopes[n - 1] = deltas[n - 2];
        for i in 1..n - 1 {
            if deltas[i - 1] * deltas[i] <= 0.0 {
                slopes[i] = 0.0;
            } else {
                // harmonic mean weighted by interval widths
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                slopes[i] = (w1 + w2) / (w1 / deltas[i - 1] + w2 / deltas[i]);
            }
        }
        // limit endpoint and interior slopes to three times the secant
        for i in 0..n - 1 {
            if deltas[i] == 0.0 {
                slopes[i] = 0.0;
                slopes[i + 1] = 0.0;
            } else {
                let a = slopes[i] / deltas[i];
                let b = slopes[i + 1] / deltas[i];
                if a < 0.0 {
                    slopes[i] = 0.0;
                }
                if b < 0.0 {
                    slopes[i + 1] = 0.0;
                }
                let s = (a * a + b * b).sqrt();
                if s > 3.0 {
                    slopes[i] = 3.0 * deltas[i] * a / s;
                    slopes[i + 1] = 3.0 * deltas[i] * b / s;
                }
            }
        }
        Self { xs, ys, slopes }
    }

    fn locate(&self, x: f64) -> usize {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return 0;
        }
        if x >= self.xs[n - 1] {
            return n - 2;
        }
        match self
            .xs
            .binary_search_by(|v| v.partial_cmp(&x).expect("finite x"))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        }
    }

    /// Interpolated value; clamps to the end intervals outside the table.
    pub fn eval(&self, x: f64) -> f64 {
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = ((x - self.xs[i]) / h).clamp(0.0, 1.0);
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        y0 * (2.0 * t3 - 3.0 * t2 + 1.0)
            + m0 * (t3 - 2.0 * t2 + t)
            + y1 * (-2.0 * t3 + 3.0 * t2)
            + m1 * (t3 - t2)
    }

    /// Derivative of the interpolant.
    pub fn deriv(&self, x: f64) -> f64 {
        let i = self.locate(x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = ((x - self.xs[i]) / h).clamp(0.0, 1.0);
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let t2 = t * t;
        let dy = y0 * (6.0 * t2 - 6.0 * t)
            + m0 * (3.0 * t2 - 4.0 * t + 1.0)
            + y1 * (-6.0 * t2 + 6.0 * t)
            + m1 * (3.0 * t2 - 2.0 * t);
        dy / h
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().expect("nonempty"))
    }
}
