//! Compactly supported spline cutoff profile.
//!
//! The cutoff is a one-dimensional C^{k-1} profile `c : [0, ∞) -> [0, 1]`
//! built from degree-k B-splines on the clamped uniform knot vector over
//! [0, 1] with K subintervals (end knots of multiplicity k+1, interior knots
//! at i/K). Of the K + k basis functions, the profile sums the first K:
//!
//! * `c ≡ 1` exactly on the plateau `[0, (K-k)/K]` — every basis function
//!   whose support touches that region is included, so the partition of
//!   unity is untouched there;
//! * `c` decreases monotonically across the transition band
//!   `[(K-k)/K, 1]` — its derivative is a single negative multiple of one
//!   degree-(k-1) B-spline supported exactly on the band;
//! * `c ≡ 0` for arguments ≥ 1.
//!
//! Consumers evaluate it at `x = 4‖y‖²`, which turns the band into a radial
//! collar inside the ball of radius 1/2 and makes any field multiplied by the
//! profile vanish identically on and outside the boundary.
//!
//! Evaluation uses de Boor's recurrence on the coefficient representation;
//! first and second derivatives are precomputed as lower-degree spline curves
//! via the standard coefficient-differencing rule, so no finite differencing
//! is involved anywhere.

use crate::error::{Error, Result};

/// One polynomial spline curve in B-form: degree, knots, coefficients.
#[derive(Debug, Clone)]
struct SplineCurve {
    degree: usize,
    knots: Vec<f64>,
    coeffs: Vec<f64>,
    segments: usize,
}

impl SplineCurve {
    /// Derivative curve: degree drops by one, coefficients are scaled
    /// differences, knot vector loses its first and last entry.
    fn derivative(&self) -> SplineCurve {
        let p = self.degree;
        assert!(p >= 1, "cannot differentiate a degree-0 spline curve");
        let n = self.coeffs.len();
        let mut coeffs = Vec::with_capacity(n - 1);
        for j in 0..n - 1 {
            let denom = self.knots[j + p + 1] - self.knots[j + 1];
            let c = if denom == 0.0 {
                0.0
            } else {
                p as f64 * (self.coeffs[j + 1] - self.coeffs[j]) / denom
            };
            coeffs.push(c);
        }
        SplineCurve {
            degree: p - 1,
            knots: self.knots[1..self.knots.len() - 1].to_vec(),
            coeffs,
            segments: self.segments,
        }
    }

    /// Knot span index for `x ∈ [0, 1)`; uniform interior knots make this a
    /// closed-form flooring.
    fn span(&self, x: f64) -> usize {
        let i = ((x * self.segments as f64).floor() as usize).min(self.segments - 1);
        self.degree + i
    }

    /// de Boor evaluation at `x ∈ [0, 1)`.
    fn eval(&self, x: f64) -> f64 {
        let p = self.degree;
        let mu = self.span(x);
        if p == 0 {
            return self.coeffs[mu];
        }
        let mut d: Vec<f64> = (0..=p).map(|j| self.coeffs[j + mu - p]).collect();
        for r in 1..=p {
            for j in (r..=p).rev() {
                let i = j + mu - p;
                let denom = self.knots[i + p - r + 1] - self.knots[i];
                let alpha = if denom == 0.0 { 0.0 } else { (x - self.knots[i]) / denom };
                d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j];
            }
        }
        d[p]
    }
}

/// The cutoff profile together with its first two derivative curves.
#[derive(Debug, Clone)]
pub struct CutoffSpline {
    segments: usize,
    degree: usize,
    value: SplineCurve,
    d1: SplineCurve,
    d2: SplineCurve,
}

impl CutoffSpline {
    /// Construct the profile with `segments` knot intervals and polynomial
    /// `degree`. Requires `segments > 2 (degree + 1)` so the plateau and the
    /// transition band are both genuinely present, and `degree >= 2` so the
    /// second-derivative curve exists.
    pub fn new(segments: usize, degree: usize) -> Result<Self> {
        if degree < 2 {
            return Err(Error::Precondition(format!(
                "cutoff spline degree must be >= 2, got {degree}"
            )));
        }
        if segments <= 2 * (degree + 1) {
            return Err(Error::Precondition(format!(
                "cutoff spline needs segments > 2*(degree+1); got segments = {segments}, degree = {degree}"
            )));
        }
        let k = degree;
        let big_k = segments;
        let mut knots = Vec::with_capacity(big_k + 2 * k + 1);
        knots.extend(std::iter::repeat(0.0).take(k));
        for i in 0..=big_k {
            knots.push(i as f64 / big_k as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(k));
        // K + k basis functions; the profile keeps the first K of them.
        let n_basis = big_k + k;
        let mut coeffs = vec![0.0; n_basis];
        for c in coeffs.iter_mut().take(big_k) {
            *c = 1.0;
        }
        let value = SplineCurve { degree: k, knots, coeffs, segments: big_k };
        let d1 = value.derivative();
        let d2 = d1.derivative();
        Ok(CutoffSpline { segments, degree, value, d1, d2 })
    }

    /// Number of knot intervals `K`.
    pub fn segments(&self) -> usize {
        self.segments
    }

    /// Polynomial degree `k`.
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Left edge of the transition band, `(K-k)/K`; the profile is exactly 1
    /// for arguments up to this point.
    pub fn plateau_end(&self) -> f64 {
        (self.segments - self.degree) as f64 / self.segments as f64
    }

    /// Profile value at `x >= 0`.
    pub fn value(&self, x: f64) -> f64 {
        if x >= 1.0 {
            return 0.0;
        }
        self.value.eval(x.max(0.0))
    }

    /// Value together with first and second derivative at `x >= 0`.
    pub fn value_d1_d2(&self, x: f64) -> (f64, f64, f64) {
        if x >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let x = x.max(0.0);
        (self.value.eval(x), self.d1.eval(x), self.d2.eval(x))
    }
}
