//! One-dimensional quadrature and polar integration grids.
//!
//! Three tools live here:
//!
//! * adaptive Simpson integration with an absolute-error target, used
//!   for radial flux integrals and normalization checks;
//! * Gauss–Legendre nodes/weights (computed by Newton iteration on the
//!   Legendre recurrence, accurate to machine precision for the modest node
//!   counts we use);
//! * polar product grids over the open ball of radius 1/2 in d ∈ {1, 2},
//!   the integration domain shared by the density-estimation and transport
//!   verification code. Radial nodes are Gauss–Legendre (weighted by the
//!   Jacobian r^{d-1}); the angular direction in d = 2 uses the uniform
//!   midpoint rule, which is spectrally accurate for periodic integrands.

use crate::error::{Error, Result};

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance
/// `tol`. Fails (rather than returning a bad value) if the recursion depth
/// cap is hit before the local error estimates drop below the budget.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Precondition("non-finite quadrature interval".into()));
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    // Standard Richardson criterion: the composite estimate is one order
    // better, so |delta|/15 estimates its error.
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::QuadratureFailed { a, b, tolerance: tol });
    }
    let lv = simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let rv = simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(lv + rv)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Chebyshev-based initial guess for the i-th root of P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P'_n(x) by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            dp = nf * (x * p - p0) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Volume of the radius-1/2 ball in `d` dimensions,
/// `π^{d/2} (1/2)^d / Γ(d/2 + 1)`, with the Gamma value built exactly from
/// the recurrence (seeded at `Γ(1) = 1` or `Γ(3/2) = √π/2`).
///
/// ```
/// use liouville_flow::quad::ball_volume;
/// assert!((ball_volume(1) - 1.0).abs() < 1e-15);
/// assert!((ball_volume(2) - std::f64::consts::PI / 4.0).abs() < 1e-15);
/// ```
pub fn ball_volume(d: usize) -> f64 {
    assert!(d >= 1, "dimension must be >= 1");
    let pi = std::f64::consts::PI;
    let (mut gamma, mut x) = if d % 2 == 0 { (1.0, 1.0) } else { (pi.sqrt() / 2.0, 1.5) };
    while x + 0.25 < d as f64 / 2.0 + 1.0 {
        gamma *= x;
        x += 1.0;
    }
    let pi_power = pi.powi((d / 2) as i32) * if d % 2 == 1 { pi.sqrt() } else { 1.0 };
    pi_power * 0.5_f64.powi(d as i32) / gamma
}

/// Surface area of the unit sphere `S^{d-1}`; radial integrals over the
/// ball reduce to `surface_area(d) · ∫ r^{d-1} f(r) dr`.
pub fn sphere_surface_area(d: usize) -> f64 {
    // σ_d = d · vol(unit ball) = d · 2^d · ball_volume(d).
    d as f64 * 2.0_f64.powi(d as i32) * ball_volume(d)
}

/// Quadrature grid over the open ball of radius 1/2.
///
/// `Σ w_i f(x_i) ≈ ∫_Ω f(x) dx` for smooth `f`.
#[derive(Debug, Clone)]
pub struct PolarGrid {
    /// Evaluation points inside the ball.
    pub points: Vec<Vec<f64>>,
    /// Matching quadrature weights (include the volume element).
    pub weights: Vec<f64>,
}

/// Build a polar grid with `resolution` nodes per axis for d ∈ {1, 2}.
///
/// d = 1 uses Gauss–Legendre on (-1/2, 1/2). d = 2 uses a Gauss–Legendre
/// radial rule against the weight r dr times a uniform midpoint rule in the
/// angle. Dimensions above 2 would need a sphere rule and are out of scope
/// for the desk-scale surface of this crate.
pub fn polar_grid(d: usize, resolution: usize) -> Result<PolarGrid> {
    if resolution == 0 {
        return Err(Error::Precondition("polar grid resolution must be >= 1".into()));
    }
    match d {
        1 => {
            let (xs, ws) = gauss_legendre(resolution);
            let points = xs.iter().map(|x| vec![0.25 * (x + 1.0) * 2.0 - 0.5]).collect();
            let weights = ws.iter().map(|w| 0.5 * w).collect();
            Ok(PolarGrid { points, weights })
        }
        2 => {
            let (xs, ws) = gauss_legendre(resolution);
            let mut points = Vec::with_capacity(resolution * resolution);
            let mut weights = Vec::with_capacity(resolution * resolution);
            let dphi = 2.0 * std::f64::consts::PI / resolution as f64;
            for (x, w) in xs.iter().zip(&ws) {
                // Map [-1,1] -> [0, 1/2]; Jacobian 1/4.
                let r = 0.25 * (x + 1.0);
                let wr = 0.25 * w * r; // radial weight times the r dr element
                for j in 0..resolution {
                    let phi = dphi * (j as f64 + 0.5);
                    points.push(vec![r * phi.cos(), r * phi.sin()]);
                    weights.push(wr * dphi);
                }
            }
            Ok(PolarGrid { points, weights })
        }
        other => Err(Error::Precondition(format!(
            "polar grids are implemented for d in {{1, 2}}, got d = {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_polynomials_exactly() {
        // Simpson is exact on cubics; the adaptive wrapper must agree.
        let f = |x: f64| 3.0 * x * x * x - x + 2.0;
        let got = adaptive_simpson(&f, -1.0, 2.0, 1e-13).unwrap();
        let exact = 3.0 / 4.0 * (16.0 - 1.0) - 0.5 * (4.0 - 1.0) + 2.0 * 3.0;
        assert!((got - exact).abs() < 1e-12, "got {got}, want {exact}");
    }

    #[test]
    fn simpson_reaches_tight_tolerance_on_oscillatory_integrand() {
        let f = |x: f64| (10.0 * x).sin().exp();
        let got = adaptive_simpson(&f, 0.0, 1.0, 1e-12).unwrap();
        // Reference computed with a very fine composite rule.
        let mut acc = 0.0;
        let n = 200_000;
        for i in 0..n {
            let a = i as f64 / n as f64;
            let b = (i + 1) as f64 / n as f64;
            let m = 0.5 * (a + b);
            acc += (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b));
        }
        assert!((got - acc).abs() < 1e-10, "got {got}, ref {acc}");
    }

    #[test]
    fn gauss_legendre_is_exact_to_degree_2n_minus_1() {
        let (xs, ws) = gauss_legendre(5);
        // ∫_{-1}^{1} x^8 dx = 2/9, degree 8 <= 2*5-1.
        let got: f64 = xs.iter().zip(&ws).map(|(x, w)| w * x.powi(8)).sum();
        assert!((got - 2.0 / 9.0).abs() < 1e-14);
        let wsum: f64 = ws.iter().sum();
        assert!((wsum - 2.0).abs() < 1e-14);
    }

    #[test]
    fn polar_grid_measures_the_ball() {
        for (d, vol) in [(1usize, 1.0), (2usize, std::f64::consts::PI / 4.0)] {
            let grid = polar_grid(d, 64).unwrap();
            let total: f64 = grid.weights.iter().sum();
            assert!((total - vol).abs() < 1e-12, "d={d}: total {total} vs {vol}");
        }
    }

    #[test]
    fn ball_volume_matches_the_low_dimensional_closed_forms() {
        let pi = std::f64::consts::PI;
        for (d, vol) in [(1usize, 1.0), (2, pi / 4.0), (3, pi / 6.0), (4, pi * pi / 32.0)] {
            assert!((ball_volume(d) - vol).abs() < 1e-14, "ball volume wrong at d={d}");
        }
        for (d, area) in [(1usize, 2.0), (2, 2.0 * pi), (3, 4.0 * pi)] {
            assert!(
                (sphere_surface_area(d) - area).abs() < 1e-13,
                "sphere area wrong at d={d}"
            );
        }
    }

    #[test]
    fn polar_grid_integrates_a_smooth_radial_profile() {
        // ∫_disc (1 - 4 r^2) dx = 2π ∫_0^{1/2} (1-4r^2) r dr = 2π (1/8 - 1/16) = π/8.
        let grid = polar_grid(2, 48).unwrap();
        let got: f64 = grid
            .points
            .iter()
            .zip(&grid.weights)
            .map(|(p, w)| {
                let r2 = p[0] * p[0] + p[1] * p[1];
                w * (1.0 - 4.0 * r2)
            })
            .sum();
        assert!((got - std::f64::consts::PI / 8.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_unsupported_dimension() {
        assert!(polar_grid(3, 8).is_err());
    }
}
