//! Discrete flows: explicit midpoint Runge–Kutta steps, their exact
//! Jacobians and log-determinants, and guarded inversion.
//!
//! One step of the scheme for a field `ξ` is
//!
//! ```text
//! Ψ_t^h(y) = y + h·ξ(y + (h/2)·ξ(y, t), t + h/2),
//! ```
//!
//! whose derivative in `y` is available in closed form,
//!
//! ```text
//! DΨ_t^h(y) = I + h·B·(I + (h/2)·A),
//!     A = Dξ(y, t),   B = Dξ(y + (h/2)ξ(y,t), t + h/2).
//! ```
//!
//! Composing `m` steps of size `h = 1/m` transports a point across `[0, 1]`
//! while the per-step `log|det DΨ|` values (computed by LU factorization, not
//! estimated) accumulate into the exact log-determinant of the composite map
//! — the discrete change-of-variables used by the density model.
//!
//! Everything downstream leans on one smallness condition, the *step-size
//! guard* `h·Λ < 1/2` for a Lipschitz bound `Λ` of the field. Under it the
//! perturbation `ψ_t^h = Ψ_t^h − id` is a contraction with factor
//! `hΛ(1 + hΛ/2) ≤ 5/8 < 1`, so each step is a bijection and
//! [`invert_step`] can recover preimages by fixed-point iteration — the
//! *exact* inverse of the discrete map (up to 1e−12), not a backward
//! integration, which would differ at order `h³` and wreck the discrete
//! change of variables.
//!
//! [`liouville_logdet_reference`] provides the continuous-time counterpart
//! `∫ div ξ dτ` along the trajectory at a finer step for convergence and
//! discretization-gap studies.

use crate::error::{Error, Result};
use crate::linalg::{Lu, Mat};
use crate::requ_net::{CutoffField, ReQUNetwork};
use crate::rng::{self, Stream};
use rand::Rng;
use std::io::Write;

/// A time-dependent vector field on `R^d` with an exact spatial Jacobian.
///
/// Implementations must be pure: two calls with the same arguments return
/// identical values, so trajectories from distinct starting points can be
/// computed concurrently against one shared field.
pub trait VectorField: Sync {
    fn spatial_dim(&self) -> usize;

    /// Field value `ξ(y, t)`. Panics on dimension mismatch; entry points
    /// validate dimensions before integrating.
    fn eval(&self, y: &[f64], t: f64) -> Vec<f64>;

    /// Exact Jacobian `D_y ξ(y, t)`.
    fn spatial_jacobian(&self, y: &[f64], t: f64) -> Mat;

    /// Divergence; the default is the trace of the exact Jacobian and should
    /// rarely be overridden (the log-determinant identities assume it).
    fn divergence(&self, y: &[f64], t: f64) -> f64 {
        self.spatial_jacobian(y, t).trace()
    }
}

impl VectorField for ReQUNetwork {
    fn spatial_dim(&self) -> usize {
        ReQUNetwork::spatial_dim(self)
    }

    fn eval(&self, y: &[f64], t: f64) -> Vec<f64> {
        self.forward(y, t).expect("dimension checked by the flow entry point")
    }

    fn spatial_jacobian(&self, y: &[f64], t: f64) -> Mat {
        ReQUNetwork::spatial_jacobian(self, y, t).expect("dimension checked by the flow entry point")
    }
}

impl VectorField for CutoffField {
    fn spatial_dim(&self) -> usize {
        CutoffField::spatial_dim(self)
    }

    fn eval(&self, y: &[f64], t: f64) -> Vec<f64> {
        self.forward(y, t).expect("dimension checked by the flow entry point")
    }

    fn spatial_jacobian(&self, y: &[f64], t: f64) -> Mat {
        CutoffField::spatial_jacobian(self, y, t).expect("dimension checked by the flow entry point")
    }
}

/// How the guard constant Λ was obtained.
///
/// The formula constant from the capacity ledger is sound but astronomically
/// conservative; the empirical estimate (a sampled supremum of Jacobian
/// spectral norms) is the practical default for training. Artifacts record
/// which one certified a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardMode {
    Formula,
    Empirical,
}

impl GuardMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuardMode::Formula => "formula",
            GuardMode::Empirical => "empirical",
        }
    }
}

/// Step count, step size, and the guard data certifying invertibility.
#[derive(Debug, Clone)]
pub struct FlowSchedule {
    m: usize,
    guard_lambda: f64,
    guard_mode: GuardMode,
}

impl FlowSchedule {
    /// `m` steps of size `1/m`, guarded by the Lipschitz constant
    /// `guard_lambda` (must satisfy the step-size guard before any
    /// trajectory is integrated or inverted).
    pub fn new(m: usize, guard_lambda: f64, guard_mode: GuardMode) -> Result<Self> {
        if m == 0 {
            return Err(Error::Precondition("step count m must be positive".into()));
        }
        if !(guard_lambda > 0.0) || !guard_lambda.is_finite() {
            return Err(Error::Precondition(format!(
                "guard constant must be positive and finite, got {guard_lambda}"
            )));
        }
        Ok(FlowSchedule { m, guard_lambda, guard_mode })
    }

    pub fn steps(&self) -> usize {
        self.m
    }

    /// Step size `h = 1/m`.
    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn guard_lambda(&self) -> f64 {
        self.guard_lambda
    }

    pub fn guard_mode(&self) -> GuardMode {
        self.guard_mode
    }

    /// Whether `h·Λ < 1/2` holds for this schedule.
    pub fn guard_ok(&self) -> bool {
        guard_step_size(self.h(), self.guard_lambda)
    }

    fn require_guard(&self) -> Result<()> {
        if self.guard_ok() {
            Ok(())
        } else {
            Err(Error::GuardViolation {
                h: self.h(),
                lambda: self.guard_lambda,
                product: self.h() * self.guard_lambda,
            })
        }
    }

    /// Same step count with a re-estimated guard constant.
    pub fn with_guard(&self, guard_lambda: f64, guard_mode: GuardMode) -> Result<Self> {
        Self::new(self.m, guard_lambda, guard_mode)
    }

    /// Doubled step count (used when training re-checks find the guard
    /// violated at the current resolution).
    pub fn doubled(&self) -> Result<Self> {
        Self::new(self.m * 2, self.guard_lambda, self.guard_mode)
    }
}

/// The step-size guard `h·Λ < 1/2`.
///
/// ```
/// use liouville_flow::flow::guard_step_size;
/// let lambda = 8.0 * 5.0_f64.sqrt(); // ≈ 17.889
/// assert!(guard_step_size(0.02, lambda));
/// assert!(!guard_step_size(0.05, lambda));
/// ```
pub fn guard_step_size(h: f64, guard_lambda: f64) -> bool {
    h * guard_lambda < 0.5
}

/// One explicit-midpoint step `y + h·ξ(y + (h/2)ξ(y,t), t + h/2)`.
pub fn rk2_step<F: VectorField + ?Sized>(field: &F, t: f64, h: f64, y: &[f64]) -> Vec<f64> {
    let xi0 = field.eval(y, t);
    let mid: Vec<f64> = y.iter().zip(&xi0).map(|(yi, k)| yi + 0.5 * h * k).collect();
    let xi1 = field.eval(&mid, t + 0.5 * h);
    y.iter().zip(&xi1).map(|(yi, k)| yi + h * k).collect()
}

/// Exact derivative of [`rk2_step`] with respect to `y`:
/// `I + h·Dξ(mid)·(I + (h/2)·Dξ(y))`.
pub fn step_jacobian<F: VectorField + ?Sized>(field: &F, t: f64, h: f64, y: &[f64]) -> Mat {
    let d = y.len();
    let xi0 = field.eval(y, t);
    let a = field.spatial_jacobian(y, t);
    let mid: Vec<f64> = y.iter().zip(&xi0).map(|(yi, k)| yi + 0.5 * h * k).collect();
    let b = field.spatial_jacobian(&mid, t + 0.5 * h);
    let p = Mat::identity(d).add_scaled(&a, 0.5 * h);
    Mat::identity(d).add_scaled(&b.matmul(&p), h)
}

/// A completed trajectory: states, times, and the exact per-step
/// log-determinant ledger.
#[derive(Debug, Clone)]
pub struct TrajectoryTape {
    states: Vec<Vec<f64>>,
    times: Vec<f64>,
    logdet_increments: Vec<f64>,
    logdet: f64,
    jacobians: Option<Vec<Mat>>,
}

impl TrajectoryTape {
    /// States `y_0..y_m`.
    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn endpoint(&self) -> &[f64] {
        self.states.last().expect("tape holds at least the initial state")
    }

    /// `log|det DΨ_k|` for each step `k = 0..m`.
    pub fn logdet_increments(&self) -> &[f64] {
        &self.logdet_increments
    }

    /// Accumulated `Σ_k log|det DΨ_k|`, the log-determinant of the composite
    /// map at the initial point.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Per-step Jacobians if the trajectory was integrated with
    /// [`integrate_with_jacobians`].
    pub fn jacobians(&self) -> Option<&[Mat]> {
        self.jacobians.as_deref()
    }

    /// Dump the trajectory as CSV: one row per state, with the increment that
    /// produced it (zero for the initial row) and the running total. `meta`
    /// pairs become `# key=value` header comments after the schema line.
    pub fn write_csv<W: Write>(&self, mut out: W, meta: &[(&str, &str)]) -> Result<()> {
        let d = self.states[0].len();
        writeln!(out, "# schema=liouville-flow/trajectory.v1")?;
        for (k, v) in meta {
            writeln!(out, "# {k}={v}")?;
        }
        let names: Vec<String> = (1..=d).map(|i| format!("y_{i}")).collect();
        writeln!(out, "step,t,{},logdet_increment,logdet_cum", names.join(","))?;
        let mut cum = 0.0;
        for (k, y) in self.states.iter().enumerate() {
            let inc = if k == 0 { 0.0 } else { self.logdet_increments[k - 1] };
            cum += inc;
            let ys: Vec<String> = y.iter().map(|&v| format!("{v:.16e}")).collect();
            writeln!(
                out,
                "{k},{:.16e},{},{inc:.16e},{cum:.16e}",
                self.times[k],
                ys.join(",")
            )?;
        }
        Ok(())
    }
}

fn check_start<F: VectorField + ?Sized>(field: &F, y0: &[f64]) -> Result<()> {
    if y0.len() != field.spatial_dim() {
        return Err(Error::Precondition(format!(
            "initial point has dimension {}, field expects {}",
            y0.len(),
            field.spatial_dim()
        )));
    }
    if y0.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("initial point contains a non-finite entry".into()));
    }
    Ok(())
}

fn integrate_impl<F: VectorField + ?Sized>(
    field: &F,
    schedule: &FlowSchedule,
    y0: &[f64],
    keep_jacobians: bool,
) -> Result<TrajectoryTape> {
    schedule.require_guard()?;
    check_start(field, y0)?;
    let d = y0.len();
    let m = schedule.steps();
    let h = schedule.h();
    let mut states = Vec::with_capacity(m + 1);
    let mut times = Vec::with_capacity(m + 1);
    let mut increments = Vec::with_capacity(m);
    let mut jacobians = if keep_jacobians { Some(Vec::with_capacity(m)) } else { None };
    states.push(y0.to_vec());
    times.push(0.0);
    let mut y = y0.to_vec();
    let mut logdet = 0.0;
    for k in 0..m {
        let t = k as f64 / m as f64;
        // Shared evaluation of the step and its exact Jacobian.
        let xi0 = field.eval(&y, t);
        let a = field.spatial_jacobian(&y, t);
        let mid: Vec<f64> = y.iter().zip(&xi0).map(|(yi, v)| yi + 0.5 * h * v).collect();
        let xi1 = field.eval(&mid, t + 0.5 * h);
        let b = field.spatial_jacobian(&mid, t + 0.5 * h);
        let p = Mat::identity(d).add_scaled(&a, 0.5 * h);
        let j = Mat::identity(d).add_scaled(&b.matmul(&p), h);

        y = y.iter().zip(&xi1).map(|(yi, v)| yi + h * v).collect();
        if y.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("state became non-finite at step {k}")));
        }
        let lu = Lu::factor(&j)?;
        let inc = lu.log_abs_det();
        if !inc.is_finite() || lu.det_sign() == 0.0 {
            return Err(Error::NonFinite(format!(
                "step Jacobian singular or non-finite at step {k} (log|det| = {inc})"
            )));
        }
        logdet += inc;
        increments.push(inc);
        if let Some(js) = jacobians.as_mut() {
            js.push(j);
        }
        states.push(y.clone());
        times.push((k + 1) as f64 / m as f64);
    }
    Ok(TrajectoryTape { states, times, logdet_increments: increments, logdet, jacobians })
}

/// Integrate `m` guarded steps from `y0` across `[0, 1]`, accumulating exact
/// per-step log-determinants.
pub fn integrate<F: VectorField + ?Sized>(field: &F, schedule: &FlowSchedule, y0: &[f64]) -> Result<TrajectoryTape> {
    integrate_impl(field, schedule, y0, false)
}

/// As [`integrate`], additionally retaining every step Jacobian on the tape.
pub fn integrate_with_jacobians<F: VectorField + ?Sized>(
    field: &F,
    schedule: &FlowSchedule,
    y0: &[f64],
) -> Result<TrajectoryTape> {
    integrate_impl(field, schedule, y0, true)
}

/// Invert one step: find `x` with `rk2_step(field, t, h, x) = y_next`.
///
/// Runs the contraction `x ← y_next − ψ_t^h(x)` (with `ψ = Ψ − id`) from
/// `x_0 = y_next` until the update norm drops below 1e−12, at most 200
/// iterations. Under the step-size guard the contraction factor is at most
/// 5/8, so non-convergence signals a guard violation or a pathological field
/// and is reported as an error rather than truncated.
pub fn invert_step<F: VectorField + ?Sized>(field: &F, t: f64, h: f64, y_next: &[f64]) -> Result<Vec<f64>> {
    const TOL: f64 = 1e-12;
    const MAX_ITERS: usize = 200;
    let mut x = y_next.to_vec();
    let mut last_delta = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let stepped = rk2_step(field, t, h, &x);
        // x_new = y_next − ψ(x) = y_next − (Ψ(x) − x)
        let x_new: Vec<f64> = y_next
            .iter()
            .zip(stepped.iter().zip(&x))
            .map(|(yn, (s, xi))| yn - (s - xi))
            .collect();
        last_delta = x_new
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        x = x_new;
        if last_delta < TOL {
            return Ok(x);
        }
    }
    Err(Error::FixedPointDiverged { iterations: MAX_ITERS, last_delta, tolerance: TOL })
}

/// Invert the full composite map: walk the steps backward from `t = 1` to
/// `t = 0`, inverting each with [`invert_step`].
pub fn invert_flow<F: VectorField + ?Sized>(field: &F, schedule: &FlowSchedule, z: &[f64]) -> Result<Vec<f64>> {
    schedule.require_guard()?;
    check_start(field, z)?;
    let m = schedule.steps();
    let h = schedule.h();
    let mut x = z.to_vec();
    for k in (0..m).rev() {
        let t = k as f64 / m as f64;
        x = invert_step(field, t, h, &x)?;
    }
    Ok(x)
}

/// High-accuracy reference for the continuous log-determinant
/// `∫₀¹ div ξ(Φ_{0,τ}(y), τ) dτ`, integrating the augmented system
/// `(y', ℓ') = (ξ, div ξ)` with the same midpoint scheme at `fine_m` steps.
pub fn liouville_logdet_reference<F: VectorField + ?Sized>(field: &F, y0: &[f64], fine_m: usize) -> Result<f64> {
    if fine_m == 0 {
        return Err(Error::Precondition("fine_m must be at least 1".into()));
    }
    check_start(field, y0)?;
    let h = 1.0 / fine_m as f64;
    let mut y = y0.to_vec();
    let mut ell = 0.0;
    for k in 0..fine_m {
        let t = k as f64 / fine_m as f64;
        let k1 = field.eval(&y, t);
        let mid: Vec<f64> = y.iter().zip(&k1).map(|(yi, v)| yi + 0.5 * h * v).collect();
        let k2 = field.eval(&mid, t + 0.5 * h);
        let l2 = field.divergence(&mid, t + 0.5 * h);
        for (yi, v) in y.iter_mut().zip(&k2) {
            *yi += h * v;
        }
        ell += h * l2;
        if !ell.is_finite() || y.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("reference integration diverged at step {k}")));
        }
    }
    Ok(ell)
}

/// Seeded probe set on the ball × time cylinder for empirical Lipschitz
/// estimation: `count` pairs `(y, t)` with `‖y‖ < 1/2`, `t ∈ [0, 1)`.
pub fn lipschitz_probes(d: usize, count: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let mut rng = rng::substream(seed, Stream::Probes);
    (0..count)
        .map(|_| {
            let y = rng::uniform_in_ball(&mut rng, d);
            let t = rng.gen_range(0.0..1.0);
            (y, t)
        })
        .collect()
}

/// Empirical Lipschitz estimate: the supremum of spatial-Jacobian spectral
/// norms over the probe set. A lower bound on the true constant, which is
/// what makes it an honest (if optimistic) guard for training; the sound
/// alternative is the formula constant from the capacity ledger.
pub fn empirical_lipschitz<F: VectorField + ?Sized>(field: &F, probes: &[(Vec<f64>, f64)]) -> f64 {
    probes
        .iter()
        .map(|(y, t)| field.spatial_jacobian(y, *t).spectral_norm())
        .fold(0.0, f64::max)
}
