//! Worst-case capacity constants, generalization bounds, and PAC sample-size
//! arithmetic — every quantity carried in the natural-log domain.
//!
//! The flow class is parametrized by a ReQU network with `L` affine layers of
//! width at most `W`, weights and biases clamped to `[-1, 1]`, inputs ranging
//! over the cylinder `Ω_d × [0, 1]` whose points have norm at most
//! `R_0 = √5/2`. Chaining the layer-wise estimates gives a ledger of
//! worst-case Lipschitz constants:
//!
//! * layer output radii `R_ℓ = (2W)² R_{ℓ-1}²`, in closed form
//!   `R_ℓ = (2W)^{2^{ℓ+1}-2} R_0^{2^ℓ}`;
//! * parameter sensitivity `Λ̃^Θ = 4L (2W)^{2L-1} R_{L-1}^{L+1}` of
//!   `θ ↦ η_θ(z)` uniformly over inputs;
//! * input sensitivity `Λ̃^Ω = (2W)^{2L} ∏_ℓ R_{ℓ-1}` of `z ↦ η_θ(z)`;
//! * the Jacobian bound `Λ = ((2W)² R_{L-1})^L` with `‖Dη_θ‖₂ ≤ Λ`
//!   everywhere, plus the matching constants for `θ ↦ Dη_θ` and
//!   `z ↦ Dη_θ(z)`;
//! * single-step and composed-flow constants for the explicit midpoint rule,
//!   `Λ_Ψ^Ω(h) = 1 + hΛ̃^Ω + (h²/2)(Λ̃^Ω)²` and
//!   `Λ_Ψ^Θ(h) = Λ̃^Θ (1 + (h/2)Λ̃^Ω)`, and the full-trajectory parameter
//!   constant `Λ_RK^Θ = Λ_Ψ^Θ · e^{Λ̃^Ω}`;
//! * the sub-Gaussian increment constant `Λ_Z = (8dΛ⁵e^Λ)^d` of the centered
//!   empirical process, and the per-sample oscillation bound `D = (4dΛ²)^d`
//!   feeding the McDiarmid tail.
//!
//! These constants are doubly exponential in depth; `Λ_Z` overflows an `f64`
//! already for `Λ ≳ 700`. Every ledger entry is therefore **stored as a
//! natural log**: products become sums and powers become scalar multiples.
//! Two entries genuinely need the *value* of an inner constant (`Λ_RK^Θ`
//! adds `Λ̃^Ω` to a log, `Λ_Z` adds `Λ`); when that inner constant exceeds
//! `ln(f64::MAX) ≈ 709.78` in log form even the log of the outer constant is
//! unrepresentable and the ledger reports `+∞` rather than a fabricated
//! finite number. All purely multiplicative entries stay finite for every
//! architecture up to `L, W = 64` and far beyond.
//!
//! Alongside the closed-form ledger the module evaluates
//!
//! * the spline resolution `K(W) = ⌊(W/(48(d+1)))^{1/(d+1)}/3⌋` a width-`W`
//!   network can afford (exact integer arithmetic, no float rounding),
//! * the discretization gap `(1/h)((2h³C+1)^d - 1)` between the exact flow
//!   log-determinant and its midpoint-rule ledger, with the rate constant
//!   `C(θ, d)` assembled from curvature constants `Γ_1, Γ_2`,
//! * sampled lower-bound estimates of `Γ_1, Γ_2` (nested finite differences
//!   along integrated trajectories — the true suprema are not computable),
//! * expected-generalization and concentration tails, the approximation
//!   constant of the smoothness class, the model-error bound
//!   `C_ξ/K^{k-1} + Ĉ_ξ h²`,
//! * the sample schedule `(h_n, W_n, K_n, L_n)` and the PAC sample size
//!   `n(ε, δ)`, both reported with feasibility flags instead of silent
//!   adjustment when the displayed formulas produce an unusable regime.
//!
//! Everything is pure arithmetic on the inputs; nothing here mutates shared
//! state, so all of it is trivially thread-safe.

use crate::artifact::fmt_f64;
use crate::error::{Error, Result};
use crate::flow::{rk2_step, step_jacobian, VectorField};
use crate::linalg::Mat;
use std::f64::consts::LN_2;

/// Natural log of `f64::MAX`; a log-domain value above this cannot be
/// exponentiated without overflow.
const LOG_F64_MAX: f64 = 709.782712893384;

/// `log(e^a + e^b)` without leaving the log domain. Tolerates `-∞` (an exact
/// zero term) and propagates `+∞` (an overflowed term) honestly.
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi.is_infinite() {
        return hi; // +∞ dominates; two -∞ terms stay -∞
    }
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sum(terms: &[f64]) -> f64 {
    terms.iter().copied().fold(f64::NEG_INFINITY, log_add)
}

/// Largest input norm over the evaluation cylinder: `‖(y, t)‖₂ ≤ √(1/4 + 1)`
/// for `‖y‖ ≤ 1/2`, `t ∈ [0, 1]`. This is the default `R_0` seeding the
/// radius recursion.
pub fn default_input_radius() -> f64 {
    5.0_f64.sqrt() / 2.0
}

/// The complete log-domain constant ledger for one architecture.
///
/// Field names follow the roles of the constants rather than their symbols;
/// the correspondence is spelled out in the module docs. The optional
/// sections carry the quantities that need extra inputs beyond
/// `(d, L, W, h, R_0)` and are attached with the `with_*` builders.
#[derive(Debug, Clone)]
pub struct BoundLedger {
    pub spatial_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub step_size: f64,
    /// Nominal unit-time step count `round(1/h)`.
    pub steps: u64,
    pub r0: f64,
    /// `log R_0 .. log R_{L-1}`, the layer output radii.
    pub log_radii: Vec<f64>,
    /// `Λ̃^Θ`: Lipschitz constant of `θ ↦ η_θ(z)` uniformly over inputs.
    pub log_param_lip: f64,
    /// `Λ̃^Ω`: Lipschitz constant of `z ↦ η_θ(z)` uniformly over parameters.
    pub log_space_lip: f64,
    /// `Λ`: spectral-norm bound on `Dη_θ` (the guard constant).
    pub log_jacobian_bound: f64,
    /// `Λ̃_D^Θ`: Lipschitz constant of `θ ↦ Dη_θ(z)`.
    pub log_jacobian_param_lip: f64,
    /// `Λ̃_D^Ω`: Lipschitz constant of `z ↦ Dη_θ(z)`.
    pub log_jacobian_space_lip: f64,
    /// `Λ_Ψ^Ω(h)`: input Lipschitz constant of one midpoint step.
    pub log_step_space_lip: f64,
    /// `Λ_Ψ^Θ(h)`: parameter Lipschitz constant of one midpoint step.
    pub log_step_param_lip: f64,
    /// `Λ_RK^Θ`: parameter Lipschitz constant of the composed unit-time
    /// flow; `+∞` when `Λ̃^Ω` itself is too large to exponentiate.
    pub log_flow_param_lip: f64,
    /// `Λ_Z`: sub-Gaussian increment constant of the empirical process;
    /// `+∞` when `Λ` is too large to exponentiate.
    pub log_subgaussian: f64,
    /// `D`: per-sample oscillation bound in the concentration inequality.
    pub log_oscillation: f64,
    pub smoothness: Option<SmoothnessSection>,
    pub empirical: Option<EmpiricalSection>,
    pub generalization: Option<GeneralizationSection>,
}

/// Model-error inputs: smoothness order `k`, cutoff resolution `K`, and the
/// two approximation constants, with the resulting bound.
#[derive(Debug, Clone, Copy)]
pub struct SmoothnessSection {
    pub k: usize,
    pub segments: u64,
    pub log_c_xi: f64,
    pub log_c_hat_xi: f64,
    /// `log(C_ξ/K^{k-1} + Ĉ_ξ h²)`.
    pub log_model_error: f64,
}

/// Sampled curvature estimates and the log-determinant discretization gap
/// they imply. The `Γ` entries are lower bounds (sampled suprema), and every
/// artifact that includes them says so.
#[derive(Debug, Clone, Copy)]
pub struct EmpiricalSection {
    pub gamma_1: f64,
    pub gamma_2: f64,
    pub norm_c1: f64,
    pub norm_c2: f64,
    /// `log C(θ, d)` assembled from the four estimates above.
    pub log_rate_constant: f64,
    /// `log` of the per-trajectory log-determinant gap bound.
    pub log_logdet_gap: f64,
}

/// Sample-dependent generalization quantities.
#[derive(Debug, Clone, Copy)]
pub struct GeneralizationSection {
    pub n: u64,
    /// Convergence-rate split used by the PAC schedule, recorded for
    /// provenance.
    pub p: f64,
    /// `log(48LW² Λ_Z / √n)`.
    pub log_expected_gen: f64,
    pub epsilon: Option<f64>,
    /// Log of the concentration tail probability at `epsilon`.
    pub log_tail: Option<f64>,
}

/// Evaluates the full capacity ledger for one architecture.
///
/// All outputs are natural logs; see the module docs for the formulas and
/// the two entries that can honestly overflow to `+∞`.
///
/// ```
/// use liouville_flow::bounds::{capacity_ledger, default_input_radius};
/// let ledger = capacity_ledger(1, 1, 2, 0.02, default_input_radius()).unwrap();
/// // One layer of width two: Λ = (2·2)² · R_0 = 8√5.
/// let expected = (8.0 * 5.0_f64.sqrt()).ln();
/// assert!((ledger.log_jacobian_bound - expected).abs() < 1e-12);
/// assert!(ledger.guard_satisfied());
/// ```
pub fn capacity_ledger(
    spatial_dim: usize,
    depth: usize,
    width: usize,
    step_size: f64,
    r0: f64,
) -> Result<BoundLedger> {
    if spatial_dim == 0 || depth == 0 || width == 0 {
        return Err(Error::Precondition(format!(
            "capacity ledger needs d, L, W ≥ 1, got d={spatial_dim}, L={depth}, W={width}"
        )));
    }
    if !(r0 >= 1.0) || !r0.is_finite() {
        return Err(Error::Precondition(format!(
            "input radius R_0 must be finite and ≥ 1, got {r0}"
        )));
    }
    if !(step_size > 0.0) || !step_size.is_finite() {
        return Err(Error::Precondition(format!(
            "step size must be positive and finite, got {step_size}"
        )));
    }

    let l = depth as f64;
    let w = width as f64;
    let log_2w = (2.0 * w).ln();
    let log_h = step_size.ln();

    // R_ℓ = (2W)² R_{ℓ-1}², seeded with R_0.
    let mut log_radii = Vec::with_capacity(depth);
    log_radii.push(r0.ln());
    for ell in 1..depth {
        let prev = log_radii[ell - 1];
        log_radii.push(2.0 * log_2w + 2.0 * prev);
    }
    let log_r_last = *log_radii.last().expect("depth ≥ 1");
    let log_radii_sum: f64 = log_radii.iter().sum();

    let log_param_lip = 4.0_f64.ln() + l.ln() + (2.0 * l - 1.0) * log_2w + (l + 1.0) * log_r_last;
    let log_space_lip = 2.0 * l * log_2w + log_radii_sum;
    let log_jacobian_bound = l * (2.0 * log_2w + log_r_last);

    // Shared prefix L·[(2W)² R_{L-1}]^{L-1} of the two Jacobian constants.
    let log_prefix = l.ln() + (l - 1.0) * (2.0 * log_2w + log_r_last);
    let log_inner = log_sum(&[
        8.0_f64.ln() + 2.0 * w.ln() + log_r_last,
        LN_2 + 2.0 * w.ln() + log_param_lip,
        LN_2 + w.ln() + log_add(log_r_last, 0.0),
    ]);
    let log_jacobian_param_lip = log_prefix + log_inner;
    let log_jacobian_space_lip = log_prefix + 2.0 * w.ln() + log_jacobian_bound;

    let log_step_space_lip = log_sum(&[
        0.0,
        log_h + log_space_lip,
        2.0 * (log_h + log_space_lip) - LN_2,
    ]);
    let log_step_param_lip = log_param_lip + log_add(0.0, log_h - LN_2 + log_space_lip);
    // The e^{Λ̃^Ω} factor needs the value of Λ̃^Ω; above LOG_F64_MAX the log
    // itself is unrepresentable and +∞ is the honest report.
    let log_flow_param_lip = log_step_param_lip + log_space_lip.exp();

    let log_subgaussian = subgaussian_constant(spatial_dim, log_jacobian_bound);
    let d = spatial_dim as f64;
    let log_oscillation = d * ((4.0 * d).ln() + 2.0 * log_jacobian_bound);

    Ok(BoundLedger {
        spatial_dim,
        depth,
        width,
        step_size,
        steps: (1.0 / step_size).round().max(1.0) as u64,
        r0,
        log_radii,
        log_param_lip,
        log_space_lip,
        log_jacobian_bound,
        log_jacobian_param_lip,
        log_jacobian_space_lip,
        log_step_space_lip,
        log_step_param_lip,
        log_flow_param_lip,
        log_subgaussian,
        log_oscillation,
        smoothness: None,
        empirical: None,
        generalization: None,
    })
}

impl BoundLedger {
    /// Whether `h·Λ < 1/2` holds for the ledger's formula constant
    /// (log-domain comparison, safe for any magnitude).
    pub fn guard_satisfied(&self) -> bool {
        self.step_size.ln() + self.log_jacobian_bound < 0.5_f64.ln()
    }

    /// Attaches smoothness inputs and the model-error bound they imply.
    pub fn with_smoothness(mut self, k: usize, segments: u64, log_c_xi: f64, log_c_hat_xi: f64) -> Self {
        let log_model_error = model_error_bound(log_c_xi, log_c_hat_xi, segments.max(1), self.step_size, k);
        self.smoothness = Some(SmoothnessSection { k, segments, log_c_xi, log_c_hat_xi, log_model_error });
        self
    }

    /// Attaches sampled curvature estimates and the discretization gap they
    /// imply through the rate constant `C(θ, d)`.
    pub fn with_empirical(mut self, gamma: &GammaEstimate, norm_c1: f64, norm_c2: f64) -> Self {
        let log_rate_constant = logdet_rate_constant(
            self.spatial_dim,
            self.step_size,
            gamma.gamma_1,
            gamma.gamma_2,
            norm_c1,
            norm_c2,
        );
        let log_logdet_gap = logdet_discretization_bound(log_rate_constant, self.step_size, self.spatial_dim);
        self.empirical = Some(EmpiricalSection {
            gamma_1: gamma.gamma_1,
            gamma_2: gamma.gamma_2,
            norm_c1,
            norm_c2,
            log_rate_constant,
            log_logdet_gap,
        });
        self
    }

    /// Attaches the sample-dependent generalization quantities.
    pub fn with_generalization(mut self, n: u64, p: f64, epsilon: Option<f64>) -> Self {
        let log_expected_gen = expected_gen_bound(self.depth, self.width, self.log_subgaussian, n.max(1));
        let log_tail = epsilon.map(|eps| mcdiarmid_tail(eps, n.max(1), self.spatial_dim, self.log_jacobian_bound));
        self.generalization = Some(GeneralizationSection { n, p, log_expected_gen, epsilon, log_tail });
        self
    }

    /// Serializes the ledger as a JSON object. Each constant carries its log
    /// value and a decimal-string rendering `"exp(<log>)"`; entries whose log
    /// overflowed carry `"log": null, "approx": "overflow"` (and an exact
    /// zero would carry `"approx": "0"`).
    pub fn to_json(&self) -> String {
        let mut out = String::with_capacity(2048);
        out.push_str("{\n  \"schema\": \"liouville-flow/bound-ledger.v1\",\n");
        out.push_str(&format!(
            "  \"inputs\": {{\"spatial_dim\": {}, \"depth\": {}, \"width\": {}, \"step_size\": {}, \"steps\": {}, \"r0\": {}}},\n",
            self.spatial_dim,
            self.depth,
            self.width,
            fmt_f64(self.step_size),
            self.steps,
            fmt_f64(self.r0)
        ));
        out.push_str(&format!(
            "  \"guard\": {{\"satisfied\": {}}},\n",
            self.guard_satisfied()
        ));
        out.push_str("  \"constants\": {\n");
        out.push_str("    \"radii\": [");
        for (i, lr) in self.log_radii.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(&log_value_json(*lr));
        }
        out.push_str("],\n");
        let entries: [(&str, f64); 10] = [
            ("jacobian_bound", self.log_jacobian_bound),
            ("param_lip", self.log_param_lip),
            ("space_lip", self.log_space_lip),
            ("jacobian_param_lip", self.log_jacobian_param_lip),
            ("jacobian_space_lip", self.log_jacobian_space_lip),
            ("step_space_lip", self.log_step_space_lip),
            ("step_param_lip", self.log_step_param_lip),
            ("flow_param_lip", self.log_flow_param_lip),
            ("subgaussian", self.log_subgaussian),
            ("oscillation", self.log_oscillation),
        ];
        for (i, (name, log)) in entries.iter().enumerate() {
            out.push_str(&format!("    \"{}\": {}", name, log_value_json(*log)));
            out.push_str(if i + 1 < entries.len() { ",\n" } else { "\n" });
        }
        out.push_str("  }");
        if let Some(s) = &self.smoothness {
            out.push_str(&format!(
                ",\n  \"smoothness\": {{\"k\": {}, \"segments\": {}, \"c_xi\": {}, \"c_hat_xi\": {}, \"model_error\": {}}}",
                s.k,
                s.segments,
                log_value_json(s.log_c_xi),
                log_value_json(s.log_c_hat_xi),
                log_value_json(s.log_model_error)
            ));
        }
        if let Some(e) = &self.empirical {
            out.push_str(&format!(
                ",\n  \"empirical\": {{\"kind\": \"sampled_lower_bound\", \"gamma_1\": {}, \"gamma_2\": {}, \"norm_c1\": {}, \"norm_c2\": {}, \"rate_constant\": {}, \"logdet_gap\": {}}}",
                fmt_f64(e.gamma_1),
                fmt_f64(e.gamma_2),
                fmt_f64(e.norm_c1),
                fmt_f64(e.norm_c2),
                log_value_json(e.log_rate_constant),
                log_value_json(e.log_logdet_gap)
            ));
        }
        if let Some(g) = &self.generalization {
            out.push_str(&format!(
                ",\n  \"generalization\": {{\"n\": {}, \"p\": {}, \"expected_gen\": {}",
                g.n,
                fmt_f64(g.p),
                log_value_json(g.log_expected_gen)
            ));
            if let (Some(eps), Some(tail)) = (g.epsilon, g.log_tail) {
                out.push_str(&format!(
                    ", \"epsilon\": {}, \"log_tail\": {}",
                    fmt_f64(eps),
                    // The tail log is a log-probability (≤ 0), not the log of
                    // a ledger constant, so it is printed as a plain number.
                    fmt_f64(tail)
                ));
            }
            out.push_str("}");
        }
        out.push_str("\n}\n");
        out
    }
}

/// Renders one log-domain constant as `{"log": <num>, "approx": "exp(...)"}`,
/// degrading to `"overflow"` / `"0"` when the log itself left `f64` range.
fn log_value_json(log: f64) -> String {
    if log == f64::INFINITY {
        "{\"log\": null, \"approx\": \"overflow\"}".to_string()
    } else if log == f64::NEG_INFINITY {
        "{\"log\": null, \"approx\": \"0\"}".to_string()
    } else {
        format!("{{\"log\": {}, \"approx\": \"exp({:.6})\"}}", fmt_f64(log), log)
    }
}

/// The spline resolution affordable at width `W`:
/// `K(W) = ⌊(W/(48(d+1)))^{1/(d+1)} / 3⌋`.
///
/// Evaluated in exact integer arithmetic — `K` is the largest integer with
/// `48(d+1)·(3K)^{d+1} ≤ W` — so boundary cases never fall prey to float
/// rounding. Returns 0 when the width cannot pay for a single segment;
/// callers building an approximation must separately require `K > 2(k+1)`.
///
/// ```
/// use liouville_flow::bounds::k_of_w;
/// assert_eq!(k_of_w(96, 1), 0);
/// assert_eq!(k_of_w(96 * 729, 1), 9);
/// ```
pub fn k_of_w(width: u64, spatial_dim: usize) -> u64 {
    let d1 = spatial_dim as u32 + 1;
    let fits = |k: u64| -> bool {
        // 48(d+1)·(3k)^{d+1} ≤ W, with overflow meaning "too big".
        let base = match (3u128).checked_mul(k as u128) {
            Some(b) => b,
            None => return false,
        };
        match base.checked_pow(d1).and_then(|p| p.checked_mul(48 * d1 as u128)) {
            Some(v) => v <= width as u128,
            None => false,
        }
    };
    let mut lo = 0u64; // fits(0) always holds
    let mut hi = width / 3 + 1; // 48(d+1)(3k)^{d+1} > 3k > W for k = hi
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Log of the gap between the exact flow log-determinant and the discrete
/// per-step ledger: `(1/h)·((2h³C + 1)^d − 1)` with `log C` supplied.
///
/// Evaluated as `expm1(d·log1p(2h³C))` in branches that stay accurate from
/// `C = 0` (returns `-∞`) through values too large to exponentiate.
pub fn logdet_discretization_bound(log_c: f64, h: f64, d: usize) -> f64 {
    assert!(h > 0.0 && h < 1.0, "step size must lie in (0,1), got {h}");
    assert!(d >= 1, "dimension must be ≥ 1");
    let t = LN_2 + 3.0 * h.ln() + log_c; // log(2h³C)
    let u = if t <= LOG_F64_MAX {
        d as f64 * t.exp().ln_1p() // d·log(1 + 2h³C)
    } else {
        d as f64 * t // log1p is the identity to within e^{-t} here
    };
    // log(e^u − 1): expm1 is the accurate form near u = 0, the shifted
    // log1p(-e^{-u}) form is exact for large u.
    let log_expm1 = if u <= 1.0 { u.exp_m1().ln() } else { u + (-(-u).exp()).ln_1p() };
    log_expm1 - h.ln()
}

/// Log of the discretization rate constant `C(θ, d)`:
///
/// ```text
/// C = Γ_2/24 + (d/8)·Γ_1·‖η‖_{C¹}
///   + ‖η‖_{C²}·(d·C_θ/4)·(1 + (hd/2)‖η‖_{C¹})
///   + ((1 + (h/2)d‖η‖_{C¹})² + (h/2)d‖η‖_{C¹})·C_θ·(e^{‖η‖_{C²}} − 1)
/// ```
///
/// with `C_θ = 2‖η‖_{C²}` from the order-2 one-step error bound. The inputs
/// are empirical norms of one concrete network, so plain `f64` arithmetic is
/// exact enough; only the result is returned as a log.
pub fn logdet_rate_constant(
    spatial_dim: usize,
    h: f64,
    gamma_1: f64,
    gamma_2: f64,
    norm_c1: f64,
    norm_c2: f64,
) -> f64 {
    let d = spatial_dim as f64;
    let c_theta = 2.0 * norm_c2;
    let term_curvature = gamma_2 / 24.0;
    let term_mixed = d / 8.0 * gamma_1 * norm_c1;
    let term_drift = norm_c2 * (d * c_theta / 4.0) * (1.0 + 0.5 * h * d * norm_c1);
    let amplification = (1.0 + 0.5 * h * d * norm_c1).powi(2) + 0.5 * h * d * norm_c1;
    let term_accumulated = amplification * c_theta * norm_c2.exp_m1();
    (term_curvature + term_mixed + term_drift + term_accumulated).ln()
}

/// Log of the approximation constant `c(d, k, ξ)` of the smoothness class:
/// `(1 + 9^{(d+1)(k-2)}(2k-1)^{2d+5}) · (√2·e·(d+1))^k · 2‖ξ‖_{C^k}`,
/// taking `log ‖ξ‖_{C^k}` so enormous norms cost nothing.
pub fn approximation_constant(spatial_dim: usize, k: usize, log_field_norm: f64) -> f64 {
    assert!(k >= 2, "smoothness order k must be ≥ 2, got {k}");
    let d = spatial_dim as f64;
    let kf = k as f64;
    let log_power_term =
        (d + 1.0) * (kf - 2.0) * 9.0_f64.ln() + (2.0 * d + 5.0) * (2.0 * kf - 1.0).ln();
    log_add(0.0, log_power_term) + kf * (0.5 * LN_2 + 1.0 + (d + 1.0).ln()) + LN_2 + log_field_norm
}

/// Sampled lower-bound estimates of the curvature constants `Γ_1, Γ_2`: the
/// suprema over trajectories of the first and second time derivatives of the
/// matrix path `g(τ) = Dη(Φ_{0,τ}(x), τ) · DΦ_{0,τ}(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaEstimate {
    pub gamma_1: f64,
    pub gamma_2: f64,
    pub probes: usize,
    pub steps: usize,
}

/// Estimates `Γ_1, Γ_2` by integrating a midpoint trajectory from each probe
/// point, accumulating the flow Jacobian as a product of step Jacobians, and
/// applying central finite differences in time to every entry of `g(τ)`.
///
/// Restart times other than 0 are not sampled and the differences are taken
/// on the step grid, so the result is a *lower bound* on the true suprema —
/// the only honest direction for a sampled estimate. It grows monotonically
/// as probes are added.
pub fn empirical_gamma<F: VectorField + ?Sized>(
    field: &F,
    probes: &[Vec<f64>],
    steps: usize,
) -> GammaEstimate {
    assert!(steps >= 2, "central differences need at least 2 steps, got {steps}");
    let d = field.spatial_dim();
    let h = 1.0 / steps as f64;
    let mut gamma_1 = 0.0_f64;
    let mut gamma_2 = 0.0_f64;
    for probe in probes {
        assert_eq!(probe.len(), d, "probe dimension mismatch");
        // g_k = Dη(y_k, t_k) · DΦ_{0, t_k}, with the flow Jacobian
        // accumulated left-to-right from the exact step Jacobians.
        let mut path = Vec::with_capacity(steps + 1);
        let mut y = probe.clone();
        let mut flow_jac = Mat::identity(d);
        for k in 0..=steps {
            let t = k as f64 * h;
            path.push(field.spatial_jacobian(&y, t).matmul(&flow_jac));
            if k < steps {
                let step_jac = step_jacobian(field, t, h, &y);
                y = rk2_step(field, t, h, &y);
                flow_jac = step_jac.matmul(&flow_jac);
            }
        }
        for k in 1..steps {
            let (prev, here, next) = (&path[k - 1], &path[k], &path[k + 1]);
            for idx in 0..d * d {
                let (a, b, c) = (prev.as_slice()[idx], here.as_slice()[idx], next.as_slice()[idx]);
                gamma_1 = gamma_1.max(((c - a) / (2.0 * h)).abs());
                gamma_2 = gamma_2.max(((c - 2.0 * b + a) / (h * h)).abs());
            }
        }
    }
    GammaEstimate { gamma_1, gamma_2, probes: probes.len(), steps }
}

/// `log Λ_Z = d·(log(8d) + 5·log Λ + Λ)` — the sub-Gaussian increment
/// constant, with the additive `Λ` term exponentiated from `log Λ` (the one
/// place this can honestly overflow to `+∞`).
///
/// ```
/// use liouville_flow::bounds::subgaussian_constant;
/// // d = 1, Λ = 1: log Λ_Z = log 8 + 1.
/// assert!((subgaussian_constant(1, 0.0) - (8.0_f64.ln() + 1.0)).abs() < 1e-12);
/// ```
pub fn subgaussian_constant(spatial_dim: usize, log_lambda: f64) -> f64 {
    subgaussian_constant_with_exponent(spatial_dim, log_lambda, 5)
}

/// [`subgaussian_constant`] with an explicit polynomial order. The chaining
/// argument supports either a fifth or a sixth power on `Λ` depending on how
/// the step-sensitivity factors are collected; the default entry point uses
/// the tighter fifth power and this variant exposes the looser choice.
pub fn subgaussian_constant_with_exponent(spatial_dim: usize, log_lambda: f64, lambda_exponent: u32) -> f64 {
    let d = spatial_dim as f64;
    d * ((8.0 * d).ln() + lambda_exponent as f64 * log_lambda + log_lambda.exp())
}

/// Log of the expected-generalization bound `48LW²·Λ_Z/√n`.
pub fn expected_gen_bound(depth: usize, width: usize, log_subgaussian: f64, n: u64) -> f64 {
    assert!(n >= 1, "sample count must be ≥ 1");
    let lw = 48.0 * depth as f64 * (width as f64) * (width as f64);
    lw.ln() + log_subgaussian - 0.5 * (n as f64).ln()
}

/// Log of the concentration tail `exp(−(1/4)·ε²n/D²)` with
/// `log D = d·(log 4d + 2·log Λ)`; returns `−(ε²n/4)·e^{−2 log D}` directly.
/// For enormous `D` the tail degrades to `-0` — probability one, honestly.
pub fn mcdiarmid_tail(epsilon: f64, n: u64, spatial_dim: usize, log_lambda: f64) -> f64 {
    assert!(epsilon > 0.0, "deviation ε must be positive, got {epsilon}");
    let d = spatial_dim as f64;
    let log_osc = d * ((4.0 * d).ln() + 2.0 * log_lambda);
    -(epsilon * epsilon * n as f64 / 4.0) * (-2.0 * log_osc).exp()
}

/// Log of the model-error bound `C_ξ/K^{k-1} + Ĉ_ξ·h²` (log-sum-exp of the
/// two terms; pass `-∞` for an exactly-zero constant).
pub fn model_error_bound(log_c_xi: f64, log_c_hat_xi: f64, segments: u64, h: f64, k: usize) -> f64 {
    assert!(segments >= 1, "segment count K must be ≥ 1");
    assert!(h > 0.0 && h < 1.0, "step size must lie in (0,1), got {h}");
    assert!(k >= 2, "smoothness order k must be ≥ 2, got {k}");
    log_add(
        log_c_xi - (k as f64 - 1.0) * (segments as f64).ln(),
        log_c_hat_xi + 2.0 * h.ln(),
    )
}

/// The sample-indexed architecture schedule, reported with feasibility flags.
///
/// The displayed schedule chooses the depth through a doubly-nested
/// logarithm, `L_n = ⌊log₄ log_{ω_n}((1-p)/(8d)·ln n)⌋` with
/// `ω_n = 2√R_0·W_n`, which stays below 1 for every sample count of
/// practical magnitude (and indeed for every `u64`); rather than silently
/// substituting a usable depth, the schedule reports `depth: None` and
/// `feasible: false` in that regime.
#[derive(Debug, Clone, Copy)]
pub struct PacSchedule {
    pub log_n: f64,
    pub p: f64,
    pub spatial_dim: usize,
    pub r0: f64,
    /// `h_n = 1/⌈2·(1-p)/(8d)·ln n⌉`.
    pub step_size: f64,
    pub steps: u64,
    /// `W_n = ⌈(p/(2d))·ln n / (2√R_0)⌉`.
    pub width: u64,
    /// `K_n = K(W_n)`.
    pub segments: u64,
    /// `L_n` when the nested logarithm yields at least 1.
    pub depth: Option<u64>,
    /// `log Λ_n = L_n·2^{L_n}·ln ω_n` when the depth exists.
    pub log_lambda: Option<f64>,
    /// The invertibility guard `Λ_n < 1/(2h_n)`, evaluated in log domain.
    pub guard_ok: bool,
    pub feasible: bool,
}

impl PacSchedule {
    /// Renders the schedule as a JSON object, suitable for embedding in a
    /// bounds report. Absent depth (`n` too small for one layer) renders as
    /// `null` and flips `feasible` to `false`, so downstream tooling never
    /// has to guess why a schedule is unusable.
    pub fn to_json(&self) -> String {
        let depth = match self.depth {
            Some(l) => l.to_string(),
            None => "null".to_string(),
        };
        let log_lambda = match self.log_lambda {
            Some(l) => log_value_json(l),
            None => "null".to_string(),
        };
        format!(
            "{{\"log_n\": {}, \"p\": {}, \"spatial_dim\": {}, \"r0\": {}, \"step_size\": {}, \"steps\": {}, \"width\": {}, \"segments\": {}, \"depth\": {}, \"log_lambda\": {}, \"guard_ok\": {}, \"feasible\": {}}}",
            fmt_f64(self.log_n),
            fmt_f64(self.p),
            self.spatial_dim,
            fmt_f64(self.r0),
            fmt_f64(self.step_size),
            self.steps,
            self.width,
            self.segments,
            depth,
            log_lambda,
            self.guard_ok,
            self.feasible
        )
    }
}

/// Evaluates the sample schedule at an integer sample count.
pub fn pac_schedule(n: u64, p: f64, spatial_dim: usize, r0: f64) -> Result<PacSchedule> {
    if n < 3 {
        return Err(Error::Precondition(format!("schedule needs n ≥ 3, got {n}")));
    }
    pac_schedule_from_log_n((n as f64).ln(), p, spatial_dim, r0)
}

/// Evaluates the sample schedule from `ln n` directly, so sample sizes far
/// beyond `u64` (as produced by [`pac_sample_size`]) can be scheduled too.
pub fn pac_schedule_from_log_n(log_n: f64, p: f64, spatial_dim: usize, r0: f64) -> Result<PacSchedule> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Precondition(format!("rate split p must lie in (0,1), got {p}")));
    }
    if spatial_dim == 0 {
        return Err(Error::Precondition("dimension must be ≥ 1".into()));
    }
    if !(r0 >= 1.0) || !r0.is_finite() {
        return Err(Error::Precondition(format!("input radius R_0 must be finite and ≥ 1, got {r0}")));
    }
    if !(log_n >= 3.0_f64.ln()) || !log_n.is_finite() {
        return Err(Error::Precondition(format!("schedule needs ln n ≥ ln 3, got {log_n}")));
    }
    let d = spatial_dim as f64;
    // ln(n^{(1-p)/(8d)}) — the resolution driver of both h_n and L_n.
    let log_target = (1.0 - p) / (8.0 * d) * log_n;
    let steps = (2.0 * log_target).ceil().max(1.0) as u64;
    let step_size = 1.0 / steps as f64;
    let width = ((p / (2.0 * d)) * log_n / (2.0 * r0.sqrt())).ceil().max(1.0) as u64;
    let segments = k_of_w(width, spatial_dim);
    let omega = 2.0 * r0.sqrt() * width as f64;
    // L_n = ⌊log₄(ln(log_target)/ln ω)⌋, defined only when log_target > 1.
    let depth = if log_target > 1.0 {
        let nested = log_target.ln() / omega.ln();
        if nested >= 4.0 {
            Some((nested.ln() / 4.0_f64.ln()).floor() as u64)
        } else {
            None
        }
    } else {
        None
    };
    let log_lambda = depth.map(|l| (l as f64) * (2.0_f64).powi(l as i32) * omega.ln());
    let guard_ok = match log_lambda {
        Some(ll) => ll < (steps as f64 / 2.0).ln(),
        None => false,
    };
    Ok(PacSchedule {
        log_n,
        p,
        spatial_dim,
        r0,
        step_size,
        steps,
        width,
        segments,
        depth,
        log_lambda,
        guard_ok,
        feasible: depth.is_some(),
    })
}

/// A PAC sample size: always available as `ln n`, and as an exact integer
/// whenever it fits below `2^53` (the `f64` integer-exactness bound).
#[derive(Debug, Clone, Copy)]
pub struct PacSampleSize {
    pub log_n: f64,
    pub n: Option<u64>,
    /// Log of the schedule constant `c(p)` combining the two smoothness
    /// constants.
    pub log_c_p: f64,
    /// The three competing requirements: the architecture floor `Ñ`, the
    /// model-error requirement, and the concentration requirement.
    pub log_terms: [f64; 3],
}

impl PacSampleSize {
    /// Renders the requirement as a JSON object. The count itself is `null`
    /// whenever it only exists in log form (the model-error term is
    /// exponential in `1/ε`, so this is the common case); the three
    /// competing log-requirements are always listed so the binding one can
    /// be read off.
    pub fn to_json(&self) -> String {
        let n = match self.n {
            Some(n) => n.to_string(),
            None => "null".to_string(),
        };
        let terms: Vec<String> = self.log_terms.iter().map(|t| log_value_json(*t)).collect();
        format!(
            "{{\"log_n\": {}, \"n\": {}, \"log_c_p\": {}, \"log_terms\": [{}]}}",
            log_value_json(self.log_n),
            n,
            fmt_f64(self.log_c_p),
            terms.join(", ")
        )
    }
}

/// The sample requirement `n(ε, δ)`:
///
/// ```text
/// n = ⌈max{ Ñ,  exp((2c(p)/ε)^{1/q}),  (ln(1/δ) / (ε²/(16(4d)^{2d}) + 2^{2d}))^{1/p} }⌉
/// q = min{2, (k-1)/(d+1)}
/// c(p) = 3^{k-1}·(192d(d+1)√R_0 / p)^{(k-1)/(d+1)}·C_H + (1/4)·(8d/(1-p))²·Ĉ_H
/// ```
///
/// with the class constants supplied as logs and `R_0` the domain radius
/// [`default_input_radius`]. The model-error term is exponential in `1/ε`,
/// so the result usually only exists in log form.
pub fn pac_sample_size(
    epsilon: f64,
    delta: f64,
    p: f64,
    spatial_dim: usize,
    k: usize,
    log_c_h: f64,
    log_c_hat_h: f64,
    n_tilde: u64,
) -> Result<PacSampleSize> {
    for (name, v) in [("ε", epsilon), ("δ", delta), ("p", p)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Precondition(format!("{name} must lie in (0,1), got {v}")));
        }
    }
    if spatial_dim == 0 || k < 2 {
        return Err(Error::Precondition(format!(
            "sample size needs d ≥ 1 and k ≥ 2, got d={spatial_dim}, k={k}"
        )));
    }
    let d = spatial_dim as f64;
    let kf = k as f64;
    let exponent = (kf - 1.0) / (d + 1.0);
    let r0 = default_input_radius();
    let log_c_p = log_add(
        (kf - 1.0) * 3.0_f64.ln() + exponent * (192.0 * d * (d + 1.0) * r0.sqrt() / p).ln() + log_c_h,
        -(4.0_f64.ln()) + 2.0 * ((8.0 * d).ln() - (1.0 - p).ln()) + log_c_hat_h,
    );
    let q = exponent.min(2.0);
    // ln n₂ = (2c(p)/ε)^{1/q}, assembled in log domain before the final exp.
    let model_term = ((LN_2 + log_c_p - epsilon.ln()) / q).exp();
    // ln n₃ = (1/p)·ln(ln(1/δ) / (ε²/(16(4d)^{2d}) + 2^{2d})).
    let log_denominator = log_add(
        2.0 * epsilon.ln() - (16.0_f64).ln() - 2.0 * d * (4.0 * d).ln(),
        2.0 * d * LN_2,
    );
    let concentration_term = ((1.0 / delta).ln().ln() - log_denominator) / p;
    let floor_term = (n_tilde.max(1) as f64).ln();
    let log_terms = [floor_term, model_term, concentration_term];
    let log_n = model_term.max(concentration_term).max(floor_term);
    let n = if log_n > (2.0_f64).powi(53).ln() {
        None
    } else if log_n == floor_term {
        // The integer floor Ñ is binding; don't let the log round trip
        // nudge an exact integer over its own ceiling.
        Some(n_tilde.max(1))
    } else {
        Some(log_n.exp().ceil() as u64)
    };
    Ok(PacSampleSize { log_n, n, log_c_p, log_terms })
}
