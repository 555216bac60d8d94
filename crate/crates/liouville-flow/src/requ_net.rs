//! ReQU feed-forward vector fields with exact spatial Jacobians.
//!
//! A network here is a map `η_θ : R^d × [0,1] -> R^d` built from `L` affine
//! layers. The input is the concatenated vector `(y, t)` of width `ℓ_0 = d+1`;
//! hidden layers apply the rectified-quadratic activation
//!
//! ```text
//! ReQU(x) = max(0, x)²,   ReQU'(x) = 2 max(0, x),   ReQU''(x) = 2·1{x > 0},
//! ```
//!
//! and the final layer is affine with identity activation and a structurally
//! zero bias, producing a `d`-vector. All trainable entries live in the box
//! `[−1, 1]`; [`ReQUNetwork::project_params`] clamps back into it after a
//! gradient step.
//!
//! Because ReQU is C¹, the spatial Jacobian `D_y η_θ` exists everywhere and is
//! an exact finite product of per-layer factors `diag(ReQU'(u_ℓ)) · w_ℓ`
//! restricted to the `y`-columns of the input; no finite differencing is
//! involved. The divergence is computed as the trace of that product, so
//! `divergence == trace(spatial_jacobian)` holds bit-for-bit.
//!
//! [`CutoffField`] multiplies a network by the radial spline profile
//! `χ(y) = c(4‖y‖²)` from [`crate::spline`], which makes the field vanish
//! identically for `‖y‖ ≥ 1/2` while leaving it untouched on the inner
//! plateau. Its Jacobian combines the product rule with
//! `∇χ = 8 c'(4‖y‖²) · y`.
//!
//! The private reverse-mode entry points ([`ReQUNetwork::vjp`],
//! [`CutoffField::vjp`]) pull a pair of cotangents — one on the value, one on
//! the Jacobian matrix — back to parameter space in a single sweep; the
//! training loop uses them to differentiate per-step log-determinants without
//! any autodiff dependency.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::sq_norm;
use crate::spline::CutoffSpline;
use crate::artifact;
use rand::Rng;
use serde_json::Value;

/// Rectified quadratic unit `max(0, x)²`.
///
/// ```
/// use liouville_flow::requ_net::requ;
/// assert_eq!(requ(-1.0), 0.0);
/// assert_eq!(requ(0.0), 0.0);
/// assert_eq!(requ(2.0), 4.0);
/// ```
pub fn requ(x: f64) -> f64 {
    let p = x.max(0.0);
    p * p
}

/// First derivative of [`requ`]: `2 max(0, x)`.
pub fn requ_d1(x: f64) -> f64 {
    2.0 * x.max(0.0)
}

/// Second derivative of [`requ`] away from the kink: `2·1{x > 0}`.
pub fn requ_d2(x: f64) -> f64 {
    if x > 0.0 {
        2.0
    } else {
        0.0
    }
}

/// Radial cutoff profile `χ(y) = c(4‖y‖²)` for a freshly built spline with
/// `segments` knot intervals and polynomial `degree`.
///
/// Returns 1 at the origin, 0 for `‖y‖ ≥ 1/2`, and interpolates monotonically
/// in between. Fails if `segments ≤ 2(degree+1)`.
///
/// ```
/// use liouville_flow::requ_net::cutoff_value;
/// assert_eq!(cutoff_value(12, 4, &[0.0, 0.0]).unwrap(), 1.0);
/// assert_eq!(cutoff_value(12, 4, &[0.5, 0.0]).unwrap(), 0.0);
/// ```
pub fn cutoff_value(segments: usize, degree: usize, y: &[f64]) -> Result<f64> {
    let spline = CutoffSpline::new(segments, degree)?;
    Ok(spline.value(4.0 * sq_norm(y)))
}

/// Fully connected ReQU network from `R^{d+1}` (space and time) to `R^d`.
#[derive(Debug, Clone)]
pub struct ReQUNetwork {
    spatial_dim: usize,
    /// Layer output widths `ℓ_1..ℓ_L`; the last entry always equals `d`.
    widths: Vec<usize>,
    weights: Vec<Mat>,
    biases: Vec<Vec<f64>>,
}

/// Forward pass record: pre-activations, activations, and the running
/// spatial-Jacobian factors needed by the reverse sweep.
#[derive(Debug)]
pub(crate) struct NetTrace {
    /// `z[ℓ]` for `ℓ = 0..=L` (`z[0]` is the `(y, t)` input).
    z: Vec<Vec<f64>>,
    /// Pre-activations `u[ℓ]` for layers `1..=L` (index 0 holds layer 1).
    u: Vec<Vec<f64>>,
    /// `f[ℓ]`: Jacobian of `z[ℓ]` with respect to `y`, for `ℓ = 0..=L`.
    f: Vec<Mat>,
    /// `m[ℓ] = w_ℓ · f[ℓ−1]` for layers `1..=L` (index 0 holds layer 1).
    m: Vec<Mat>,
}

impl NetTrace {
    pub(crate) fn value(&self) -> &[f64] {
        self.z.last().expect("trace holds at least the input layer")
    }

    pub(crate) fn jacobian(&self) -> &Mat {
        self.f.last().expect("trace holds at least the input layer")
    }
}

impl ReQUNetwork {
    /// Network with all weights and biases zero.
    ///
    /// `hidden` lists the widths of layers `1..L−1`; the output layer of
    /// width `d` is appended automatically, so `hidden = []` gives a single
    /// affine readout.
    ///
    /// ```
    /// use liouville_flow::requ_net::ReQUNetwork;
    /// let net = ReQUNetwork::zeros(2, &[8, 8]).unwrap();
    /// assert_eq!(net.forward(&[0.3, -0.1], 0.5).unwrap(), vec![0.0, 0.0]);
    /// ```
    pub fn zeros(spatial_dim: usize, hidden: &[usize]) -> Result<Self> {
        if spatial_dim == 0 {
            return Err(Error::Precondition("spatial dimension must be positive".into()));
        }
        if hidden.iter().any(|&w| w == 0) {
            return Err(Error::Precondition("layer widths must be positive".into()));
        }
        let mut widths: Vec<usize> = hidden.to_vec();
        widths.push(spatial_dim);
        let mut weights = Vec::with_capacity(widths.len());
        let mut biases = Vec::with_capacity(widths.len());
        let mut prev = spatial_dim + 1;
        for &w in &widths {
            weights.push(Mat::zeros(w, prev));
            biases.push(vec![0.0; w]);
            prev = w;
        }
        Ok(ReQUNetwork { spatial_dim, widths, weights, biases })
    }

    /// Seeded initialization: every trainable entry drawn uniformly from
    /// `[−s, s]` with `s = 0.5 / W`, where `W` is the maximum layer width.
    ///
    /// The draw order (layer by layer, weight rows first, then bias) is part
    /// of the reproducibility contract. The small scale keeps the initial
    /// empirical Lipschitz constant of the field well under the step-size
    /// guard.
    pub fn seeded(spatial_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(spatial_dim, hidden)?;
        let s = 0.5 / net.max_width() as f64;
        let depth = net.depth();
        for l in 0..depth {
            let (rows, cols) = (net.weights[l].rows(), net.weights[l].cols());
            for r in 0..rows {
                for c in 0..cols {
                    net.weights[l][(r, c)] = rng.gen_range(-s..=s);
                }
            }
            if l + 1 < depth {
                for b in net.biases[l].iter_mut() {
                    *b = rng.gen_range(-s..=s);
                }
            }
        }
        Ok(net)
    }

    /// Assemble a network from explicit layer matrices, validating the shape
    /// chain, the `[−1, 1]` parameter box, and the structurally zero final
    /// bias.
    pub fn from_parts(spatial_dim: usize, weights: Vec<Mat>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if spatial_dim == 0 {
            return Err(Error::Precondition("spatial dimension must be positive".into()));
        }
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Precondition(format!(
                "need equally many weight matrices and bias vectors, at least one layer; got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        let depth = weights.len();
        let mut prev = spatial_dim + 1;
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != prev {
                return Err(Error::Precondition(format!(
                    "layer {l} expects input width {prev}, weight matrix has {} columns",
                    w.cols()
                )));
            }
            if b.len() != w.rows() {
                return Err(Error::Precondition(format!(
                    "layer {l} bias length {} does not match its {} rows",
                    b.len(),
                    w.rows()
                )));
            }
            let in_box = w.as_slice().iter().chain(b.iter()).all(|&x| (-1.0..=1.0).contains(&x));
            if !in_box {
                return Err(Error::Precondition(format!(
                    "layer {l} has a parameter outside [-1, 1]"
                )));
            }
            prev = w.rows();
        }
        if prev != spatial_dim {
            return Err(Error::Precondition(format!(
                "output width {prev} must equal the spatial dimension {spatial_dim}"
            )));
        }
        if biases[depth - 1].iter().any(|&b| b != 0.0) {
            return Err(Error::Precondition(
                "final layer bias is structurally zero, got a nonzero entry".into(),
            ));
        }
        let widths = weights.iter().map(Mat::rows).collect();
        Ok(ReQUNetwork { spatial_dim, widths, weights, biases })
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    /// Depth `L` (number of affine layers).
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Layer output widths `ℓ_1..ℓ_L`.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Maximum layer width `W = max{ℓ_1..ℓ_L}`.
    pub fn max_width(&self) -> usize {
        *self.widths.iter().max().expect("at least one layer")
    }

    pub fn weight(&self, layer: usize) -> &Mat {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    fn check_input(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.spatial_dim {
            return Err(Error::Precondition(format!(
                "input has dimension {}, network expects {}",
                y.len(),
                self.spatial_dim
            )));
        }
        Ok(())
    }

    /// Evaluate `η_θ(y, t)`.
    pub fn forward(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_input(y)?;
        let depth = self.depth();
        let mut z: Vec<f64> = y.iter().copied().chain(std::iter::once(t)).collect();
        for l in 0..depth {
            let mut u = self.weights[l].matvec(&z);
            for (ui, bi) in u.iter_mut().zip(&self.biases[l]) {
                *ui += bi;
            }
            if l + 1 < depth {
                for ui in u.iter_mut() {
                    *ui = requ(*ui);
                }
            }
            z = u;
        }
        Ok(z)
    }

    /// Exact Jacobian `D_y η_θ(y, t)` (a `d×d` matrix; the time column is not
    /// part of it).
    pub fn spatial_jacobian(&self, y: &[f64], t: f64) -> Result<Mat> {
        self.check_input(y)?;
        let d = self.spatial_dim;
        let depth = self.depth();
        let mut z: Vec<f64> = y.iter().copied().chain(std::iter::once(t)).collect();
        // Jacobian of (y, t) with respect to y: identity over a zero time row.
        let mut f = Mat::zeros(d + 1, d);
        for i in 0..d {
            f[(i, i)] = 1.0;
        }
        for l in 0..depth {
            let mut u = self.weights[l].matvec(&z);
            for (ui, bi) in u.iter_mut().zip(&self.biases[l]) {
                *ui += bi;
            }
            let mut fm = self.weights[l].matmul(&f);
            if l + 1 < depth {
                for (r, &ur) in u.iter().enumerate() {
                    let s = requ_d1(ur);
                    for c in 0..d {
                        fm[(r, c)] *= s;
                    }
                }
                for ui in u.iter_mut() {
                    *ui = requ(*ui);
                }
            }
            z = u;
            f = fm;
        }
        Ok(f)
    }

    /// Divergence `div_y η_θ(y, t)`, computed as the exact trace of
    /// [`Self::spatial_jacobian`] (not an estimator).
    pub fn divergence(&self, y: &[f64], t: f64) -> Result<f64> {
        Ok(self.spatial_jacobian(y, t)?.trace())
    }

    /// Clamp every trainable entry into `[−1, 1]`. Idempotent; the final bias
    /// is structurally zero and stays untouched.
    pub fn project_params(&mut self) {
        for w in &mut self.weights {
            for x in w.as_mut_slice() {
                *x = x.clamp(-1.0, 1.0);
            }
        }
        for b in &mut self.biases {
            for x in b.iter_mut() {
                *x = x.clamp(-1.0, 1.0);
            }
        }
    }

    /// Number of trainable parameters (final bias excluded: it is not a
    /// parameter).
    pub fn param_count(&self) -> usize {
        let depth = self.depth();
        let mut n = 0;
        for l in 0..depth {
            n += self.weights[l].rows() * self.weights[l].cols();
            if l + 1 < depth {
                n += self.biases[l].len();
            }
        }
        n
    }

    /// Flatten the trainable parameters: layer by layer, weight entries in
    /// row-major order followed by the bias (omitted for the final layer).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        let depth = self.depth();
        for l in 0..depth {
            out.extend_from_slice(self.weights[l].as_slice());
            if l + 1 < depth {
                out.extend_from_slice(&self.biases[l]);
            }
        }
        out
    }

    /// Inverse of [`Self::params_flat`]. Rejects wrong lengths, non-finite
    /// values, and entries outside the `[−1, 1]` parameter box.
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Precondition(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter vector contains a non-finite entry".into()));
        }
        if flat.iter().any(|x| !(-1.0..=1.0).contains(x)) {
            return Err(Error::Precondition(
                "parameter vector leaves the [-1, 1] box; project before setting".into(),
            ));
        }
        let depth = self.depth();
        let mut off = 0;
        for l in 0..depth {
            let nw = self.weights[l].rows() * self.weights[l].cols();
            self.weights[l].as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            if l + 1 < depth {
                let nb = self.biases[l].len();
                self.biases[l].copy_from_slice(&flat[off..off + nb]);
                off += nb;
            }
        }
        Ok(())
    }

    /// Forward pass retaining everything the reverse sweep needs.
    pub(crate) fn eval_traced(&self, y: &[f64], t: f64) -> NetTrace {
        debug_assert_eq!(y.len(), self.spatial_dim);
        let d = self.spatial_dim;
        let depth = self.depth();
        let z0: Vec<f64> = y.iter().copied().chain(std::iter::once(t)).collect();
        let mut f0 = Mat::zeros(d + 1, d);
        for i in 0..d {
            f0[(i, i)] = 1.0;
        }
        let mut z = vec![z0];
        let mut u = Vec::with_capacity(depth);
        let mut f = vec![f0];
        let mut m = Vec::with_capacity(depth);
        for l in 0..depth {
            let mut ul = self.weights[l].matvec(&z[l]);
            for (ui, bi) in ul.iter_mut().zip(&self.biases[l]) {
                *ui += bi;
            }
            let ml = self.weights[l].matmul(&f[l]);
            let (zl, fl) = if l + 1 < depth {
                let mut fl = ml.clone();
                for (r, &ur) in ul.iter().enumerate() {
                    let s = requ_d1(ur);
                    for c in 0..d {
                        fl[(r, c)] *= s;
                    }
                }
                (ul.iter().map(|&x| requ(x)).collect::<Vec<f64>>(), fl)
            } else {
                (ul.clone(), ml.clone())
            };
            u.push(ul);
            m.push(ml);
            z.push(zl);
            f.push(fl);
        }
        NetTrace { z, u, f, m }
    }

    /// Layer offsets into the flat parameter vector: `(weight_off, bias_off)`;
    /// the final layer's bias offset is unused.
    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let depth = self.depth();
        let mut offs = Vec::with_capacity(depth);
        let mut off = 0;
        for l in 0..depth {
            let w_off = off;
            off += self.weights[l].rows() * self.weights[l].cols();
            let b_off = off;
            if l + 1 < depth {
                off += self.biases[l].len();
            }
            offs.push((w_off, b_off));
        }
        offs
    }

    /// Reverse-mode sweep for the pair cotangent `(v̄, F̄)` on
    /// `(η_θ(y,t), D_y η_θ(y,t))`.
    ///
    /// Accumulates `v̄ᵀ·∂η/∂θ + ⟨F̄, ∂Dη/∂θ⟩` into `grad` (flat layout of
    /// [`Self::params_flat`]) and returns the cotangent with respect to the
    /// spatial input `y`.
    ///
    /// Derivation: with `z_ℓ = ReQU(u_ℓ)`, `u_ℓ = w_ℓ z_{ℓ−1} + b_ℓ`,
    /// `F_ℓ = diag(ReQU'(u_ℓ)) M_ℓ`, `M_ℓ = w_ℓ F_{ℓ−1}`, the adjoints are
    ///
    /// ```text
    /// ū_ℓ = z̄_ℓ ⊙ ReQU'(u_ℓ) + rowdot(F̄_ℓ, M_ℓ) ⊙ ReQU''(u_ℓ)
    /// M̄_ℓ = diag(ReQU'(u_ℓ)) F̄_ℓ
    /// w̄_ℓ += ū_ℓ z_{ℓ−1}ᵀ + M̄_ℓ F_{ℓ−1}ᵀ,   b̄_ℓ += ū_ℓ
    /// z̄_{ℓ−1} = w_ℓᵀ ū_ℓ,   F̄_{ℓ−1} = w_ℓᵀ M̄_ℓ
    /// ```
    ///
    /// with the identity final layer reducing to `ū_L = z̄_L`, `M̄_L = F̄_L`.
    /// The `ReQU''` term is exact wherever no pre-activation sits exactly on
    /// the kink, which holds almost surely and is enforced in gradient tests.
    pub(crate) fn vjp(&self, trace: &NetTrace, v_bar: &[f64], f_bar: &Mat, grad: &mut [f64]) -> Vec<f64> {
        let d = self.spatial_dim;
        let depth = self.depth();
        debug_assert_eq!(v_bar.len(), d);
        debug_assert_eq!((f_bar.rows(), f_bar.cols()), (d, d));
        debug_assert_eq!(grad.len(), self.param_count());
        let offs = self.layer_offsets();

        let mut z_bar = v_bar.to_vec();
        let mut f_bar = f_bar.clone();
        for l in (0..depth).rev() {
            let w = &self.weights[l];
            let (rows, cols) = (w.rows(), w.cols());
            let (u_bar, m_bar) = if l + 1 < depth {
                let ul = &trace.u[l];
                let mut u_bar = vec![0.0; rows];
                let mut m_bar = f_bar.clone();
                for r in 0..rows {
                    let row_dot: f64 = (0..d).map(|c| f_bar[(r, c)] * trace.m[l][(r, c)]).sum();
                    u_bar[r] = z_bar[r] * requ_d1(ul[r]) + row_dot * requ_d2(ul[r]);
                    let s = requ_d1(ul[r]);
                    for c in 0..d {
                        m_bar[(r, c)] *= s;
                    }
                }
                (u_bar, m_bar)
            } else {
                (z_bar.clone(), f_bar.clone())
            };

            let (w_off, b_off) = offs[l];
            let z_prev = &trace.z[l];
            let f_prev = &trace.f[l];
            for r in 0..rows {
                for c in 0..cols {
                    let mut g = u_bar[r] * z_prev[c];
                    for j in 0..d {
                        g += m_bar[(r, j)] * f_prev[(c, j)];
                    }
                    grad[w_off + r * cols + c] += g;
                }
            }
            if l + 1 < depth {
                for r in 0..rows {
                    grad[b_off + r] += u_bar[r];
                }
            }

            z_bar = w.tr_matvec(&u_bar);
            f_bar = w.transpose().matmul(&m_bar);
        }
        // z̄_0 covers (y, t); only the spatial components flow onward (the
        // constant input Jacobian absorbs f̄_0).
        z_bar.truncate(d);
        z_bar
    }
}

/// A ReQU network multiplied by the radial cutoff profile, so the field and
/// all its spatial derivatives vanish on and outside the sphere `‖y‖ = 1/2`.
#[derive(Debug, Clone)]
pub struct CutoffField {
    net: ReQUNetwork,
    spline: CutoffSpline,
}

impl CutoffField {
    /// Wrap `net` with a cutoff spline of `segments` knot intervals and
    /// polynomial `degree ≥ 4` (so the field stays C³ at the collar).
    pub fn new(net: ReQUNetwork, segments: usize, degree: usize) -> Result<Self> {
        if degree < 4 {
            return Err(Error::Precondition(format!(
                "cutoff degree must be >= 4 for a C³ field, got {degree}"
            )));
        }
        let spline = CutoffSpline::new(segments, degree)?;
        Ok(CutoffField { net, spline })
    }

    pub fn network(&self) -> &ReQUNetwork {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut ReQUNetwork {
        &mut self.net
    }

    pub fn spline(&self) -> &CutoffSpline {
        &self.spline
    }

    pub fn spatial_dim(&self) -> usize {
        self.net.spatial_dim()
    }

    /// `χ(y)·η_θ(y, t)`; exactly the zero vector once `4‖y‖² ≥ 1`.
    pub fn forward(&self, y: &[f64], t: f64) -> Result<Vec<f64>> {
        self.net.check_input(y)?;
        let x = 4.0 * sq_norm(y);
        if x >= 1.0 {
            return Ok(vec![0.0; y.len()]);
        }
        let chi = self.spline.value(x);
        let mut g = self.net.forward(y, t)?;
        for gi in g.iter_mut() {
            *gi *= chi;
        }
        Ok(g)
    }

    /// Product-rule Jacobian `χ·Dg + 8c'(4‖y‖²) · g yᵀ`.
    pub fn spatial_jacobian(&self, y: &[f64], t: f64) -> Result<Mat> {
        self.net.check_input(y)?;
        let d = y.len();
        let x = 4.0 * sq_norm(y);
        if x >= 1.0 {
            return Ok(Mat::zeros(d, d));
        }
        let (chi, c1, _) = self.spline.value_d1_d2(x);
        let g = self.net.forward(y, t)?;
        let mut jac = self.net.spatial_jacobian(y, t)?;
        jac.scale_mut(chi);
        let scale = 8.0 * c1;
        for r in 0..d {
            for c in 0..d {
                jac[(r, c)] += scale * g[r] * y[c];
            }
        }
        Ok(jac)
    }

    /// Trace of [`Self::spatial_jacobian`], bit-exactly.
    pub fn divergence(&self, y: &[f64], t: f64) -> Result<f64> {
        Ok(self.spatial_jacobian(y, t)?.trace())
    }

    /// Reverse-mode sweep through the cutoff product rule; see
    /// [`ReQUNetwork::vjp`] for the inner-network part.
    ///
    /// With `x = 4‖y‖²`, `∇χ = 8c'(x)·y` and the outputs
    /// `η = χ g`, `Dη = χ Dg + g ∇χᵀ`, the cotangents are
    ///
    /// ```text
    /// ḡ  = χ v̄ + F̄ ∇χ
    /// D̄g = χ F̄
    /// χ̄  = v̄·g + ⟨F̄, Dg⟩
    /// ȳ += χ̄ · 8c'(x) y + (8c'(x) I + 64 c''(x) y yᵀ) (F̄ᵀ g)
    /// ```
    ///
    /// plus the inner network's own input cotangent.
    pub(crate) fn vjp(&self, y: &[f64], t: f64, v_bar: &[f64], f_bar: &Mat, grad: &mut [f64]) -> Vec<f64> {
        let d = y.len();
        let x = 4.0 * sq_norm(y);
        if x >= 1.0 {
            return vec![0.0; d];
        }
        let (chi, c1, c2) = self.spline.value_d1_d2(x);
        let trace = self.net.eval_traced(y, t);
        let g = trace.value().to_vec();
        let dg = trace.jacobian().clone();

        // ḡ = χ v̄ + F̄ ∇χ with ∇χ = 8 c' y.
        let mut g_bar = vec![0.0; d];
        for i in 0..d {
            let mut acc = chi * v_bar[i];
            for j in 0..d {
                acc += f_bar[(i, j)] * 8.0 * c1 * y[j];
            }
            g_bar[i] = acc;
        }
        let mut dg_bar = f_bar.clone();
        dg_bar.scale_mut(chi);

        let mut y_bar = self.net.vjp(&trace, &g_bar, &dg_bar, grad);

        // χ̄ = v̄·g + ⟨F̄, Dg⟩, pushed through χ(y) = c(4‖y‖²).
        let mut chi_bar = 0.0;
        for i in 0..d {
            chi_bar += v_bar[i] * g[i];
        }
        chi_bar += f_bar.frob_inner(&dg);
        for i in 0..d {
            y_bar[i] += chi_bar * 8.0 * c1 * y[i];
        }

        // Cotangent on ∇χ itself: grad_chi_bar = F̄ᵀ g, pulled back through
        // the Jacobian of ∇χ(y), which is 8c' I + 64 c'' y yᵀ.
        let grad_chi_bar = f_bar.tr_matvec(&g);
        let y_dot: f64 = y.iter().zip(&grad_chi_bar).map(|(a, b)| a * b).sum();
        for i in 0..d {
            y_bar[i] += 8.0 * c1 * grad_chi_bar[i] + 64.0 * c2 * y[i] * y_dot;
        }
        y_bar
    }
}

/// Serialize a network (optionally with its cutoff profile) into the portable
/// JSON layout `{d, L, widths, weights(row-major), biases, cutoff}`.
///
/// Floats carry 17 significant digits, so a write–read round trip reproduces
/// the parameters bit for bit.
pub fn write_field_json(net: &ReQUNetwork, cutoff: Option<(usize, usize)>) -> String {
    let mut s = String::new();
    s.push_str("{\n  \"schema\": \"liouville-flow/network.v1\",\n");
    s.push_str(&format!("  \"d\": {},\n", net.spatial_dim()));
    s.push_str(&format!("  \"L\": {},\n", net.depth()));
    let widths: Vec<String> = net.widths().iter().map(|w| w.to_string()).collect();
    s.push_str(&format!("  \"widths\": [{}],\n", widths.join(",")));
    let weights: Vec<String> = (0..net.depth())
        .map(|l| artifact::json_f64_array(net.weight(l).as_slice()))
        .collect();
    s.push_str(&format!("  \"weights\": [{}],\n", weights.join(",")));
    let biases: Vec<String> = (0..net.depth()).map(|l| artifact::json_f64_array(net.bias(l))).collect();
    s.push_str(&format!("  \"biases\": [{}],\n", biases.join(",")));
    match cutoff {
        Some((big_k, k)) => s.push_str(&format!("  \"cutoff\": {{\"K\": {big_k}, \"k\": {k}}}\n")),
        None => s.push_str("  \"cutoff\": null\n"),
    }
    s.push('}');
    s
}

/// Parse the document produced by [`write_field_json`]. Extra keys are
/// tolerated (the training checkpoint extends this layout); structural
/// problems and parameter-box violations are reported as artifact errors.
pub fn read_field_json(doc: &Value) -> Result<(ReQUNetwork, Option<(usize, usize)>)> {
    let d = artifact::get_usize(doc, "d")?;
    let depth = artifact::get_usize(doc, "L")?;
    let widths: Vec<usize> = artifact::get_array(doc, "widths")?
        .iter()
        .map(|w| w.as_u64().map(|w| w as usize).ok_or_else(|| Error::Artifact("mistyped `widths` entry".into())))
        .collect::<Result<_>>()?;
    if widths.len() != depth {
        return Err(Error::Artifact(format!(
            "`widths` lists {} layers but L = {depth}",
            widths.len()
        )));
    }
    let weight_arrays = artifact::get_array(doc, "weights")?;
    let bias_arrays = artifact::get_array(doc, "biases")?;
    if weight_arrays.len() != depth || bias_arrays.len() != depth {
        return Err(Error::Artifact("`weights`/`biases` layer count disagrees with L".into()));
    }
    let mut weights = Vec::with_capacity(depth);
    let mut biases = Vec::with_capacity(depth);
    let mut prev = d + 1;
    for l in 0..depth {
        let flat: Vec<f64> = weight_arrays[l]
            .as_array()
            .ok_or_else(|| Error::Artifact(format!("`weights[{l}]` is not an array")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| Error::Artifact(format!("mistyped float in `weights[{l}]`"))))
            .collect::<Result<_>>()?;
        if flat.len() != widths[l] * prev {
            return Err(Error::Artifact(format!(
                "`weights[{l}]` has {} entries, expected {}x{}",
                flat.len(),
                widths[l],
                prev
            )));
        }
        weights.push(Mat::from_flat(widths[l], prev, &flat).expect("length validated above"));
        let b: Vec<f64> = bias_arrays[l]
            .as_array()
            .ok_or_else(|| Error::Artifact(format!("`biases[{l}]` is not an array")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| Error::Artifact(format!("mistyped float in `biases[{l}]`"))))
            .collect::<Result<_>>()?;
        biases.push(b);
        prev = widths[l];
    }
    let net = ReQUNetwork::from_parts(d, weights, biases)
        .map_err(|e| Error::Artifact(format!("network document invalid: {e}")))?;
    let cutoff = match doc.get("cutoff") {
        None | Some(Value::Null) => None,
        Some(c) => Some((artifact::get_usize(c, "K")?, artifact::get_usize(c, "k")?)),
    };
    Ok((net, cutoff))
}
