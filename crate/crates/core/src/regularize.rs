//! Depth-adaptive regularizer
//!
//! ```text
//! R_D[u] = Σ g(D, |∇u|) |∇u|² + μ Σ h(D) (Δu)²
//! g(d, s) = exp(-d / d0) ψ(s; σ(d)) + γ(d)
//! ψ(s; σ) = s² / (s² + σ²)
//! ```
//!
//! with parametric `γ`, `σ` and `h` (saturating exponential, affine growth
//! and logistic respectively). The functional derivative is exact: writing
//! `Φ(d, s) = g(d, s) s²`, the first-order term contributes
//! `-div(Φ_s / s ∇u)` and `Φ_s / s` has a closed form in `s²`, so no
//! smoothing of `|∇u|` is needed.

use crate::error::{invalid, Error, Result};
use crate::field::{divergence, gradient, laplacian, ScalarField, VectorField};

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerParams {
    /// First-order weight `λ` (multiplies `R_D` in the energy).
    pub lambda: f64,
    /// Second-order weight `μ`.
    pub mu: f64,
    /// Near-field decay scale of the edge term (meters).
    pub d0: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    /// Saturation scale of `γ` (meters).
    pub d1: f64,
    /// Edge scale `σ(0)`.
    pub sigma_r0: f64,
    /// Growth length of `σ(d)` (meters).
    pub d_sigma: f64,
    /// Logistic midpoint of `h` (meters).
    pub h_mid: f64,
    /// Logistic width of `h` (meters).
    pub h_width: f64,
}

impl Default for RegularizerParams {
    fn default() -> Self {
        Self {
            lambda: 0.0042,
            mu: 0.38,
            d0: 0.5,
            gamma0: 0.45,
            gamma1: 0.23,
            d1: 500.0,
            sigma_r0: 0.001,
            d_sigma: 63.0,
            h_mid: 0.0,
            h_width: 20.0,
        }
    }
}

impl RegularizerParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, format!("must be finite and > 0, got {v}")))
            }
        };
        let nonneg = |name: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, format!("must be finite and >= 0, got {v}")))
            }
        };
        positive("lambda", self.lambda)?;
        nonneg("mu", self.mu)?;
        positive("d0", self.d0)?;
        nonneg("gamma0", self.gamma0)?;
        nonneg("gamma1", self.gamma1)?;
        positive("d1", self.d1)?;
        positive("sigma_r0", self.sigma_r0)?;
        positive("d_sigma", self.d_sigma)?;
        if !self.h_mid.is_finite() {
            return Err(invalid("h_mid", "must be finite"));
        }
        positive("h_width", self.h_width)?;
        Ok(())
    }

    /// Baseline `γ(d) = γ0 + γ1 (1 - exp(-d / d1))`.
    pub fn gamma(&self, d: f64) -> f64 {
        self.gamma0 + self.gamma1 * (1.0 - (-d / self.d1).exp())
    }

    /// Edge scale `σ(d) = σ_r0 (1 + d / d_σ)`.
    pub fn sigma(&self, d: f64) -> f64 {
        self.sigma_r0 * (1.0 + d / self.d_sigma)
    }

    /// Second-order weight `h(d)`, a logistic in depth.
    pub fn h(&self, d: f64) -> f64 {
        1.0 / (1.0 + (-(d - self.h_mid) / self.h_width).exp())
    }

    /// Near-field factor `exp(-d / d0)`.
    pub fn near_field(&self, d: f64) -> f64 {
        (-d / self.d0).exp()
    }

    /// Depth-agnostic counterpart: `g ≡ γ(d_ref)` with the edge term
    /// suppressed, and `h ≡ h(d_ref)`.
    pub fn constant_g(&self, d_ref: f64) -> Self {
        let h_ref = self.h(d_ref).clamp(1e-12, 1.0 - 1e-12);
        let width = 1e12;
        let logit = (h_ref / (1.0 - h_ref)).ln();
        Self {
            gamma0: self.gamma(d_ref),
            gamma1: 0.0,
            d0: f64::MIN_POSITIVE,
            sigma_r0: 1e150,
            h_mid: d_ref - width * logit,
            h_width: width,
            ..self.clone()
        }
    }
}

/// Edge-preserving weight `ψ(s; σ) = s² / (s² + σ²)`.
pub fn psi(s: f64, sigma_d: f64) -> f64 {
    let s2 = s * s;
    s2 / (s2 + sigma_d * sigma_d)
}

/// `g(d, s) = exp(-d / d0) ψ(s; σ(d)) + γ(d)`.
pub fn g_weight(d: f64, s: f64, params: &RegularizerParams) -> f64 {
    params.near_field(d) * psi(s, params.sigma(d)) + params.gamma(d)
}

/// Diffusivity `Φ_s(d, s) / s` as a function of `t = s²`.
fn flux_weight(d: f64, t: f64, params: &RegularizerParams) -> f64 {
    let sigma = params.sigma(d);
    let s2 = sigma * sigma;
    let den = t + s2;
    params.near_field(d) * (2.0 * t * t + 4.0 * t * s2) / (den * den) + 2.0 * params.gamma(d)
}

fn check_dims(u: &ScalarField, depth_map: &ScalarField) -> Result<()> {
    if u.dims() != depth_map.dims() {
        return Err(Error::DimensionMismatch {
            expected: u.dims(),
            actual: depth_map.dims(),
        });
    }
    Ok(())
}

/// `R_D[u]`, excluding the outer weight `λ`.
pub fn regularizer_value(u: &ScalarField, depth_map: &ScalarField, params: &RegularizerParams) -> Result<f64> {
    check_dims(u, depth_map)?;
    let grad = gradient(u);
    let lap = laplacian(u);
    let mut first = 0.0;
    let mut second = 0.0;
    for (i, &d) in depth_map.data().iter().enumerate() {
        let gx = grad.x.data()[i];
        let gy = grad.y.data()[i];
        let t = gx * gx + gy * gy;
        first += g_weight(d, t.sqrt(), params) * t;
        let l = lap.data()[i];
        second += params.h(d) * l * l;
    }
    Ok(first + params.mu * second)
}

/// Exact gradient of [`regularizer_value`] with respect to `u`:
/// `-div(Φ_s/s ∇u) + 2 μ Δ(h Δu)`.
pub fn regularizer_gradient(u: &ScalarField, depth_map: &ScalarField, params: &RegularizerParams) -> Result<ScalarField> {
    check_dims(u, depth_map)?;
    let grad = gradient(u);
    let n = u.len();
    let mut fx = vec![0.0; n];
    let mut fy = vec![0.0; n];
    for (i, &d) in depth_map.data().iter().enumerate() {
        let gx = grad.x.data()[i];
        let gy = grad.y.data()[i];
        let w = flux_weight(d, gx * gx + gy * gy, params);
        fx[i] = w * gx;
        fy[i] = w * gy;
    }
    let flux = VectorField {
        x: u.like(fx),
        y: u.like(fy),
    };
    let mut out = divergence(&flux)?;
    out.scale(-1.0);
    if params.mu != 0.0 {
        let lap = laplacian(u);
        let weighted = lap.like(
            lap.data()
                .iter()
                .zip(depth_map.data())
                .map(|(&l, &d)| params.h(d) * l)
                .collect(),
        );
        out.axpy(2.0 * params.mu, &laplacian(&weighted));
    }
    Ok(out)
}

/// Uniform grid of `count` depths over `[0, d_max]`.
pub fn penalty_grid(d_max: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| d_max * i as f64 / (count - 1) as f64)
        .collect()
}

/// Default number of samples in the penalty grid.
pub const PENALTY_GRID_POINTS: usize = 256;

/// `∫ max(0, -γ'(d))² dd` from samples of `γ` on an increasing grid.
pub fn monotonicity_penalty_samples(grid: &[f64], values: &[f64]) -> Result<f64> {
    if grid.len() < 2 || grid.len() != values.len() {
        return Err(invalid("depth_grid", "need at least 2 points with one value each"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("depth_grid", "must be strictly increasing"));
    }
    Ok(grid
        .windows(2)
        .zip(values.windows(2))
        .map(|(d, v)| {
            let dd = d[1] - d[0];
            let slope = (v[1] - v[0]) / dd;
            let neg = (-slope).max(0.0);
            dd * neg * neg
        })
        .sum())
}

/// `∫ (γ''(d))² dd` from samples of `γ` on a uniform grid.
pub fn smoothness_penalty_samples(grid: &[f64], values: &[f64]) -> Result<f64> {
    if grid.len() < 3 || grid.len() != values.len() {
        return Err(invalid("depth_grid", "need at least 3 points with one value each"));
    }
    let step = grid[1] - grid[0];
    if !(step > 0.0) {
        return Err(invalid("depth_grid", "must be strictly increasing"));
    }
    let uniform = grid
        .windows(2)
        .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.max(grid[grid.len() - 1].abs()));
    if !uniform {
        return Err(invalid("depth_grid", "must be uniformly spaced"));
    }
    Ok(values
        .windows(3)
        .map(|v| {
            let second = (v[2] - 2.0 * v[1] + v[0]) / (step * step);
            step * second * second
        })
        .sum())
}

pub fn monotonicity_penalty(params: &RegularizerParams, depth_grid: &[f64]) -> Result<f64> {
    let values: Vec<f64> = depth_grid.iter().map(|&d| params.gamma(d)).collect();
    monotonicity_penalty_samples(depth_grid, &values)
}

pub fn smoothness_penalty(params: &RegularizerParams, depth_grid: &[f64]) -> Result<f64> {
    let values: Vec<f64> = depth_grid.iter().map(|&d| params.gamma(d)).collect();
    smoothness_penalty_samples(depth_grid, &values)
}
