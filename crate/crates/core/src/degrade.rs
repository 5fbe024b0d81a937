//! Depth-dependent degradation operator `K_D` and its exact adjoint.
//!
//! The operator is realized as a bank of point-spread functions sampled at
//! `B` depth-bin centers. Each pixel blends the blurred images of its two
//! neighbouring bins with triangular (hat) weights, then the result is block
//! averaged down by the scale factor:
//!
//! ```text
//! K_D u = downsample( Σ_b m_b ⊙ (k_b * u), s )
//! K_D* v = Σ_b k_b^T ( m_b ⊙ upsample_adjoint(v, s) )
//! ```
//!
//! The PSF of each bin is the inverse transform of the symbol
//! `σ0(|ξ|) · exp(-β(|ξ|) d)` with a Gaussian sensor response and a
//! homogeneous Rayleigh attenuation `β(|ξ|) ∝ |ξ|⁴`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::field::{
    convolve_padded_at, downsample, fold_padded, idft2_complex, mirror_pad, scatter_padded_at, upsample_adjoint,
    ComplexField,
    FrequencyGrid, Kernel, ScalarField,
};

/// Scale factors accepted by the degradation model.
pub const SUPPORTED_SCALES: [usize; 4] = [1, 2, 4, 8];

/// Largest PSF radius retained after truncation.
pub const MAX_PSF_RADIUS: usize = 15;

/// Fraction of absolute kernel mass the truncated PSF must keep.
pub const PSF_MASS_FRACTION: f64 = 0.999;

/// Side of the frequency grid the PSFs are synthesized on.
const PSF_SYNTHESIS_SIDE: usize = 64;

pub const DEFAULT_NUM_BINS: usize = 8;

/// Homogeneous-atmosphere and sensor parameters.
///
/// `wavelength` normalizes the spatial frequency inside the Rayleigh term;
/// with frequencies in cycles per meter on the scene, the defaults give a
/// moderate far-field blur at unit pixel pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct AtmosphereParams {
    /// Gaussian sensor response scale `r0` (meters).
    pub aperture_scale: f64,
    /// Scattering strength multiplier (per meter).
    pub beta0: f64,
    pub wavelength: f64,
    pub refractive_index: f64,
    pub particle_density: f64,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for AtmosphereParams {
    fn default() -> Self {
        Self {
            aperture_scale: 2.0,
            beta0: 0.05,
            wavelength: 1.0,
            refractive_index: 1.5,
            particle_density: 1.0,
            noise_sigma: 0.01,
            rng_seed: 0,
        }
    }
}

impl AtmosphereParams {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be finite and >= 0, got {v}")))
            }
        };
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be finite and > 0, got {v}")))
            }
        };
        positive("aperture_scale", self.aperture_scale)?;
        finite_nonneg("beta0", self.beta0)?;
        positive("wavelength", self.wavelength)?;
        if !(self.refractive_index.is_finite() && self.refractive_index > 1.0) {
            return Err(invalid(
                "refractive_index",
                format!("must be > 1, got {}", self.refractive_index),
            ));
        }
        finite_nonneg("particle_density", self.particle_density)?;
        finite_nonneg("noise_sigma", self.noise_sigma)?;
        Ok(())
    }

    /// Coefficient `c` of the homogeneous attenuation `β(|ξ|) = c · |ξ|⁴`.
    pub fn rayleigh_coefficient(&self) -> f64 {
        let n2 = self.refractive_index * self.refractive_index;
        let polarizability = (n2 - 1.0) / (n2 + 2.0);
        self.beta0 * (8.0 * PI.powi(3) / 3.0) * polarizability * polarizability * self.particle_density
            / self.wavelength.powi(4)
    }

    /// `β(|ξ|)`, per meter of path.
    pub fn attenuation(&self, xi_mag: f64) -> f64 {
        self.rayleigh_coefficient() * xi_mag.powi(4)
    }

    /// Baseline sensor response `σ0(|ξ|) = exp(-(|ξ| r0)² / 2)`.
    pub fn sensor_response(&self, xi_mag: f64) -> f64 {
        let t = xi_mag * self.aperture_scale;
        (-0.5 * t * t).exp()
    }

    /// Peak symbol value `σ0(0)`.
    pub fn peak_response(&self) -> f64 {
        self.sensor_response(0.0)
    }

    fn symbol_unchecked(&self, xi_mag: f64, depth: f64) -> f64 {
        self.sensor_response(xi_mag) * (-self.attenuation(xi_mag) * depth).exp()
    }
}

/// `|σ(ξ, d)| = σ0(|ξ|) · exp(-β(|ξ|) · d)`.
pub fn symbol_magnitude(xi_mag: f64, depth: f64, atmosphere: &AtmosphereParams) -> Result<f64> {
    if !(xi_mag >= 0.0 && xi_mag.is_finite()) {
        return Err(invalid("xi_mag", format!("must be finite and >= 0, got {xi_mag}")));
    }
    if !(depth >= 0.0 && depth.is_finite()) {
        return Err(invalid("depth", format!("must be finite and >= 0, got {depth}")));
    }
    Ok(atmosphere.symbol_unchecked(xi_mag, depth))
}

/// Synthesizes the PSF of a given depth on a `side × side` frequency grid,
/// centred at offset zero, before truncation.
fn synthesize_psf(atmosphere: &AtmosphereParams, depth: f64, pixel_pitch: f64) -> Vec<f64> {
    let side = PSF_SYNTHESIS_SIDE;
    let grid = FrequencyGrid::new(side, side, pixel_pitch).expect("valid synthesis grid");
    let spec = ComplexField {
        width: side,
        height: side,
        data: grid
            .radial_map()
            .into_iter()
            .map(|xi| Complex64::new(atmosphere.symbol_unchecked(xi, depth), 0.0))
            .collect(),
    };
    // unitary inverse carries 1/side; the kernel needs 1/side².
    let scale = 1.0 / side as f64;
    idft2_complex(&spec).data.iter().map(|c| c.re * scale).collect()
}

fn wrapped_tap(full: &[f64], dx: isize, dy: isize) -> f64 {
    let side = PSF_SYNTHESIS_SIDE as isize;
    let x = dx.rem_euclid(side) as usize;
    let y = dy.rem_euclid(side) as usize;
    full[y * PSF_SYNTHESIS_SIDE + x]
}

fn mass_radius(full: &[f64]) -> usize {
    let total: f64 = full.iter().map(|v| v.abs()).sum();
    let mut captured = 0.0;
    for r in 0..=MAX_PSF_RADIUS as isize {
        captured = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                captured += wrapped_tap(full, dx, dy).abs();
            }
        }
        if captured >= PSF_MASS_FRACTION * total {
            return r as usize;
        }
    }
    let _ = captured;
    MAX_PSF_RADIUS
}

fn truncate_psf(full: &[f64], radius: usize, dc_gain: f64) -> Kernel {
    let r = radius as isize;
    let mut k = Kernel::zeros(radius);
    let side = k.side();
    for dy in -r..=r {
        for dx in -r..=r {
            k.taps_mut()[((dy + r) as usize) * side + (dx + r) as usize] = wrapped_tap(full, dx, dy);
        }
    }
    let sum = k.sum();
    let gain = dc_gain / sum;
    k.taps_mut().iter_mut().for_each(|v| *v *= gain);
    k
}

/// Discretized `K_D`.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationModel {
    atmosphere: AtmosphereParams,
    depth_bins: Vec<f64>,
    psf_bank: Vec<Kernel>,
    scale: usize,
    kernel_radius: usize,
    hr_dims: (usize, usize),
    pixel_pitch: f64,
}

/// Hat-function weights of a depth over the bin centers: at most two
/// non-zero entries `(bin, weight)` summing to one.
pub fn hat_weights(centers: &[f64], depth: f64) -> [(usize, f64); 2] {
    let last = centers.len() - 1;
    if depth <= centers[0] {
        return [(0, 1.0), (0, 0.0)];
    }
    if depth >= centers[last] {
        return [(last, 1.0), (last, 0.0)];
    }
    // centers strictly increasing: first index with centers[i+1] > depth
    let i = centers.partition_point(|&c| c <= depth) - 1;
    let t = (depth - centers[i]) / (centers[i + 1] - centers[i]);
    [(i, 1.0 - t), (i + 1, t)]
}

/// Bin centers spanning `[min, max]` uniformly. A degenerate range is
/// spread by a relative epsilon so centers stay strictly increasing while
/// every depth still maps onto the first bin.
pub fn uniform_bins(min: f64, max: f64, count: usize) -> Vec<f64> {
    let span = max - min;
    let step = if span > 1e-12 * max.abs().max(1.0) {
        span / (count - 1) as f64
    } else {
        1e-6 * min.abs().max(1e-3)
    };
    (0..count).map(|b| min + b as f64 * step).collect()
}

impl DegradationModel {
    /// Builds the binned PSF bank for a high-resolution depth map.
    pub fn build(
        atmosphere: &AtmosphereParams,
        depth_map: &ScalarField,
        num_bins: usize,
        scale: usize,
    ) -> Result<Self> {
        atmosphere.validate()?;
        if num_bins < 2 {
            return Err(invalid("num_bins", format!("must be at least 2, got {num_bins}")));
        }
        if !SUPPORTED_SCALES.contains(&scale) {
            return Err(invalid("scale", format!("must be one of 1, 2, 4, 8; got {scale}")));
        }
        let (w, h) = depth_map.dims();
        if w % scale != 0 || h % scale != 0 {
            return Err(Error::NotDivisible {
                width: w,
                height: h,
                scale,
            });
        }
        let dmin = depth_map.min_value();
        if dmin <= 0.0 {
            return Err(invalid("depth_map", format!("depths must be > 0, found {dmin}")));
        }
        let depth_bins = uniform_bins(dmin, depth_map.max_value(), num_bins);
        let pitch = depth_map.pixel_pitch();
        let full: Vec<Vec<f64>> = depth_bins
            .iter()
            .map(|&d| synthesize_psf(atmosphere, d, pitch))
            .collect();
        let kernel_radius = full.iter().map(|f| mass_radius(f)).max().unwrap_or(0);
        let psf_bank: Vec<Kernel> = full
            .iter()
            .zip(&depth_bins)
            .map(|(f, &d)| truncate_psf(f, kernel_radius, atmosphere.symbol_unchecked(0.0, d)))
            .collect();
        Ok(Self {
            atmosphere: atmosphere.clone(),
            depth_bins,
            psf_bank,
            scale,
            kernel_radius,
            hr_dims: (w, h),
            pixel_pitch: pitch,
        })
    }

    /// Assembles a model from explicit kernels (all of the same radius).
    pub fn from_parts(
        atmosphere: AtmosphereParams,
        depth_bins: Vec<f64>,
        psf_bank: Vec<Kernel>,
        scale: usize,
        hr_dims: (usize, usize),
        pixel_pitch: f64,
    ) -> Result<Self> {
        if depth_bins.is_empty() || depth_bins.len() != psf_bank.len() {
            return Err(invalid("psf_bank", "one kernel per depth bin required"));
        }
        if depth_bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("depth_bins", "must be strictly increasing"));
        }
        if scale == 0 || hr_dims.0 % scale != 0 || hr_dims.1 % scale != 0 {
            return Err(Error::NotDivisible {
                width: hr_dims.0,
                height: hr_dims.1,
                scale,
            });
        }
        let kernel_radius = psf_bank[0].radius();
        if psf_bank.iter().any(|k| k.radius() != kernel_radius) {
            return Err(invalid("psf_bank", "kernels must share one radius"));
        }
        Ok(Self {
            atmosphere,
            depth_bins,
            psf_bank,
            scale,
            kernel_radius,
            hr_dims,
            pixel_pitch,
        })
    }

    pub fn atmosphere(&self) -> &AtmosphereParams {
        &self.atmosphere
    }

    pub fn depth_bins(&self) -> &[f64] {
        &self.depth_bins
    }

    pub fn psf_bank(&self) -> &[Kernel] {
        &self.psf_bank
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn kernel_radius(&self) -> usize {
        self.kernel_radius
    }

    pub fn hr_dims(&self) -> (usize, usize) {
        self.hr_dims
    }

    pub fn lr_dims(&self) -> (usize, usize) {
        (self.hr_dims.0 / self.scale, self.hr_dims.1 / self.scale)
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    /// Symbol magnitude at a depth under this model's atmosphere.
    pub fn symbol(&self, xi_mag: f64, depth: f64) -> f64 {
        self.atmosphere.symbol_unchecked(xi_mag, depth)
    }

    pub fn bin_weights(&self, depth: f64) -> [(usize, f64); 2] {
        hat_weights(&self.depth_bins, depth)
    }

    /// Per-bin weight maps `m_b`.
    pub fn weight_maps(&self, depth_map: &ScalarField) -> Vec<ScalarField> {
        let mut maps = vec![depth_map.like(vec![0.0; depth_map.len()]); self.depth_bins.len()];
        for (i, &d) in depth_map.data().iter().enumerate() {
            for (b, m) in self.bin_weights(d) {
                maps[b].data_mut()[i] += m;
            }
        }
        maps
    }

    fn check_hr(&self, u: &ScalarField, depth_map: &ScalarField) -> Result<()> {
        if u.dims() != self.hr_dims {
            return Err(Error::DimensionMismatch {
                expected: self.hr_dims,
                actual: u.dims(),
            });
        }
        if depth_map.dims() != self.hr_dims {
            return Err(Error::DimensionMismatch {
                expected: self.hr_dims,
                actual: depth_map.dims(),
            });
        }
        Ok(())
    }

    /// The depth-blended blur `Σ_b m_b ⊙ (k_b * u)` on the high-resolution grid.
    pub fn blur(&self, u: &ScalarField, depth_map: &ScalarField) -> Result<ScalarField> {
        self.check_hr(u, depth_map)?;
        let (w, _) = u.dims();
        let pad = self.kernel_radius;
        let pw = w + 2 * pad;
        let padded = mirror_pad(u, pad);
        let flipped: Vec<Kernel> = self.psf_bank.iter().map(Kernel::flipped).collect();
        let mut out = vec![0.0; u.len()];
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (b, m) in self.bin_weights(depth_map.get(x, y)) {
                    if m != 0.0 {
                        acc += m * convolve_padded_at(&padded, pw, pad, &flipped[b], x, y);
                    }
                }
                *o = acc;
            }
        });
        Ok(u.like(out))
    }

    /// Transpose of [`Self::blur`].
    pub fn blur_adjoint(&self, v: &ScalarField, depth_map: &ScalarField) -> Result<ScalarField> {
        self.check_hr(v, depth_map)?;
        let dims = v.dims();
        let (w, h) = dims;
        let pad = self.kernel_radius;
        let pw = w + 2 * pad;
        let weights: Vec<[(usize, f64); 2]> = depth_map.data().iter().map(|&d| self.bin_weights(d)).collect();
        let per_bin: Vec<Option<Vec<f64>>> = (0..self.depth_bins.len())
            .into_par_iter()
            .map(|b| {
                let flipped = self.psf_bank[b].flipped();
                let mut acc = vec![0.0; pw * (h + 2 * pad)];
                let mut touched = false;
                for y in 0..h {
                    for x in 0..w {
                        for &(bb, m) in &weights[y * w + x] {
                            if bb == b && m != 0.0 {
                                let z = m * v.data()[y * w + x];
                                if z != 0.0 {
                                    scatter_padded_at(&mut acc, pw, pad, &flipped, x, y, z);
                                    touched = true;
                                }
                            }
                        }
                    }
                }
                touched.then_some(acc)
            })
            .collect();
        let mut total = vec![0.0; pw * (h + 2 * pad)];
        for acc in per_bin.into_iter().flatten() {
            for (t, o) in total.iter_mut().zip(acc) {
                *t += o;
            }
        }
        Ok(v.like(fold_padded(&total, dims, pad)))
    }

    /// `K_D u` (noise-free).
    pub fn apply(&self, u: &ScalarField, depth_map: &ScalarField) -> Result<ScalarField> {
        downsample(&self.blur(u, depth_map)?, self.scale)
    }

    /// `K_D* v`, the exact adjoint of [`Self::apply`].
    pub fn apply_adjoint(&self, v: &ScalarField, depth_map: &ScalarField) -> Result<ScalarField> {
        let lr = self.lr_dims();
        if v.dims() != lr {
            return Err(Error::DimensionMismatch {
                expected: lr,
                actual: v.dims(),
            });
        }
        let up = upsample_adjoint(v, self.scale)?;
        self.blur_adjoint(&up, depth_map)
    }
}

/// Adds i.i.d. Gaussian noise; identical seeds give bitwise-identical output.
pub fn add_noise(u: &ScalarField, noise_sigma: f64, rng_seed: u64) -> Result<ScalarField> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(invalid("noise_sigma", format!("must be finite and >= 0, got {noise_sigma}")));
    }
    if noise_sigma == 0.0 {
        return Ok(u.clone());
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| invalid("noise_sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(u.map(|v| {
        let noisy = v + normal.sample(&mut rng);
        if noisy.is_finite() {
            noisy
        } else {
            v
        }
    }))
}

/// Full synthetic observation `K_D u + η`, using the atmosphere's noise level and seed.
pub fn observe(model: &DegradationModel, u: &ScalarField, depth_map: &ScalarField) -> Result<ScalarField> {
    let clean = model.apply(u, depth_map)?;
    add_noise(&clean, model.atmosphere.noise_sigma, model.atmosphere.rng_seed)
}
