//! Per-depth spectral limits and band-limited Wiener reconstruction.

use rustfft::num_complex::Complex64;

use crate::degrade::{AtmosphereParams, DegradationModel};
use crate::error::{invalid, Error, Result};
use crate::field::{dft2, idft2, upsample_bilinear, ComplexField, FrequencyGrid, ScalarField};

/// Power-law signal spectrum `S_u(|ξ|) = amplitude / (|ξ|^exponent + offset)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalPsd {
    pub amplitude: f64,
    pub exponent: f64,
    pub offset: f64,
}

impl Default for SignalPsd {
    fn default() -> Self {
        Self {
            amplitude: 1e-4,
            exponent: 2.0,
            offset: 1e-3,
        }
    }
}

impl SignalPsd {
    pub fn at(&self, xi_mag: f64) -> f64 {
        self.amplitude / (xi_mag.powf(self.exponent) + self.offset)
    }
}

/// Inputs of the spectral analysis: threshold, safety factor and spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralParams {
    /// Noise threshold `ε`.
    pub epsilon: f64,
    /// Safety factor `α ∈ (0, 1)`.
    pub alpha: f64,
    pub signal_psd: SignalPsd,
    /// Flat noise spectrum `S_η` under the unitary DFT.
    pub noise_psd: f64,
}

impl SpectralParams {
    /// Defaults tied to an atmosphere: `ε = 0.01 σ0(0)`, `S_η = noise_sigma²`.
    pub fn for_atmosphere(atmosphere: &AtmosphereParams) -> Self {
        Self {
            epsilon: 0.01 * atmosphere.peak_response(),
            alpha: 0.8,
            signal_psd: SignalPsd::default(),
            noise_psd: atmosphere.noise_sigma * atmosphere.noise_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid("epsilon", format!("must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        let psd = &self.signal_psd;
        if !(psd.amplitude > 0.0 && psd.amplitude.is_finite()) {
            return Err(invalid("signal_psd_amplitude", "must be > 0"));
        }
        if !(psd.exponent >= 0.0 && psd.exponent.is_finite()) {
            return Err(invalid("signal_psd_exponent", "must be >= 0"));
        }
        if !(psd.offset > 0.0 && psd.offset.is_finite()) {
            return Err(invalid("signal_psd_offset", "must be > 0"));
        }
        if !(self.noise_psd >= 0.0 && self.noise_psd.is_finite()) {
            return Err(invalid("noise_psd", "must be >= 0"));
        }
        Ok(())
    }
}

/// Number of DFT bins whose symbol magnitude exceeds `ε` at depth `d`.
pub fn numerical_rank(model: &DegradationModel, depth: f64, epsilon: f64, grid: &FrequencyGrid) -> usize {
    grid.radial_map()
        .into_iter()
        .filter(|&xi| model.symbol(xi, depth) > epsilon)
        .count()
}

/// Closed-form cutoff `ξ_c(d) = (3 ln(σ0/ε) / (β d))^(3/4)`.
pub fn cutoff_frequency(depth: f64, sigma0_peak: f64, epsilon: f64, beta_eff: f64) -> Result<f64> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(invalid("depth", format!("must be > 0, got {depth}")));
    }
    if !(epsilon > 0.0 && epsilon < sigma0_peak) {
        return Err(invalid(
            "epsilon",
            format!("must satisfy 0 < epsilon < sigma0 ({sigma0_peak}), got {epsilon}"),
        ));
    }
    if !(beta_eff > 0.0 && beta_eff.is_finite()) {
        return Err(invalid("beta_eff", format!("must be > 0, got {beta_eff}")));
    }
    Ok((3.0 * (sigma0_peak / epsilon).ln() / (beta_eff * depth)).powf(0.75))
}

/// Cutoff used for band limiting at a depth; unbounded when the atmosphere
/// does not attenuate.
pub fn band_cutoff(atmosphere: &AtmosphereParams, depth: f64, params: &SpectralParams) -> Result<f64> {
    let beta = atmosphere.rayleigh_coefficient();
    if beta == 0.0 {
        return Ok(f64::INFINITY);
    }
    cutoff_frequency(depth, atmosphere.peak_response(), params.epsilon, beta)
}

/// Per-pixel cutoff frequency map.
pub fn cutoff_map(depth_map: &ScalarField, atmosphere: &AtmosphereParams, params: &SpectralParams) -> Result<ScalarField> {
    let beta = atmosphere.rayleigh_coefficient();
    let peak = atmosphere.peak_response();
    let mut out = Vec::with_capacity(depth_map.len());
    for &d in depth_map.data() {
        out.push(cutoff_frequency(d, peak, params.epsilon, beta)?);
    }
    Ok(depth_map.like(out))
}

/// Orthogonal projection onto `{|ξ| <= alpha * cutoff}`.
pub fn bandlimit_project(u: &ScalarField, cutoff: f64, alpha: f64) -> Result<ScalarField> {
    if !(cutoff >= 0.0) {
        return Err(invalid("cutoff", format!("must be >= 0, got {cutoff}")));
    }
    let band = alpha * cutoff;
    let grid = FrequencyGrid::for_field(u);
    let mut spec = dft2(u);
    for (c, xi) in spec.data.iter_mut().zip(grid.radial_map()) {
        if xi > band {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    Ok(idft2(&spec).with_pitch(u.pixel_pitch()))
}

/// Scalar Wiener gain `σ S_u / (σ² S_u + S_η)`; zero where both vanish.
pub fn wiener_gain(symbol: f64, signal_psd: f64, noise_psd: f64) -> f64 {
    let den = symbol * symbol * signal_psd + noise_psd;
    if den == 0.0 {
        0.0
    } else {
        symbol * signal_psd / den
    }
}

/// Band-limited Wiener response at depth `d` on the given grid.
pub fn wiener_kernel(
    model: &DegradationModel,
    depth: f64,
    params: &SpectralParams,
    grid: &FrequencyGrid,
) -> Result<ComplexField> {
    let band = params.alpha * band_cutoff(model.atmosphere(), depth, params)?;
    let (width, height) = grid.dims();
    let data = grid
        .radial_map()
        .into_iter()
        .map(|xi| {
            if xi <= band {
                // the symbol is real and non-negative, so σ* = σ
                let g = wiener_gain(model.symbol(xi, depth), params.signal_psd.at(xi), params.noise_psd);
                Complex64::new(g, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    Ok(ComplexField { width, height, data })
}

/// Band limit and numerical rank of one depth bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpectrum {
    pub depth: f64,
    pub rank: usize,
    pub cutoff: f64,
}

/// Spectral diagnostics for every bin of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    pub params: SpectralParams,
    pub bins: Vec<BinSpectrum>,
}

impl SpectralProfile {
    pub fn compute(model: &DegradationModel, params: &SpectralParams) -> Result<Self> {
        params.validate()?;
        let (w, h) = model.hr_dims();
        let grid = FrequencyGrid::new(w, h, model.pixel_pitch())?;
        let bins = model
            .depth_bins()
            .iter()
            .map(|&d| {
                Ok(BinSpectrum {
                    depth: d,
                    rank: numerical_rank(model, d, params.epsilon, &grid),
                    cutoff: band_cutoff(model.atmosphere(), d, params)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: params.clone(),
            bins,
        })
    }
}

/// Output of [`wiener_restore_bins`]: the per-bin filtered images and their
/// depth-weighted blend.
#[derive(Debug, Clone)]
pub struct WienerRestoration {
    pub per_bin: Vec<Option<ScalarField>>,
    pub blended: ScalarField,
}

/// Bilinear upsampling followed by per-bin Wiener filtering, blended with the
/// model's hat weights. Bins that no pixel uses are skipped (`None`).
pub fn wiener_restore_bins(
    u0: &ScalarField,
    model: &DegradationModel,
    depth_map: &ScalarField,
    params: &SpectralParams,
) -> Result<WienerRestoration> {
    params.validate()?;
    if u0.dims() != model.lr_dims() {
        return Err(Error::DimensionMismatch {
            expected: model.lr_dims(),
            actual: u0.dims(),
        });
    }
    if depth_map.dims() != model.hr_dims() {
        return Err(Error::DimensionMismatch {
            expected: model.hr_dims(),
            actual: depth_map.dims(),
        });
    }
    let up = upsample_bilinear(u0, model.scale()).with_pitch(model.pixel_pitch());
    let (w, h) = up.dims();
    let grid = FrequencyGrid::new(w, h, model.pixel_pitch())?;
    let maps = model.weight_maps(depth_map);
    let spectrum = dft2(&up);
    let mut blended = up.like(vec![0.0; up.len()]);
    let mut per_bin = Vec::with_capacity(maps.len());
    for (b, map) in maps.iter().enumerate() {
        if map.max_abs() == 0.0 {
            per_bin.push(None);
            continue;
        }
        let gain = wiener_kernel(model, model.depth_bins()[b], params, &grid)?;
        let filtered_spec = ComplexField {
            width: w,
            height: h,
            data: spectrum.data.iter().zip(&gain.data).map(|(a, g)| a * g).collect(),
        };
        let filtered = idft2(&filtered_spec).with_pitch(model.pixel_pitch());
        for ((o, &m), &f) in blended.data_mut().iter_mut().zip(map.data()).zip(filtered.data()) {
            *o += m * f;
        }
        per_bin.push(Some(filtered));
    }
    Ok(WienerRestoration { per_bin, blended })
}

pub fn wiener_restore(
    u0: &ScalarField,
    model: &DegradationModel,
    depth_map: &ScalarField,
    params: &SpectralParams,
) -> Result<ScalarField> {
    Ok(wiener_restore_bins(u0, model, depth_map, params)?.blended)
}

/// Fraction of a field's spectral energy above a radial frequency.
pub fn energy_fraction_above(u: &ScalarField, band: f64) -> f64 {
    let grid = FrequencyGrid::for_field(u);
    let spec = dft2(u);
    let total = spec.energy();
    if total == 0.0 {
        return 0.0;
    }
    let above: f64 = spec
        .data
        .iter()
        .zip(grid.radial_map())
        .filter(|(_, xi)| *xi > band)
        .map(|(c, _)| c.norm_sqr())
        .sum();
    above / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::add_noise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(w: usize, h: usize, seed: u64) -> ScalarField {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_fn(w, h, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn cutoff_arithmetic() {
        let e = std::f64::consts::E;
        assert!((cutoff_frequency(1.0, e, 1.0, 3.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((cutoff_frequency(3.0, e, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((cutoff_frequency(48.0, e, 1.0, 1.0).unwrap() - 0.125).abs() < 1e-15);
        let a = cutoff_frequency(2.5, 1.0, 0.01, 0.3).unwrap();
        let b = cutoff_frequency(40.0, 1.0, 0.01, 0.3).unwrap();
        assert!((b / a - 0.125).abs() < 1e-15);
    }

    #[test]
    fn cutoff_domain_errors() {
        assert!(cutoff_frequency(0.0, 1.0, 0.1, 1.0).is_err());
        assert!(cutoff_frequency(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(cutoff_frequency(1.0, 1.0, 0.1, 0.0).is_err());
        assert!(cutoff_frequency(1.0, 1.0, -0.1, 1.0).is_err());
    }

    #[test]
    fn cutoff_map_examples() {
        let atm = AtmosphereParams::default();
        let params = SpectralParams::for_atmosphere(&atm);
        let c = cutoff_map(&ScalarField::filled(4, 4, 9.0), &atm, &params).unwrap();
        assert!(c.data().iter().all(|&v| v == c.data()[0]));
        let two = ScalarField::from_fn(4, 2, |x, _| if x < 2 { 3.0 } else { 48.0 });
        let m = cutoff_map(&two, &atm, &params).unwrap();
        assert!((m.get(3, 1) / m.get(0, 0) - 0.125).abs() < 1e-14);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let depth = ScalarField::from_fn(5, 5, |_, _| r.random_range(1.0..100.0));
        let m = cutoff_map(&depth, &atm, &params).unwrap();
        for (i, &d) in depth.data().iter().enumerate() {
            let expect = cutoff_frequency(d, 1.0, params.epsilon, atm.rayleigh_coefficient()).unwrap();
            assert_eq!(m.data()[i], expect);
        }
        let clear = AtmosphereParams { beta0: 0.0, ..atm };
        assert!(cutoff_map(&depth, &clear, &params).is_err());
    }

    #[test]
    fn rank_examples() {
        let depth = ScalarField::filled(8, 8, 10.0);
        let atm = AtmosphereParams::default();
        let model = DegradationModel::build(&atm, &depth, 4, 2).unwrap();
        let grid = FrequencyGrid::new(8, 8, 1.0).unwrap();
        assert_eq!(numerical_rank(&model, 10.0, 1.0, &grid), 0);
        assert_eq!(numerical_rank(&model, 10.0, 1e-300, &grid), 64);
        // counting oracle over a hand-built symbol table
        let table: Vec<f64> = grid.radial_map().iter().map(|&xi| model.symbol(xi, 10.0)).collect();
        for eps in [0.05, 0.2, 0.5, 0.9] {
            let mut count = 0;
            for v in &table {
                if *v > eps {
                    count += 1;
                }
            }
            assert_eq!(numerical_rank(&model, 10.0, eps, &grid), count);
        }
    }

    #[test]
    fn rank_monotone_in_depth() {
        let depth = ScalarField::from_fn(32, 32, |x, _| 1.0 + 3.0 * x as f64);
        let model = DegradationModel::build(&AtmosphereParams::default(), &depth, 8, 2).unwrap();
        let profile = SpectralProfile::compute(&model, &SpectralParams::for_atmosphere(model.atmosphere())).unwrap();
        for pair in profile.bins.windows(2) {
            assert!(pair[0].rank >= pair[1].rank);
            assert!(pair[0].cutoff > pair[1].cutoff);
        }
    }

    #[test]
    fn projection_properties() {
        let c = ScalarField::filled(8, 8, 0.6);
        let p = bandlimit_project(&c, 0.1, 0.8).unwrap();
        assert!(p.zip_map(&c, |a, b| a - b).unwrap().max_abs() < 1e-14);

        let tone = ScalarField::from_fn(16, 16, |x, _| (2.0 * std::f64::consts::PI * 4.0 * x as f64 / 16.0).cos());
        let p = bandlimit_project(&tone, 0.2, 0.8).unwrap();
        assert!(p.max_abs() <= 1e-12);

        let u = random_field(12, 10, 4);
        let once = bandlimit_project(&u, 0.3, 0.8).unwrap();
        let twice = bandlimit_project(&once, 0.3, 0.8).unwrap();
        assert!(once.zip_map(&twice, |a, b| a - b).unwrap().max_abs() <= 1e-12);
        // self-adjoint
        let v = random_field(12, 10, 5);
        let lhs = bandlimit_project(&u, 0.3, 0.8).unwrap().dot(&v);
        let rhs = u.dot(&bandlimit_project(&v, 0.3, 0.8).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(bandlimit_project(&u, -1.0, 0.8).is_err());
    }

    #[test]
    fn wiener_limits() {
        // noiseless: direct inverse
        for sigma in [0.05, 0.3, 1.0] {
            assert!((wiener_gain(sigma, 2.0, 0.0) - 1.0 / sigma).abs() < 1e-12 / sigma);
        }
        // high SNR: within 1% of the inverse once the ratio exceeds 100
        let sigma = 0.4;
        let su = 1.0;
        let seta = sigma * sigma * su / 101.0;
        let g = wiener_gain(sigma, su, seta);
        assert!((g * sigma - 1.0).abs() < 0.01);
        // closed-loop gain never exceeds one
        for s in [0.0, 0.1, 0.5, 1.0] {
            assert!(wiener_gain(s, 1.0, 0.01) * s <= 1.0);
        }
    }

    /// Expected MSE of a per-bin gain on a circulant problem.
    fn expected_mse(gains: &[f64], symbol: &[f64], su: &[f64], seta: f64) -> f64 {
        gains
            .iter()
            .zip(symbol)
            .zip(su)
            .map(|((g, s), p)| p * (1.0 - g * s).powi(2) + seta * g * g)
            .sum()
    }

    #[test]
    fn wiener_beats_perturbed_gains_on_circulant_toy() {
        let atm = AtmosphereParams::default();
        let params = SpectralParams {
            noise_psd: 1e-3,
            ..SpectralParams::for_atmosphere(&atm)
        };
        let d = 60.0;
        let band = params.alpha * band_cutoff(&atm, d, &params).unwrap();
        let n = 16;
        let freqs: Vec<f64> = (0..n)
            .map(|k| {
                let s = if k <= (n - 1) / 2 { k as f64 } else { k as f64 - n as f64 };
                (s / n as f64).abs()
            })
            .collect();
        let symbol: Vec<f64> = freqs.iter().map(|&f| crate::degrade::symbol_magnitude(f, d, &atm).unwrap()).collect();
        let su: Vec<f64> = freqs.iter().map(|&f| params.signal_psd.at(f)).collect();
        let gains: Vec<f64> = (0..n)
            .map(|k| {
                if freqs[k] <= band {
                    wiener_gain(symbol[k], su[k], params.noise_psd)
                } else {
                    0.0
                }
            })
            .collect();
        let best = expected_mse(&gains, &symbol, &su, params.noise_psd);
        for step in 0..=40 {
            let delta = -0.2 + 0.01 * step as f64;
            let uniform: Vec<f64> = gains.iter().map(|g| g * (1.0 + delta)).collect();
            assert!(best <= expected_mse(&uniform, &symbol, &su, params.noise_psd) + 1e-15);
            for k in 0..n {
                let mut single = gains.clone();
                single[k] *= 1.0 + delta;
                assert!(best <= expected_mse(&single, &symbol, &su, params.noise_psd) + 1e-15);
            }
        }
    }

    fn naive_dft(u: &ScalarField, inverse: bool, spec: Option<&[Complex64]>) -> Vec<Complex64> {
        let (w, h) = u.dims();
        let input: Vec<Complex64> = match spec {
            Some(s) => s.to_vec(),
            None => u.data().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        };
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut out = vec![Complex64::new(0.0, 0.0); w * h];
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ph = sign
                            * 2.0
                            * std::f64::consts::PI
                            * ((kx * x) as f64 / w as f64 + (ky * y) as f64 / h as f64);
                        acc += input[y * w + x] * Complex64::from_polar(1.0, ph);
                    }
                }
                out[ky * w + kx] = acc / ((w * h) as f64).sqrt();
            }
        }
        out
    }

    #[test]
    fn constant_depth_matches_shift_invariant_wiener() {
        let depth = ScalarField::filled(8, 8, 40.0);
        let atm = AtmosphereParams::default();
        let model = DegradationModel::build(&atm, &depth, 4, 2).unwrap();
        let params = SpectralParams::for_atmosphere(&atm);
        let u0 = random_field(4, 4, 7);
        let got = wiener_restore(&u0, &model, &depth, &params).unwrap();

        let up = upsample_bilinear(&u0, 2);
        let spec = naive_dft(&up, false, None);
        let grid = FrequencyGrid::new(8, 8, 1.0).unwrap();
        let band = params.alpha * cutoff_frequency(40.0, 1.0, params.epsilon, atm.rayleigh_coefficient()).unwrap();
        let filtered: Vec<Complex64> = spec
            .iter()
            .zip(grid.radial_map())
            .map(|(c, xi)| {
                if xi > band {
                    Complex64::new(0.0, 0.0)
                } else {
                    let s = (-0.5 * (xi * atm.aperture_scale).powi(2)).exp()
                        * (-atm.rayleigh_coefficient() * xi.powi(4) * 40.0).exp();
                    let su = params.signal_psd.at(xi);
                    c * (s * su / (s * s * su + params.noise_psd))
                }
            })
            .collect();
        let expect = naive_dft(&up, true, Some(&filtered));
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e.re).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_degradation_returns_bilinear() {
        let depth = ScalarField::filled(8, 8, 5.0);
        let atm = AtmosphereParams {
            aperture_scale: 1e-12,
            beta0: 0.0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let model = DegradationModel::build(&atm, &depth, 2, 2).unwrap();
        let params = SpectralParams::for_atmosphere(&atm);
        let u0 = random_field(4, 4, 8);
        let got = wiener_restore(&u0, &model, &depth, &params).unwrap();
        let up = upsample_bilinear(&u0, 2);
        assert!(got.zip_map(&up, |a, b| a - b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn per_bin_outputs_respect_band() {
        let depth = ScalarField::from_fn(16, 16, |x, y| 5.0 + 6.0 * (x + y) as f64);
        let atm = AtmosphereParams {
            beta0: 0.5,
            ..Default::default()
        };
        let model = DegradationModel::build(&atm, &depth, 8, 2).unwrap();
        let params = SpectralParams::for_atmosphere(&atm);
        let hr = random_field(16, 16, 9);
        let lr = add_noise(&model.apply(&hr, &depth).unwrap(), 0.01, 1).unwrap();
        let out = wiener_restore_bins(&lr, &model, &depth, &params).unwrap();
        for (b, field) in out.per_bin.iter().enumerate() {
            if let Some(f) = field {
                let band = params.alpha * band_cutoff(&atm, model.depth_bins()[b], &params).unwrap();
                assert!(energy_fraction_above(f, band) <= 1e-10);
            }
        }
    }
}
