//! Flat `key = value` run configuration.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use distvar_core::degrade::{AtmosphereParams, DEFAULT_NUM_BINS};
use distvar_core::kernels::{DEFAULT_ANCHORS, DEFAULT_KERNEL_SIZE, DEFAULT_LIPSCHITZ};
use distvar_core::regularize::RegularizerParams;
use distvar_core::scenes::{DEFAULT_SCENE_SIZE, DEFAULT_SUITE_SIZE};
use distvar_core::solver::{CalibrationConfig, Coordinate, Initialization, RegularizationMode, SolverConfig};
use distvar_core::spectral::{SignalPsd, SpectralParams};
use distvar_core::Error as CoreError;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: key `{}`: {}", self.key, self.message),
            None => write!(f, "config key `{}`: {}", self.key, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Benchmark variants, in the order they appear in the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Bilinear,
    Wiener,
    NoFlow,
    Full,
    ConstantG,
    Bank,
    Spectral,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Bilinear,
        Variant::Wiener,
        Variant::NoFlow,
        Variant::Full,
        Variant::ConstantG,
        Variant::Bank,
        Variant::Spectral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bilinear => "bilinear",
            Variant::Wiener => "wiener",
            Variant::NoFlow => "no_flow",
            Variant::Full => "full",
            Variant::ConstantG => "constant_g",
            Variant::Bank => "bank",
            Variant::Spectral => "spectral",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub atmosphere: AtmosphereParams,
    pub scale: usize,
    pub num_bins: usize,
    pub pixel_pitch: f64,
    pub regularizer: RegularizerParams,
    pub solver: SolverConfig,
    /// `None` keeps the atmosphere-derived default.
    pub epsilon: Option<f64>,
    pub alpha: f64,
    pub signal_psd: SignalPsd,
    pub noise_psd: Option<f64>,
    pub kernel_bank: Option<PathBuf>,
    pub bank_anchors: usize,
    pub bank_kernel_size: usize,
    pub bank_lipschitz: f64,
    pub bank_fit_iterations: usize,
    pub calibration: CalibrationConfig,
    pub hr_image: Option<PathBuf>,
    pub lr_image: Option<PathBuf>,
    pub depth_map: Option<PathBuf>,
    /// Meters per unit of an integer depth image.
    pub depth_scale: f64,
    pub dataset_dir: Option<PathBuf>,
    pub synthetic: bool,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub variants: Vec<Variant>,
    pub shave: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            atmosphere: AtmosphereParams::default(),
            scale: 2,
            num_bins: DEFAULT_NUM_BINS,
            pixel_pitch: 1.0,
            regularizer: RegularizerParams::default(),
            solver: SolverConfig::default(),
            epsilon: None,
            alpha: 0.8,
            signal_psd: SignalPsd::default(),
            noise_psd: None,
            kernel_bank: None,
            bank_anchors: DEFAULT_ANCHORS,
            bank_kernel_size: DEFAULT_KERNEL_SIZE,
            bank_lipschitz: DEFAULT_LIPSCHITZ,
            bank_fit_iterations: 50,
            calibration: CalibrationConfig::default(),
            hr_image: None,
            lr_image: None,
            depth_map: None,
            depth_scale: 1.0,
            dataset_dir: None,
            synthetic: false,
            synthetic_count: DEFAULT_SUITE_SIZE,
            synthetic_size: DEFAULT_SCENE_SIZE,
            variants: vec![Variant::Bilinear, Variant::Wiener, Variant::Full, Variant::ConstantG],
            shave: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "scale",
    "num_bins",
    "pixel_pitch",
    "aperture_scale",
    "beta0",
    "wavelength",
    "refractive_index",
    "particle_density",
    "noise_sigma",
    "lambda",
    "mu",
    "d0",
    "gamma0",
    "gamma1",
    "d1",
    "sigma_r0",
    "d_sigma",
    "h_mid",
    "h_width",
    "iterations",
    "tau0",
    "backtrack",
    "max_halvings",
    "lambda_schedule",
    "mode",
    "stop_tol",
    "init",
    "epsilon",
    "alpha",
    "signal_psd_amplitude",
    "signal_psd_exponent",
    "signal_psd_offset",
    "noise_psd",
    "kernel_bank",
    "bank_anchors",
    "bank_kernel_size",
    "bank_lipschitz",
    "bank_fit_iterations",
    "calib_alpha",
    "calib_beta",
    "calib_coordinates",
    "calib_sweeps",
    "calib_grid_points",
    "calib_golden_iterations",
    "calib_iterations",
    "hr_image",
    "lr_image",
    "depth_map",
    "depth_scale",
    "dataset_dir",
    "synthetic",
    "synthetic_count",
    "synthetic_size",
    "variants",
    "shave",
    "out_dir",
];

fn parse_mode(s: &str) -> Option<RegularizationMode> {
    match s {
        "analytic" => Some(RegularizationMode::Analytic),
        "bank" => Some(RegularizationMode::Bank),
        _ => None,
    }
}

pub fn parse_mode_arg(s: &str) -> Result<RegularizationMode, String> {
    parse_mode(s).ok_or_else(|| format!("unknown mode `{s}` (expected analytic or bank)"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            key: "config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError {
                    line: Some(line_no),
                    key: content.to_string(),
                    message: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let err = |message: String| ConfigError {
                line: Some(line_no),
                key: key.to_string(),
                message,
            };
            if !KEYS.contains(&key) {
                return Err(err("unknown key".into()));
            }
            if let Some(prev) = lines.insert(key.to_string(), line_no) {
                return Err(err(format!("duplicate key (first set on line {prev})")));
            }
            cfg.apply(key, value, base).map_err(err)?;
        }
        cfg.validate_with(&lines)?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, base: &Path) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse::<T>().map_err(|_| format!("cannot parse `{v}` as a number"))
        }
        fn boolean(v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("expected true or false, got `{v}`")),
            }
        }
        let path = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let list = |v: &str| -> Vec<String> {
            v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
        };
        let a = &mut self.atmosphere;
        let r = &mut self.regularizer;
        let s = &mut self.solver;
        match key {
            "seed" => a.rng_seed = num(value)?,
            "scale" => self.scale = num(value)?,
            "num_bins" => self.num_bins = num(value)?,
            "pixel_pitch" => self.pixel_pitch = num(value)?,
            "aperture_scale" => a.aperture_scale = num(value)?,
            "beta0" => a.beta0 = num(value)?,
            "wavelength" => a.wavelength = num(value)?,
            "refractive_index" => a.refractive_index = num(value)?,
            "particle_density" => a.particle_density = num(value)?,
            "noise_sigma" => a.noise_sigma = num(value)?,
            "lambda" => r.lambda = num(value)?,
            "mu" => r.mu = num(value)?,
            "d0" => r.d0 = num(value)?,
            "gamma0" => r.gamma0 = num(value)?,
            "gamma1" => r.gamma1 = num(value)?,
            "d1" => r.d1 = num(value)?,
            "sigma_r0" => r.sigma_r0 = num(value)?,
            "d_sigma" => r.d_sigma = num(value)?,
            "h_mid" => r.h_mid = num(value)?,
            "h_width" => r.h_width = num(value)?,
            "iterations" => s.iterations = num(value)?,
            "tau0" => s.tau0 = num(value)?,
            "backtrack" => s.backtrack = num(value)?,
            "max_halvings" => s.max_halvings = num(value)?,
            "lambda_schedule" => {
                s.lambda_schedule = list(value).iter().map(|v| num(v)).collect::<Result<_, _>>()?;
            }
            "mode" => s.mode = parse_mode_arg(value)?,
            "stop_tol" => s.stop_tol = num(value)?,
            "init" => {
                s.init = match value {
                    "bilinear" => Initialization::Bilinear,
                    "wiener" => Initialization::Wiener,
                    _ => return Err(format!("expected bilinear or wiener, got `{value}`")),
                }
            }
            "epsilon" => self.epsilon = Some(num(value)?),
            "alpha" => self.alpha = num(value)?,
            "signal_psd_amplitude" => self.signal_psd.amplitude = num(value)?,
            "signal_psd_exponent" => self.signal_psd.exponent = num(value)?,
            "signal_psd_offset" => self.signal_psd.offset = num(value)?,
            "noise_psd" => self.noise_psd = Some(num(value)?),
            "kernel_bank" => self.kernel_bank = Some(path(value)),
            "bank_anchors" => self.bank_anchors = num(value)?,
            "bank_kernel_size" => self.bank_kernel_size = num(value)?,
            "bank_lipschitz" => self.bank_lipschitz = num(value)?,
            "bank_fit_iterations" => self.bank_fit_iterations = num(value)?,
            "calib_alpha" => self.calibration.alpha = num(value)?,
            "calib_beta" => self.calibration.beta = num(value)?,
            "calib_coordinates" => {
                self.calibration.coordinates = list(value)
                    .iter()
                    .map(|name| {
                        Coordinate::parse(name)
                            .map(|c| (c, c.default_bounds()))
                            .ok_or_else(|| format!("unknown coordinate `{name}`"))
                    })
                    .collect::<Result<_, _>>()?;
            }
            "calib_sweeps" => self.calibration.sweeps = num(value)?,
            "calib_grid_points" => self.calibration.grid_points = num(value)?,
            "calib_golden_iterations" => self.calibration.golden_iterations = num(value)?,
            "calib_iterations" => self.calibration.solver.iterations = num(value)?,
            "hr_image" => self.hr_image = Some(path(value)),
            "lr_image" => self.lr_image = Some(path(value)),
            "depth_map" => self.depth_map = Some(path(value)),
            "depth_scale" => self.depth_scale = num(value)?,
            "dataset_dir" => self.dataset_dir = Some(path(value)),
            "synthetic" => self.synthetic = boolean(value)?,
            "synthetic_count" => self.synthetic_count = num(value)?,
            "synthetic_size" => self.synthetic_size = num(value)?,
            "variants" => {
                self.variants = list(value)
                    .iter()
                    .map(|v| Variant::parse(v).ok_or_else(|| format!("unknown variant `{v}`")))
                    .collect::<Result<_, _>>()?;
            }
            "shave" => self.shave = num(value)?,
            "out_dir" => self.out_dir = path(value),
            _ => unreachable!("key list and match arms disagree on `{key}`"),
        }
        Ok(())
    }

    pub fn spectral(&self) -> SpectralParams {
        let mut p = SpectralParams::for_atmosphere(&self.atmosphere);
        if let Some(e) = self.epsilon {
            p.epsilon = e;
        }
        p.alpha = self.alpha;
        p.signal_psd = self.signal_psd;
        if let Some(n) = self.noise_psd {
            p.noise_psd = n;
        }
        p
    }

    /// Re-checks every numeric constraint; errors name the key and, when the
    /// key came from the file, its line.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(&HashMap::new())
    }

    fn validate_with(&self, lines: &HashMap<String, usize>) -> Result<(), ConfigError> {
        let fail = |key: &str, message: String| ConfigError {
            line: lines.get(key).copied(),
            key: key.to_string(),
            message,
        };
        let core = |e: CoreError| match e {
            CoreError::InvalidParameter { name, reason } => fail(name, reason),
            other => fail("config", other.to_string()),
        };
        self.atmosphere.validate().map_err(core)?;
        self.regularizer.validate().map_err(core)?;
        self.solver.validate().map_err(core)?;
        self.spectral().validate().map_err(core)?;
        if ![2, 4, 8].contains(&self.scale) {
            return Err(fail("scale", format!("must be 2, 4 or 8, got {}", self.scale)));
        }
        if self.num_bins < 2 {
            return Err(fail("num_bins", format!("must be at least 2, got {}", self.num_bins)));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return Err(fail("pixel_pitch", format!("must be > 0, got {}", self.pixel_pitch)));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(fail("depth_scale", format!("must be > 0, got {}", self.depth_scale)));
        }
        if self.bank_anchors < 1 {
            return Err(fail("bank_anchors", "must be at least 1".into()));
        }
        if self.bank_kernel_size < 3 || self.bank_kernel_size % 2 == 0 {
            return Err(fail("bank_kernel_size", format!("must be odd and >= 3, got {}", self.bank_kernel_size)));
        }
        if !(self.bank_lipschitz > 0.0 && self.bank_lipschitz.is_finite()) {
            return Err(fail("bank_lipschitz", format!("must be > 0, got {}", self.bank_lipschitz)));
        }
        if self.calibration.grid_points < 1 {
            return Err(fail("calib_grid_points", "must be at least 1".into()));
        }
        if self.calibration.coordinates.is_empty() {
            return Err(fail("calib_coordinates", "must name at least one coordinate".into()));
        }
        if !(self.calibration.alpha >= 0.0) {
            return Err(fail("calib_alpha", "must be >= 0".into()));
        }
        if !(self.calibration.beta >= 0.0) {
            return Err(fail("calib_beta", "must be >= 0".into()));
        }
        if self.synthetic_count < 1 {
            return Err(fail("synthetic_count", "must be at least 1".into()));
        }
        if self.synthetic_size < 16 || self.synthetic_size % 8 != 0 {
            return Err(fail("synthetic_size", format!("must be a multiple of 8 and >= 16, got {}", self.synthetic_size)));
        }
        if self.variants.is_empty() {
            return Err(fail("variants", "must name at least one variant".into()));
        }
        Ok(())
    }
}
