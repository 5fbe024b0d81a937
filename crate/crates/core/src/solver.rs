//! Gradient-flow minimization of the depth-adaptive energy
//!
//! ```text
//! E[u] = ½‖K_D u − u0‖² + λ R_D[u]
//! ```
//!
//! by explicit steps `u ← u − τ (K_D*(K_D u − u0) + λ B(u, D))` with
//! backtracking, where `B` is either the exact regularizer gradient or a
//! depth-conditional kernel bank.

use std::fmt::Write as _;

use crate::degrade::{AtmosphereParams, DegradationModel};
use crate::error::{invalid, Error, Result};
use crate::field::{resize_bilinear, upsample_bilinear, ScalarField};
use crate::kernels::{apply_bank, fit_bank_to_analytic, FitConfig, KernelBank, DEFAULT_ANCHORS, DEFAULT_LIPSCHITZ};
use crate::regularize::{
    monotonicity_penalty, penalty_grid, regularizer_gradient, regularizer_value, smoothness_penalty, RegularizerParams,
    PENALTY_GRID_POINTS,
};
use crate::spectral::{wiener_restore, SpectralParams};

/// Sufficient-decrease constant of the backtracking rule.
pub const ARMIJO_C: f64 = 1e-4;

/// Largest step the adaptive schedule may grow to.
pub const MAX_TAU: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizationMode {
    Analytic,
    Bank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initialization {
    Bilinear,
    Wiener,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub iterations: usize,
    pub tau0: f64,
    pub backtrack: f64,
    pub max_halvings: usize,
    /// Per-step `λ_k`; the last entry repeats. Empty means `params.lambda`.
    pub lambda_schedule: Vec<f64>,
    pub mode: RegularizationMode,
    /// Early stop when the relative energy decrease drops below this.
    pub stop_tol: f64,
    pub init: Initialization,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iterations: 32,
            tau0: 1.0,
            backtrack: 0.5,
            max_halvings: 30,
            lambda_schedule: Vec::new(),
            mode: RegularizationMode::Analytic,
            stop_tol: 1e-7,
            init: Initialization::Bilinear,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return Err(invalid("tau0", format!("must be > 0, got {}", self.tau0)));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(invalid("backtrack", format!("must lie in (0, 1), got {}", self.backtrack)));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(invalid("stop_tol", format!("must be >= 0, got {}", self.stop_tol)));
        }
        if let Some(l) = self.lambda_schedule.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(invalid("lambda_schedule", format!("entries must be >= 0, got {l}")));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: usize, params: &RegularizerParams) -> f64 {
        match self.lambda_schedule.len() {
            0 => params.lambda,
            n => self.lambda_schedule[step.min(n - 1)],
        }
    }
}

/// Energy split into its two terms; `reg` already carries the `λ` weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    pub data: f64,
    pub reg: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.data + self.reg
    }
}

fn check_problem(u: &ScalarField, u0: &ScalarField, model: &DegradationModel, depth_map: &ScalarField) -> Result<()> {
    for (dims, expected) in [
        (u.dims(), model.hr_dims()),
        (depth_map.dims(), model.hr_dims()),
        (u0.dims(), model.lr_dims()),
    ] {
        if dims != expected {
            return Err(Error::DimensionMismatch { expected, actual: dims });
        }
    }
    Ok(())
}

fn energy_with_lambda(
    u: &ScalarField,
    u0: &ScalarField,
    model: &DegradationModel,
    depth_map: &ScalarField,
    params: &RegularizerParams,
    lambda: f64,
) -> Result<EnergyTerms> {
    check_problem(u, u0, model, depth_map)?;
    let residual = model.apply(u, depth_map)?.zip_map(u0, |a, b| a - b)?;
    let reg = if lambda == 0.0 {
        0.0
    } else {
        lambda * regularizer_value(u, depth_map, params)?
    };
    Ok(EnergyTerms {
        data: 0.5 * residual.norm_sq(),
        reg,
    })
}

fn data_gradient(
    u: &ScalarField,
    u0: &ScalarField,
    model: &DegradationModel,
    depth_map: &ScalarField,
) -> Result<ScalarField> {
    let residual = model.apply(u, depth_map)?.zip_map(u0, |a, b| a - b)?;
    model.apply_adjoint(&residual, depth_map)
}

fn gradient_with_lambda(
    u: &ScalarField,
    u0: &ScalarField,
    model: &DegradationModel,
    depth_map: &ScalarField,
    params: &RegularizerParams,
    lambda: f64,
) -> Result<ScalarField> {
    check_problem(u, u0, model, depth_map)?;
    let mut grad = data_gradient(u, u0, model, depth_map)?;
    if lambda != 0.0 {
        grad.axpy(lambda, &regularizer_gradient(u, depth_map, params)?);
    }
    Ok(grad)
}

pub fn energy(
    u: &ScalarField,
    u0: &ScalarField,
    model: &DegradationModel,
    depth_map: &ScalarField,
    params: &RegularizerParams,
) -> Result<EnergyTerms> {
    energy_with_lambda(u, u0, model, depth_map, params, params.lambda)
}

/// `K_D*(K_D u − u0) + λ ∇R_D[u]`.
pub fn energy_gradient(
    u: &ScalarField,
    u0: &ScalarField,
    model: &DegradationModel,
    depth_map: &ScalarField,
    params: &RegularizerParams,
) -> Result<ScalarField> {
    gradient_with_lambda(u, u0, model, depth_map, params, params.lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub energy: f64,
    pub data_term: f64,
    pub reg_term: f64,
    /// Accepted step; zero when backtracking was exhausted.
    pub tau: f64,
    /// `‖δE/δu‖` at the new iterate.
    pub el_residual: f64,
    /// `‖(u⁺ − u)/τ + δE/δu‖²` in kernel-bank mode.
    pub consistency: Option<f64>,
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub initial: TraceRecord,
    pub records: Vec<TraceRecord>,
    pub stopped_early: bool,
}

impl SolverTrace {
    pub fn final_energy(&self) -> f64 {
        self.records.last().unwrap_or(&self.initial).energy
    }

    pub fn energies(&self) -> Vec<f64> {
        std::iter::once(self.initial.energy)
            .chain(self.records.iter().map(|r| r.energy))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,energy,data_term,reg_term,tau,el_residual,consistency_residual\n");
        for r in &self.records {
            let consistency = r.consistency.map(|c| format!("{c:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{}",
                r.iteration, r.energy, r.data_term, r.reg_term, r.tau, r.el_residual, consistency
            );
        }
        out
    }
}

/// Iterate of the flow together with cached energy and gradient.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub u: ScalarField,
    pub tau: f64,
    pub iteration: usize,
    pub energy: EnergyTerms,
    pub gradient: ScalarField,
}

impl SolverState {
    pub fn new(
        u: ScalarField,
        u0: &ScalarField,
        model: &DegradationModel,
        depth_map: &ScalarField,
        params: &RegularizerParams,
        config: &SolverConfig,
    ) -> Result<Self> {
        let lambda = config.lambda_at(0, params);
        let energy = energy_with_lambda(&u, u0, model, depth_map, params, lambda)?;
        let gradient = gradient_with_lambda(&u, u0, model, depth_map, params, lambda)?;
        Ok(Self {
            u,
            tau: config.tau0,
            iteration: 0,
            energy,
            gradient,
        })
    }

    fn record(&self, tau: f64, consistency: Option<f64>, exhausted: bool) -> TraceRecord {
        TraceRecord {
            iteration: self.iteration,
            energy: self.energy.total(),
            data_term: self.energy.data,
            reg_term: self.energy.reg,
            tau,
            el_residual: self.gradient.norm(),
            consistency,
            exhausted,
        }
    }
}

/// One backtracking step of the flow. The step is accepted when
/// `E(u − τ d) ≤ E(u) − c τ ‖d‖²`; otherwise `τ` is shrunk by the backtracking
/// factor. A fully accepted step lets the next one start from a larger `τ`.
#[allow(clippy::too_many_arguments)]
pub fn flow_step(
    state: SolverState,
    u0: &ScalarField,
    model: &DegradationModel,
    depth_map: &ScalarField,
    params: &RegularizerParams,
    config: &SolverConfig,
    bank: Option<&KernelBank>,
) -> Result<(SolverState, TraceRecord)> {
    let step = state.iteration;
    let lambda = config.lambda_at(step, params);
    let next_lambda = config.lambda_at(step + 1, params);

    // energy and gradient at the current iterate under this step's λ
    let (energy_now, grad_now) = if step == 0 || lambda == config.lambda_at(step - 1, params) {
        (state.energy, state.gradient.clone())
    } else {
        (
            energy_with_lambda(&state.u, u0, model, depth_map, params, lambda)?,
            gradient_with_lambda(&state.u, u0, model, depth_map, params, lambda)?,
        )
    };

    let direction = match config.mode {
        RegularizationMode::Analytic => grad_now.clone(),
        RegularizationMode::Bank => {
            let bank = bank.ok_or_else(|| invalid("mode", "kernel-bank mode needs a kernel bank"))?;
            let mut d = data_gradient(&state.u, u0, model, depth_map)?;
            if lambda != 0.0 {
                d.axpy(lambda, &apply_bank(bank, &state.u, depth_map)?);
            }
            d
        }
    };
    let dnorm_sq = direction.norm_sq();
    if dnorm_sq == 0.0 {
        let consistency = (config.mode == RegularizationMode::Bank).then(|| grad_now.norm_sq());
        let next = SolverState {
            iteration: step + 1,
            ..state
        };
        let rec = next.record(0.0, consistency, false);
        return Ok((next, rec));
    }

    let e0 = energy_now.total();
    let mut tau = state.tau;
    let mut accepted = None;
    for attempt in 0..=config.max_halvings {
        let mut trial = state.u.clone();
        trial.axpy(-tau, &direction);
        let e = energy_with_lambda(&trial, u0, model, depth_map, params, lambda)?;
        if e.total() <= e0 - ARMIJO_C * tau * dnorm_sq {
            accepted = Some((trial, attempt));
            break;
        }
        tau *= config.backtrack;
    }

    let (u_new, tau_taken, tau_next, exhausted) = match accepted {
        Some((u, 0)) => (u, tau, (tau / config.backtrack).min(MAX_TAU), false),
        Some((u, _)) => (u, tau, tau, false),
        None => (state.u.clone(), 0.0, state.tau, true),
    };
    let consistency = (config.mode == RegularizationMode::Bank).then(|| {
        // (u⁺ − u)/τ = −direction for a taken step, 0 for an exhausted one
        if exhausted {
            grad_now.norm_sq()
        } else {
            grad_now.zip_map(&direction, |g, d| g - d).map(|r| r.norm_sq()).unwrap_or(f64::NAN)
        }
    });
    let energy = energy_with_lambda(&u_new, u0, model, depth_map, params, next_lambda)?;
    let gradient = gradient_with_lambda(&u_new, u0, model, depth_map, params, next_lambda)?;
    let next = SolverState {
        u: u_new,
        tau: tau_next,
        iteration: step + 1,
        energy,
        gradient,
    };
    let mut rec = next.record(tau_taken, consistency, exhausted);
    if next_lambda != lambda {
        // report the step's own energy so the column compares like with like
        let e = energy_with_lambda(&next.u, u0, model, depth_map, params, lambda)?;
        rec.energy = e.total();
        rec.data_term = e.data;
        rec.reg_term = e.reg;
    }
    Ok((next, rec))
}

/// Brings a depth map to the model's high-resolution grid.
pub fn hr_depth(depth_map: &ScalarField, model: &DegradationModel) -> ScalarField {
    let (w, h) = model.hr_dims();
    if depth_map.dims() == (w, h) {
        depth_map.clone()
    } else {
        resize_bilinear(depth_map, w, h).with_pitch(model.pixel_pitch())
    }
}

pub fn initialize(
    u0: &ScalarField,
    model: &DegradationModel,
    depth_map: &ScalarField,
    init: Initialization,
) -> Result<ScalarField> {
    if u0.dims() != model.lr_dims() {
        return Err(Error::DimensionMismatch {
            expected: model.lr_dims(),
            actual: u0.dims(),
        });
    }
    match init {
        Initialization::Bilinear => Ok(upsample_bilinear(u0, model.scale()).with_pitch(model.pixel_pitch())),
        Initialization::Wiener => {
            let params = SpectralParams::for_atmosphere(model.atmosphere());
            wiener_restore(u0, model, &hr_depth(depth_map, model), &params)
        }
    }
}

/// Runs up to `config.iterations` flow steps from the configured
/// initialization. The returned image is clamped to `[0, 1]`; iterates are not.
pub fn restore(
    u0: &ScalarField,
    depth_map: &ScalarField,
    model: &DegradationModel,
    params: &RegularizerParams,
    config: &SolverConfig,
    bank: Option<&KernelBank>,
) -> Result<(ScalarField, SolverTrace)> {
    let (u, trace) = restore_unclamped(u0, depth_map, model, params, config, bank)?;
    Ok((u.clamp(0.0, 1.0), trace))
}

pub fn restore_unclamped(
    u0: &ScalarField,
    depth_map: &ScalarField,
    model: &DegradationModel,
    params: &RegularizerParams,
    config: &SolverConfig,
    bank: Option<&KernelBank>,
) -> Result<(ScalarField, SolverTrace)> {
    let init = initialize(u0, model, depth_map, config.init)?;
    restore_with_init(u0, init, depth_map, model, params, config, bank)
}

/// As [`restore_unclamped`], starting from an explicit initial iterate.
pub fn restore_with_init(
    u0: &ScalarField,
    init: ScalarField,
    depth_map: &ScalarField,
    model: &DegradationModel,
    params: &RegularizerParams,
    config: &SolverConfig,
    bank: Option<&KernelBank>,
) -> Result<(ScalarField, SolverTrace)> {
    params.validate()?;
    config.validate()?;
    if config.mode == RegularizationMode::Bank && bank.is_none() {
        return Err(invalid("mode", "kernel-bank mode needs a kernel bank"));
    }
    let depth = hr_depth(depth_map, model);
    let mut state = SolverState::new(init, u0, model, &depth, params, config)?;
    let initial = state.record(0.0, None, false);
    let mut records = Vec::with_capacity(config.iterations);
    let mut stopped_early = false;
    for _ in 0..config.iterations {
        let before = state.energy.total();
        let (next, rec) = flow_step(state, u0, model, &depth, params, config, bank)?;
        state = next;
        records.push(rec);
        let decrease = (before - rec.energy) / before.abs().max(f64::MIN_POSITIVE);
        if records.len() < config.iterations && decrease < config.stop_tol {
            stopped_early = true;
            break;
        }
    }
    Ok((
        state.u,
        SolverTrace {
            initial,
            records,
            stopped_early,
        },
    ))
}

/// Linearized bank over the depth range of `depth_map`, fitted to the
/// analytic regularizer gradient on the given sample images.
pub fn prepare_bank(
    params: &RegularizerParams,
    depth_map: &ScalarField,
    samples: &[ScalarField],
    fit: &FitConfig,
) -> Result<KernelBank> {
    let anchors = KernelBank::uniform_anchors(depth_map.min_value(), depth_map.max_value(), DEFAULT_ANCHORS);
    let bank = KernelBank::linearized(params, anchors, crate::kernels::DEFAULT_KERNEL_SIZE / 2, DEFAULT_LIPSCHITZ)?;
    if samples.is_empty() || fit.iterations == 0 {
        return Ok(bank);
    }
    let pairs: Vec<(ScalarField, ScalarField)> = samples.iter().map(|u| (u.clone(), depth_map.clone())).collect();
    Ok(fit_bank_to_analytic(&bank, &pairs, params, fit)?.0)
}

/// One calibration example.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub hr: ScalarField,
    pub lr: ScalarField,
    pub depth_map: ScalarField,
    pub model: DegradationModel,
}

impl TrainingPair {
    /// Builds the degradation model for an `(HR, LR, depth)` triple.
    pub fn new(
        hr: ScalarField,
        lr: ScalarField,
        depth_map: ScalarField,
        atmosphere: &AtmosphereParams,
        num_bins: usize,
    ) -> Result<Self> {
        if lr.width() == 0 || hr.width() % lr.width() != 0 {
            return Err(invalid("training_pair", "HR width must be a multiple of LR width"));
        }
        let scale = hr.width() / lr.width();
        let depth = if depth_map.dims() == hr.dims() {
            depth_map
        } else {
            resize_bilinear(&depth_map, hr.width(), hr.height())
        };
        let model = DegradationModel::build(atmosphere, &depth.clone().with_pitch(hr.pixel_pitch()), num_bins, scale)?;
        Ok(Self {
            hr,
            lr,
            depth_map: depth,
            model,
        })
    }
}

/// Free coordinates of the calibration search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    D0,
    D1,
    Gamma0,
    Gamma1,
    SigmaR0,
    DSigma,
    Lambda,
    Mu,
}

impl Coordinate {
    pub const ALL: [Coordinate; 8] = [
        Coordinate::D0,
        Coordinate::D1,
        Coordinate::Gamma0,
        Coordinate::Gamma1,
        Coordinate::SigmaR0,
        Coordinate::DSigma,
        Coordinate::Lambda,
        Coordinate::Mu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Coordinate::D0 => "d0",
            Coordinate::D1 => "d1",
            Coordinate::Gamma0 => "gamma0",
            Coordinate::Gamma1 => "gamma1",
            Coordinate::SigmaR0 => "sigma_r0",
            Coordinate::DSigma => "d_sigma",
            Coordinate::Lambda => "lambda",
            Coordinate::Mu => "mu",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn default_bounds(self) -> (f64, f64) {
        match self {
            Coordinate::D0 => (0.5, 200.0),
            Coordinate::D1 => (1.0, 500.0),
            Coordinate::Gamma0 => (1e-4, 1.0),
            Coordinate::Gamma1 => (1e-3, 10.0),
            Coordinate::SigmaR0 => (1e-3, 1.0),
            Coordinate::DSigma => (1.0, 500.0),
            Coordinate::Lambda => (1e-5, 1.0),
            Coordinate::Mu => (1e-4, 1.0),
        }
    }

    pub fn get(self, p: &RegularizerParams) -> f64 {
        match self {
            Coordinate::D0 => p.d0,
            Coordinate::D1 => p.d1,
            Coordinate::Gamma0 => p.gamma0,
            Coordinate::Gamma1 => p.gamma1,
            Coordinate::SigmaR0 => p.sigma_r0,
            Coordinate::DSigma => p.d_sigma,
            Coordinate::Lambda => p.lambda,
            Coordinate::Mu => p.mu,
        }
    }

    pub fn set(self, p: &mut RegularizerParams, v: f64) {
        match self {
            Coordinate::D0 => p.d0 = v,
            Coordinate::D1 => p.d1 = v,
            Coordinate::Gamma0 => p.gamma0 = v,
            Coordinate::Gamma1 => p.gamma1 = v,
            Coordinate::SigmaR0 => p.sigma_r0 = v,
            Coordinate::DSigma => p.d_sigma = v,
            Coordinate::Lambda => p.lambda = v,
            Coordinate::Mu => p.mu = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    /// Monotonicity penalty weight.
    pub alpha: f64,
    /// Smoothness penalty weight.
    pub beta: f64,
    /// Coordinates searched, with `(lower, upper)` bounds.
    pub coordinates: Vec<(Coordinate, (f64, f64))>,
    pub sweeps: usize,
    /// Log-spaced coarse grid size per coordinate.
    pub grid_points: usize,
    /// Golden-section refinement iterations around the best grid point.
    pub golden_iterations: usize,
    pub solver: SolverConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            beta: 0.01,
            coordinates: Coordinate::ALL.iter().map(|&c| (c, c.default_bounds())).collect(),
            sweeps: 1,
            grid_points: 9,
            golden_iterations: 20,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub params: RegularizerParams,
    /// Objective after the start point and after every accepted move.
    pub objective_trace: Vec<f64>,
    pub evaluations: usize,
}

/// Calibration objective: reconstruction error plus weighted penalties on `γ`.
pub fn calibration_objective(
    params: &RegularizerParams,
    pairs: &[TrainingPair],
    config: &CalibrationConfig,
) -> Result<f64> {
    if params.validate().is_err() {
        return Ok(f64::INFINITY);
    }
    let mut recon = 0.0;
    for p in pairs {
        let (sr, _) = restore(&p.lr, &p.depth_map, &p.model, params, &config.solver, None)?;
        recon += sr.zip_map(&p.hr, |a, b| a - b)?.norm_sq();
    }
    let d_max = pairs.iter().map(|p| p.depth_map.max_value()).fold(0.0, f64::max);
    let grid = penalty_grid(d_max, PENALTY_GRID_POINTS);
    let mut total = recon;
    if config.alpha != 0.0 {
        total += config.alpha * monotonicity_penalty(params, &grid)?;
    }
    if config.beta != 0.0 {
        total += config.beta * smoothness_penalty(params, &grid)?;
    }
    Ok(total)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Relative width of a calibration tie, measured against `Σ‖HR‖²`.
pub const CALIBRATION_TIE_TOL: f64 = 1e-12;

/// Coordinate search: a log-spaced grid per coordinate, refined by golden
/// section in log space. A move is accepted only if it does not raise the
/// objective by more than the tie tolerance; objectives within the tolerance
/// count as equal and resolve toward the smaller parameter value.
pub fn calibrate(
    params: &RegularizerParams,
    pairs: &[TrainingPair],
    config: &CalibrationConfig,
) -> Result<CalibrationReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("calibration needs at least one training pair"));
    }
    params.validate()?;
    if config.grid_points == 0 {
        return Err(invalid("grid_points", "must be at least 1"));
    }
    for &(c, (lo, hi)) in &config.coordinates {
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(invalid(c.name(), format!("bad search bounds [{lo}, {hi}]")));
        }
    }
    let mut evaluations = 0usize;
    let mut eval = |p: &RegularizerParams| -> Result<f64> {
        evaluations += 1;
        calibration_objective(p, pairs, config)
    };
    let tol = CALIBRATION_TIE_TOL * pairs.iter().map(|p| p.hr.norm_sq()).sum::<f64>().max(f64::MIN_POSITIVE);
    let better = |f: f64, x: f64, g: f64, y: f64| f < g - tol || (f <= g + tol && x < y);
    let mut current = params.clone();
    let mut best = eval(&current)?;
    let mut trace = vec![best];

    for _ in 0..config.sweeps {
        for &(coord, (lo, hi)) in &config.coordinates {
            let mut trial = current.clone();
            let mut probe = |v: f64, eval: &mut dyn FnMut(&RegularizerParams) -> Result<f64>| {
                coord.set(&mut trial, v);
                eval(&trial)
            };
            let grid = log_grid(lo, hi, config.grid_points);
            let mut values = Vec::with_capacity(grid.len());
            for &v in &grid {
                values.push(probe(v, &mut eval)?);
            }
            // first minimum: ties go to the lower value
            let (mut bi, mut bv) = (0, values[0]);
            for (i, &v) in values.iter().enumerate() {
                if v < bv - tol {
                    bi = i;
                    bv = v;
                }
            }
            let mut best_x = grid[bi];
            if grid.len() > 1 && config.golden_iterations > 0 {
                let mut a = grid[bi.saturating_sub(1)].ln();
                let mut b = grid[(bi + 1).min(grid.len() - 1)].ln();
                let r = (5f64.sqrt() - 1.0) / 2.0;
                let mut c = b - r * (b - a);
                let mut d = a + r * (b - a);
                let mut fc = probe(c.exp(), &mut eval)?;
                let mut fd = probe(d.exp(), &mut eval)?;
                for _ in 0..config.golden_iterations {
                    if fc <= fd {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - r * (b - a);
                        fc = probe(c.exp(), &mut eval)?;
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + r * (b - a);
                        fd = probe(d.exp(), &mut eval)?;
                    }
                    for (x, f) in [(c, fc), (d, fd)] {
                        let x = x.exp();
                        if better(f, x, bv, best_x) {
                            bv = f;
                            best_x = x;
                        }
                    }
                }
            }
            let old = coord.get(&current);
            if better(bv, best_x, best, old) {
                coord.set(&mut current, best_x);
                best = bv;
                trace.push(best);
            }
        }
    }
    Ok(CalibrationReport {
        params: current,
        objective_trace: trace,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::observe;
    use crate::field::{downsample, Kernel};
    use rustfft::num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(w: usize, h: usize, seed: u64, lo: f64, hi: f64) -> ScalarField {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_fn(w, h, |_, _| r.random_range(lo..hi))
    }

    fn smooth_scene(w: usize, h: usize, seed: u64) -> ScalarField {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c): (f64, f64, f64) = (r.random_range(0.1..0.4), r.random_range(0.1..0.4), r.random_range(0.0..6.0));
        ScalarField::from_fn(w, h, |x, y| {
            let v = 0.5 + 0.25 * (a * x as f64 + c).sin() * (b * y as f64).cos();
            if (x / 5 + y / 7) % 2 == 0 {
                v
            } else {
                0.8 * v
            }
        })
    }

    fn two_plane_depth(w: usize, h: usize) -> ScalarField {
        ScalarField::from_fn(w, h, |x, _| if x < w / 2 { 5.0 } else { 80.0 })
    }

    fn identity_model(w: usize, h: usize, scale: usize) -> DegradationModel {
        DegradationModel::from_parts(
            AtmosphereParams::default(),
            vec![1.0, 2.0],
            vec![Kernel::delta(), Kernel::delta()],
            scale,
            (w, h),
            1.0,
        )
        .unwrap()
    }

    fn problem(seed: u64, w: usize, scale: usize) -> (ScalarField, ScalarField, DegradationModel, ScalarField) {
        let hr = smooth_scene(w, w, seed);
        let depth = ScalarField::from_fn(w, w, |x, y| 3.0 + 4.0 * x as f64 + 2.5 * y as f64);
        let model = DegradationModel::build(
            &AtmosphereParams {
                noise_sigma: 0.01,
                rng_seed: seed,
                ..Default::default()
            },
            &depth,
            4,
            scale,
        )
        .unwrap();
        let lr = observe(&model, &hr, &depth).unwrap();
        (hr, lr, model, depth)
    }

    #[test]
    fn exact_fit_has_zero_energy() {
        let model = identity_model(8, 8, 2);
        let hr = ScalarField::filled(8, 8, 0.3);
        let depth = ScalarField::filled(8, 8, 1.5);
        let lr = model.apply(&hr, &depth).unwrap();
        let params = RegularizerParams {
            lambda: 0.0,
            ..Default::default()
        };
        assert_eq!(energy(&hr, &lr, &model, &depth, &params).unwrap().total(), 0.0);
    }

    #[test]
    fn identity_degradation_energy_by_direct_evaluation() {
        let model = identity_model(8, 8, 2);
        let lr = random_field(4, 4, 1, 0.0, 1.0);
        let up = upsample_bilinear(&lr, 2);
        let depth = ScalarField::filled(8, 8, 1.5);
        let params = RegularizerParams {
            lambda: 0.0,
            ..Default::default()
        };
        let down = downsample(&up, 2).unwrap();
        let mut expect = 0.0;
        for i in 0..16 {
            expect += 0.5 * (down.data()[i] - lr.data()[i]).powi(2);
        }
        let e = energy(&up, &lr, &model, &depth, &params).unwrap();
        assert!((e.total() - expect).abs() < 1e-15);
    }

    #[test]
    fn energy_is_affine_in_lambda() {
        let (hr, lr, model, depth) = problem(2, 8, 2);
        let p1 = RegularizerParams {
            lambda: 0.3,
            ..Default::default()
        };
        let p2 = RegularizerParams {
            lambda: 0.1,
            ..Default::default()
        };
        let sum = RegularizerParams {
            lambda: 0.4,
            ..Default::default()
        };
        let e12 = energy(&hr, &lr, &model, &depth, &sum).unwrap().total();
        let e2 = energy(&hr, &lr, &model, &depth, &p2).unwrap().total();
        let r = regularizer_value(&hr, &depth, &p1).unwrap();
        assert!((e12 - e2 - 0.3 * r).abs() < 1e-12 * e12.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let params = RegularizerParams {
            lambda: 0.5,
            mu: 0.2,
            sigma_r0: 0.3,
            ..Default::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for seed in 0..4 {
            let u = random_field(6, 6, 10 + seed, 0.0, 1.0);
            let lr = random_field(3, 3, 20 + seed, 0.0, 1.0);
            let depth = random_field(6, 6, 30 + seed, 1.0, 60.0);
            let model = DegradationModel::build(&AtmosphereParams::default(), &depth, 3, 2).unwrap();
            let g = energy_gradient(&u, &lr, &model, &depth, &params).unwrap();
            for _ in 0..25 {
                let i = r.random_range(0..36);
                let h = 1e-5;
                let mut up = u.clone();
                up.data_mut()[i] += h;
                let mut dn = u.clone();
                dn.data_mut()[i] -= h;
                let fd = (energy(&up, &lr, &model, &depth, &params).unwrap().total()
                    - energy(&dn, &lr, &model, &depth, &params).unwrap().total())
                    / (2.0 * h);
                let rel = (fd - g.data()[i]).abs() / g.data()[i].abs().max(1e-8);
                assert!(rel <= 1e-5, "coordinate {i}: fd {fd} vs {}", g.data()[i]);
                checked += 1;
            }
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn data_gradient_is_operator_composition() {
        let (hr, lr, model, depth) = problem(4, 8, 2);
        let params = RegularizerParams {
            lambda: 0.0,
            ..Default::default()
        };
        let g = energy_gradient(&hr, &lr, &model, &depth, &params).unwrap();
        let r = model.apply(&hr, &depth).unwrap().zip_map(&lr, |a, b| a - b).unwrap();
        let expect = model.apply_adjoint(&r, &depth).unwrap();
        assert_eq!(g, expect);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let model = identity_model(8, 8, 2);
        let hr = ScalarField::filled(8, 8, 0.4);
        let depth = ScalarField::filled(8, 8, 1.5);
        let lr = model.apply(&hr, &depth).unwrap();
        let params = RegularizerParams::default();
        let config = SolverConfig::default();
        let state = SolverState::new(hr.clone(), &lr, &model, &depth, &params, &config).unwrap();
        assert_eq!(state.gradient.max_abs(), 0.0);
        let (next, rec) = flow_step(state, &lr, &model, &depth, &params, &config, None).unwrap();
        assert_eq!(next.u, hr);
        assert_eq!(next.tau, config.tau0);
        assert!(!rec.exhausted);
    }

    #[test]
    fn traces_are_monotone_in_both_modes() {
        for seed in 0..3 {
            let (_, lr, model, depth) = problem(40 + seed, 16, 2);
            let params = RegularizerParams::default();
            let init = upsample_bilinear(&lr, 2);
            let bank = prepare_bank(&params, &depth, &[init], &FitConfig { iterations: 20, ..Default::default() }).unwrap();
            for mode in [RegularizationMode::Analytic, RegularizationMode::Bank] {
                let config = SolverConfig {
                    mode,
                    stop_tol: 0.0,
                    ..Default::default()
                };
                let (_, trace) = restore(&lr, &depth, &model, &params, &config, Some(&bank)).unwrap();
                assert_eq!(trace.records.len(), 32);
                let e = trace.energies();
                assert!(e.windows(2).all(|w| w[1] <= w[0]), "{mode:?}: {e:?}");
                assert!(trace.final_energy() < trace.initial.energy);
                if mode == RegularizationMode::Bank {
                    assert!(trace.records.iter().all(|r| r.consistency.is_some()));
                }
            }
        }
    }

    #[test]
    fn fitted_bank_lowers_consistency_residual() {
        let (_, lr, model, depth) = problem(50, 16, 2);
        let params = RegularizerParams::default();
        let init = upsample_bilinear(&lr, 2);
        let fitted = prepare_bank(&params, &depth, &[init], &FitConfig { iterations: 50, ..Default::default() }).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(51);
        let mut random = fitted.clone();
        for k in random.kernels_mut().iter_mut().flatten() {
            k.taps_mut().iter_mut().for_each(|t| *t = r.random_range(-0.5..0.5));
        }
        let random = crate::kernels::project_lipschitz(&random);
        let config = SolverConfig {
            mode: RegularizationMode::Bank,
            iterations: 4,
            stop_tol: 0.0,
            ..Default::default()
        };
        let total = |bank: &KernelBank| -> f64 {
            let state = SolverState::new(upsample_bilinear(&lr, 2), &lr, &model, &depth, &params, &config).unwrap();
            let (_, rec) = flow_step(state, &lr, &model, &depth, &params, &config, Some(bank)).unwrap();
            rec.consistency.unwrap()
        };
        assert!(total(&fitted) < total(&random));
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let (_, lr, model, depth) = problem(5, 16, 2);
        let config = SolverConfig {
            iterations: 0,
            ..Default::default()
        };
        let (u, trace) = restore(&lr, &depth, &model, &RegularizerParams::default(), &config, None).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(u, upsample_bilinear(&lr, 2).clamp(0.0, 1.0));
        assert_eq!(trace.to_csv().lines().count(), 1);
    }

    #[test]
    fn lr_sized_depth_is_upsampled() {
        let (_, lr, model, depth) = problem(6, 16, 2);
        let small = downsample(&depth, 2).unwrap();
        let config = SolverConfig {
            iterations: 3,
            ..Default::default()
        };
        let (u, _) = restore(&lr, &small, &model, &RegularizerParams::default(), &config, None).unwrap();
        assert_eq!(u.dims(), (16, 16));
    }

    #[test]
    fn identity_degradation_restore_is_no_worse_than_bilinear() {
        let hr = smooth_scene(16, 16, 7);
        let model = identity_model(16, 16, 2);
        let depth = ScalarField::filled(16, 16, 1.5);
        let lr = model.apply(&hr, &depth).unwrap();
        let params = RegularizerParams {
            lambda: 1e-9,
            ..Default::default()
        };
        let (u, _) = restore(&lr, &depth, &model, &params, &SolverConfig::default(), None).unwrap();
        let bil = upsample_bilinear(&lr, 2);
        let mse = |a: &ScalarField| a.zip_map(&hr, |p, q| p - q).unwrap().norm_sq();
        assert!(mse(&u) <= mse(&bil));
    }

    #[test]
    fn trace_csv_layout() {
        let (_, lr, model, depth) = problem(8, 16, 2);
        let config = SolverConfig {
            iterations: 5,
            stop_tol: 0.0,
            ..Default::default()
        };
        let (_, trace) = restore(&lr, &depth, &model, &RegularizerParams::default(), &config, None).unwrap();
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "iteration,energy,data_term,reg_term,tau,el_residual,consistency_residual");
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }

    fn naive_dft(data: &[Complex64], n: usize, inverse: bool) -> Vec<Complex64> {
        let sign = if inverse { 1.0 } else { -1.0 };
        (0..n)
            .map(|k| {
                (0..n)
                    .map(|j| {
                        let a = sign * 2.0 * std::f64::consts::PI * (j * k % n) as f64 / n as f64;
                        data[j] * Complex64::new(a.cos(), a.sin())
                    })
                    .sum::<Complex64>()
            })
            .collect()
    }

    fn naive_dft2(data: &[Complex64], n: usize, inverse: bool) -> Vec<Complex64> {
        let mut rows = vec![Complex64::new(0.0, 0.0); n * n];
        for y in 0..n {
            let r = naive_dft(&data[y * n..(y + 1) * n], n, inverse);
            rows[y * n..(y + 1) * n].copy_from_slice(&r);
        }
        let mut out = rows.clone();
        for x in 0..n {
            let col: Vec<Complex64> = (0..n).map(|y| rows[y * n + x]).collect();
            for (y, v) in naive_dft(&col, n, inverse).into_iter().enumerate() {
                out[y * n + x] = v;
            }
        }
        out
    }

    /// Minimizer of `½‖k * u − u0‖² + λγ‖∇u‖²` with mirrored boundaries,
    /// solved on the 2N-periodic symmetric extension.
    fn mirrored_normal_equation_oracle(u0: &ScalarField, kernel: &Kernel, weight: f64) -> ScalarField {
        let n = u0.width();
        let m = 2 * n;
        let mirror = |i: usize| if i < n { i } else { m - 1 - i };
        let ext: Vec<Complex64> = (0..m * m)
            .map(|i| Complex64::new(u0.get(mirror(i % m), mirror(i / m)), 0.0))
            .collect();
        let mut kimg = vec![Complex64::new(0.0, 0.0); m * m];
        let r = kernel.radius() as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let x = dx.rem_euclid(m as isize) as usize;
                let y = dy.rem_euclid(m as isize) as usize;
                kimg[y * m + x] += kernel.at(dx, dy);
            }
        }
        let mut lap = vec![Complex64::new(0.0, 0.0); m * m];
        lap[0] = Complex64::new(-4.0, 0.0);
        for (x, y) in [(1, 0), (m - 1, 0), (0, 1), (0, m - 1)] {
            lap[y * m + x] = Complex64::new(1.0, 0.0);
        }
        let khat = naive_dft2(&kimg, m, false);
        let lhat = naive_dft2(&lap, m, false);
        let uhat = naive_dft2(&ext, m, false);
        let sol: Vec<Complex64> = (0..m * m)
            .map(|i| khat[i].conj() * uhat[i] / (khat[i].norm_sqr() - 2.0 * weight * lhat[i].re))
            .collect();
        let back = naive_dft2(&sol, m, true);
        ScalarField::from_fn(n, n, |x, y| back[y * m + x].re / (m * m) as f64)
    }

    #[test]
    fn quadratic_case_converges_to_normal_equation_solution() {
        let n = 32;
        let depth = ScalarField::filled(n, n, 40.0);
        let atm = AtmosphereParams {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let model = DegradationModel::build(&atm, &depth, 2, 1).unwrap();
        let hr = smooth_scene(n, n, 9);
        let u0 = model.apply(&hr, &depth).unwrap();
        let params = RegularizerParams {
            lambda: 0.1,
            mu: 0.0,
            ..Default::default()
        }
        .constant_g(40.0);
        let params = RegularizerParams { mu: 0.0, ..params };
        let config = SolverConfig {
            iterations: 200,
            stop_tol: 0.0,
            ..Default::default()
        };
        let (u, _) = restore_unclamped(&u0, &depth, &model, &params, &config, None).unwrap();
        let oracle = mirrored_normal_equation_oracle(&u0, &model.psf_bank()[0], params.lambda * params.gamma(40.0));
        let err = u.zip_map(&oracle, |a, b| a - b).unwrap().norm() / oracle.norm();
        assert!(err <= 1e-3, "relative error {err}");
    }

    fn calibration_pair(seed: u64) -> TrainingPair {
        let hr = smooth_scene(16, 16, seed);
        let depth = two_plane_depth(16, 16);
        let atm = AtmosphereParams {
            noise_sigma: 0.01,
            rng_seed: seed,
            ..Default::default()
        };
        let model = DegradationModel::build(&atm, &depth, 4, 2).unwrap();
        let lr = observe(&model, &hr, &depth).unwrap();
        TrainingPair::new(hr, lr, depth, &atm, 4).unwrap()
    }

    #[test]
    fn calibration_recovers_planted_lambda() {
        let mut pair = calibration_pair(11);
        let planted = RegularizerParams {
            lambda: 0.03,
            ..Default::default()
        };
        let solver = SolverConfig {
            iterations: 16,
            ..Default::default()
        };
        pair.hr = restore(&pair.lr, &pair.depth_map, &pair.model, &planted, &solver, None).unwrap().0;
        let config = CalibrationConfig {
            alpha: 0.0,
            beta: 0.0,
            coordinates: vec![(Coordinate::Lambda, (1e-4, 1.0))],
            solver,
            ..Default::default()
        };
        let start = RegularizerParams {
            lambda: 0.5,
            ..Default::default()
        };
        let pair_energy = pair.hr.norm_sq();
        let report = calibrate(&start, &[pair], &config).unwrap();
        let rel = (report.params.lambda - 0.03).abs() / 0.03;
        assert!(rel <= 0.05, "recovered {}", report.params.lambda);
        let tol = CALIBRATION_TIE_TOL * pair_energy;
        assert!(report.objective_trace.windows(2).all(|w| w[1] <= w[0] + tol));
    }

    #[test]
    fn constant_image_drives_lambda_to_lower_bound() {
        let depth = two_plane_depth(16, 16);
        let atm = AtmosphereParams {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let hr = ScalarField::filled(16, 16, 0.6);
        let model = DegradationModel::build(&atm, &depth, 4, 2).unwrap();
        let lr = model.apply(&hr, &depth).unwrap();
        let pair = TrainingPair::new(hr, lr, depth, &atm, 4).unwrap();
        let config = CalibrationConfig {
            alpha: 0.0,
            beta: 0.0,
            coordinates: vec![(Coordinate::Lambda, (1e-4, 1.0))],
            solver: SolverConfig {
                iterations: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let report = calibrate(&RegularizerParams::default(), &[pair], &config).unwrap();
        assert!((report.params.lambda - 1e-4).abs() < 1e-12, "{}", report.params.lambda);
    }

    #[test]
    fn calibration_rejects_empty_training_set() {
        assert!(calibrate(&RegularizerParams::default(), &[], &CalibrationConfig::default()).is_err());
    }
}
