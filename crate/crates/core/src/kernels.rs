//! Depth-conditional kernel bank.
//!
//! A bank holds small kernels `w_i(d_m)` at `M` depth anchors for each fixed
//! feature map `F_i(u)`. Kernels at intermediate depths are piecewise-linear
//! blends of the neighbouring anchors, and the regularization operator is
//!
//! ```text
//! B(u, D)(x) = Σ_i (w_i(D(x)) * F_i(u))(x)
//! ```
//!
//! Consecutive anchors obey `‖w_i(d_{m+1}) - w_i(d_m)‖₂ <= L (d_{m+1} - d_m)`;
//! the linear interpolant then inherits the same bound between any two depths.

use rayon::prelude::*;

use crate::degrade::{hat_weights, uniform_bins};
use crate::error::{invalid, Error, Result};
use crate::field::{convolve_at, gradient, laplacian, reflect_index, Kernel, ScalarField};
use crate::regularize::{regularizer_gradient, RegularizerParams};

/// Fixed feature extractors, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Identity,
    GradX,
    GradY,
    Laplacian,
}

pub const ALL_FEATURES: [Feature; 4] = [Feature::Identity, Feature::GradX, Feature::GradY, Feature::Laplacian];

pub const DEFAULT_ANCHORS: usize = 8;
pub const DEFAULT_KERNEL_SIZE: usize = 5;
pub const DEFAULT_LIPSCHITZ: f64 = 1.0;

impl Feature {
    pub fn extract(self, u: &ScalarField) -> ScalarField {
        match self {
            Feature::Identity => u.clone(),
            Feature::GradX => gradient(u).x,
            Feature::GradY => gradient(u).y,
            Feature::Laplacian => laplacian(u),
        }
    }
}

/// Feature maps for the first `count` canonical features.
pub fn feature_maps(u: &ScalarField, count: usize) -> Vec<ScalarField> {
    let grad = if count > 1 { Some(gradient(u)) } else { None };
    ALL_FEATURES[..count]
        .iter()
        .map(|f| match (f, &grad) {
            (Feature::GradX, Some(g)) => g.x.clone(),
            (Feature::GradY, Some(g)) => g.y.clone(),
            _ => f.extract(u),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    anchors: Vec<f64>,
    /// `kernels[m][i]`: anchor `m`, feature `i`.
    kernels: Vec<Vec<Kernel>>,
    lipschitz: f64,
}

impl KernelBank {
    pub fn new(anchors: Vec<f64>, kernels: Vec<Vec<Kernel>>, lipschitz: f64) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Empty("kernel bank has no anchors"));
        }
        if anchors.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("anchors", "must be strictly increasing"));
        }
        if kernels.len() != anchors.len() {
            return Err(invalid("kernels", "one kernel set per anchor required"));
        }
        let features = kernels[0].len();
        if features == 0 || features > ALL_FEATURES.len() {
            return Err(invalid("kernels", format!("feature count must be 1..=4, got {features}")));
        }
        let radius = kernels[0][0].radius();
        if kernels
            .iter()
            .any(|set| set.len() != features || set.iter().any(|k| k.radius() != radius))
        {
            return Err(invalid("kernels", "all anchors need the same features and kernel size"));
        }
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(invalid("lipschitz", format!("must be > 0, got {lipschitz}")));
        }
        Ok(Self {
            anchors,
            kernels,
            lipschitz,
        })
    }

    pub fn zeros(anchors: Vec<f64>, features: usize, radius: usize, lipschitz: f64) -> Result<Self> {
        let kernels = vec![vec![Kernel::zeros(radius); features]; anchors.len()];
        Self::new(anchors, kernels, lipschitz)
    }

    /// Anchors spread uniformly over `[d_min, d_max]`.
    pub fn uniform_anchors(d_min: f64, d_max: f64, count: usize) -> Vec<f64> {
        if count == 1 {
            return vec![d_min];
        }
        uniform_bins(d_min, d_max, count)
    }

    /// Small-gradient linearization of the analytic regularizer gradient:
    /// `-2 γ(d) Δu + 2 μ h(d) Δ(Δu)` expressed on the Laplacian feature.
    pub fn linearized(params: &RegularizerParams, anchors: Vec<f64>, radius: usize, lipschitz: f64) -> Result<Self> {
        if radius < 1 {
            return Err(invalid("kernel_size", "linearized bank needs kernels of at least 3x3"));
        }
        let kernels = anchors
            .iter()
            .map(|&d| {
                let mut set = vec![Kernel::zeros(radius); ALL_FEATURES.len()];
                let lap = &mut set[3];
                let side = lap.side();
                let c = radius;
                let taps = lap.taps_mut();
                let a = 2.0 * params.mu * params.h(d);
                taps[c * side + c] = -2.0 * params.gamma(d) - 4.0 * a;
                taps[(c - 1) * side + c] = a;
                taps[(c + 1) * side + c] = a;
                taps[c * side + c - 1] = a;
                taps[c * side + c + 1] = a;
                set
            })
            .collect();
        Self::new(anchors, kernels, lipschitz)
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn kernels(&self) -> &[Vec<Kernel>] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [Vec<Kernel>] {
        &mut self.kernels
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn num_features(&self) -> usize {
        self.kernels[0].len()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels[0][0].side()
    }

    pub fn radius(&self) -> usize {
        self.kernels[0][0].radius()
    }

    /// Worst ratio `‖Δw_i‖ / (L Δd)` over consecutive anchors.
    pub fn lipschitz_ratio(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for m in 0..self.anchors.len().saturating_sub(1) {
            let bound = self.lipschitz * (self.anchors[m + 1] - self.anchors[m]);
            for i in 0..self.num_features() {
                let diff = diff_norm(&self.kernels[m + 1][i], &self.kernels[m][i]);
                worst = worst.max(diff / bound);
            }
        }
        worst
    }

    fn axpy(&mut self, alpha: f64, other: &KernelBank) {
        for (set, oset) in self.kernels.iter_mut().zip(&other.kernels) {
            for (k, ok) in set.iter_mut().zip(oset) {
                for (a, b) in k.taps_mut().iter_mut().zip(ok.taps()) {
                    *a += alpha * b;
                }
            }
        }
    }

    fn norm_sq(&self) -> f64 {
        self.kernels
            .iter()
            .flatten()
            .map(|k| k.taps().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    const MAGIC: &'static [u8; 4] = b"DKB1";

    /// Serializes as `DKB1 | M u32 | N u32 | k u32 | L f64 | anchors | taps`,
    /// all little-endian, taps ordered anchor, feature, row, column.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(self.anchors.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_features() as u32).to_le_bytes());
        out.extend_from_slice(&(self.kernel_size() as u32).to_le_bytes());
        out.extend_from_slice(&self.lipschitz.to_le_bytes());
        for a in &self.anchors {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for k in self.kernels.iter().flatten() {
            for t in k.taps() {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| invalid("kernel_bank", why.to_string());
        if bytes.len() < 20 || &bytes[..4] != Self::MAGIC {
            return Err(bad("missing DKB1 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let (m, n, k) = (u32_at(4), u32_at(8), u32_at(12));
        let lipschitz = f64_at(16);
        if k % 2 == 0 || k == 0 {
            return Err(bad("kernel size must be odd"));
        }
        let expected = 24 + 8 * m + 8 * m * n * k * k;
        if bytes.len() != expected {
            return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let anchors: Vec<f64> = (0..m).map(|i| f64_at(24 + 8 * i)).collect();
        let mut offset = 24 + 8 * m;
        let mut kernels = Vec::with_capacity(m);
        for _ in 0..m {
            let mut set = Vec::with_capacity(n);
            for _ in 0..n {
                let taps: Vec<f64> = (0..k * k).map(|j| f64_at(offset + 8 * j)).collect();
                offset += 8 * k * k;
                set.push(Kernel::new(k / 2, taps)?);
            }
            kernels.push(set);
        }
        Self::new(anchors, kernels, lipschitz)
    }
}

fn diff_norm(a: &Kernel, b: &Kernel) -> f64 {
    a.taps()
        .iter()
        .zip(b.taps())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Kernels at depth `d` and whether `d` was clamped into the anchor range.
pub fn interpolate_kernels(bank: &KernelBank, d: f64) -> (Vec<Kernel>, bool) {
    let anchors = bank.anchors();
    let clamped = d < anchors[0] || d > anchors[anchors.len() - 1];
    let weights = hat_weights(anchors, d);
    let mut out = vec![Kernel::zeros(bank.radius()); bank.num_features()];
    for (m, wgt) in weights {
        if wgt == 0.0 {
            continue;
        }
        for (o, k) in out.iter_mut().zip(&bank.kernels[m]) {
            for (a, b) in o.taps_mut().iter_mut().zip(k.taps()) {
                *a += wgt * b;
            }
        }
    }
    (out, clamped)
}

/// Sweeps the anchors in increasing depth and shrinks every consecutive
/// difference that exceeds `L Δd` back onto the bound.
pub fn project_lipschitz(bank: &KernelBank) -> KernelBank {
    let mut out = bank.clone();
    for m in 0..out.anchors.len().saturating_sub(1) {
        let bound = out.lipschitz * (out.anchors[m + 1] - out.anchors[m]);
        for i in 0..out.num_features() {
            let norm = diff_norm(&out.kernels[m + 1][i], &out.kernels[m][i]);
            if norm <= bound {
                continue;
            }
            let base = out.kernels[m][i].clone();
            let diff: Vec<f64> = out.kernels[m + 1][i]
                .taps()
                .iter()
                .zip(base.taps())
                .map(|(p, q)| p - q)
                .collect();
            let mut scale = bound / norm;
            // rounding can leave the stored difference a hair above the bound
            loop {
                for ((t, b), dv) in out.kernels[m + 1][i].taps_mut().iter_mut().zip(base.taps()).zip(&diff) {
                    *t = b + scale * dv;
                }
                if diff_norm(&out.kernels[m + 1][i], &base) <= bound {
                    break;
                }
                scale *= 1.0 - 1e-15;
            }
        }
    }
    out
}

/// Per-anchor blend weights of a depth map, as `(anchor, weight)` pairs.
fn pixel_weights(bank: &KernelBank, depth_map: &ScalarField) -> Vec<[(usize, f64); 2]> {
    depth_map.data().iter().map(|&d| hat_weights(bank.anchors(), d)).collect()
}

fn apply_with_features(bank: &KernelBank, features: &[ScalarField], weights: &[[(usize, f64); 2]]) -> ScalarField {
    let proto = &features[0];
    let (w, _) = proto.dims();
    let mut out = vec![0.0; proto.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(m, wgt) in &weights[y * w + x] {
                if wgt == 0.0 {
                    continue;
                }
                let mut local = 0.0;
                for (f, k) in features.iter().zip(&bank.kernels[m]) {
                    local += convolve_at(f, k, x, y);
                }
                acc += wgt * local;
            }
            *o = acc;
        }
    });
    proto.like(out)
}

/// `B(u, D) = Σ_i w_i(D) * F_i(u)`, evaluated by blending per-anchor
/// responses (equal to per-pixel kernel interpolation by linearity).
pub fn apply_bank(bank: &KernelBank, u: &ScalarField, depth_map: &ScalarField) -> Result<ScalarField> {
    if u.dims() != depth_map.dims() {
        return Err(Error::DimensionMismatch {
            expected: u.dims(),
            actual: depth_map.dims(),
        });
    }
    let features = feature_maps(u, bank.num_features());
    Ok(apply_with_features(bank, &features, &pixel_weights(bank, depth_map)))
}

/// One training example for [`fit_bank`].
#[derive(Debug, Clone)]
pub struct FitSample {
    pub u: ScalarField,
    pub depth_map: ScalarField,
    pub target: ScalarField,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    /// Fixed step; `None` uses the exact line-search step of the
    /// least-squares objective along the negative gradient.
    pub step: Option<f64>,
    pub max_halvings: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            step: None,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub initial_residual: f64,
    pub final_residual: f64,
    /// Residual after every accepted step.
    pub history: Vec<f64>,
}

struct Prepared {
    features: Vec<ScalarField>,
    weights: Vec<[(usize, f64); 2]>,
    target: ScalarField,
}

fn residual_sq(bank: &KernelBank, data: &[Prepared]) -> f64 {
    data.iter()
        .map(|p| {
            let out = apply_with_features(bank, &p.features, &p.weights);
            out.data()
                .iter()
                .zip(p.target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// Gradient of `Σ ‖apply_bank(u) - target‖²` with respect to every tap.
fn objective_gradient(bank: &KernelBank, data: &[Prepared]) -> KernelBank {
    let mut grad = bank.clone();
    grad.kernels.iter_mut().flatten().for_each(|k| k.taps_mut().fill(0.0));
    let r = bank.radius() as isize;
    let side = bank.kernel_size();
    for p in data {
        let out = apply_with_features(bank, &p.features, &p.weights);
        let (w, h) = out.dims();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let res = 2.0 * (out.data()[i] - p.target.data()[i]);
                if res == 0.0 {
                    continue;
                }
                for &(m, wgt) in &p.weights[i] {
                    if wgt == 0.0 {
                        continue;
                    }
                    let z = res * wgt;
                    for (f, gk) in p.features.iter().zip(grad.kernels[m].iter_mut()) {
                        let taps = gk.taps_mut();
                        for (row, dy) in (-r..=r).enumerate() {
                            let sy = reflect_index(y as isize - dy, h);
                            for (col, dx) in (-r..=r).enumerate() {
                                let sx = reflect_index(x as isize - dx, w);
                                taps[row * side + col] += z * f.data()[sy * w + sx];
                            }
                        }
                    }
                }
            }
        }
    }
    grad
}

/// Least-squares fit of the bank to arbitrary targets by projected gradient
/// descent. Steps that would increase the residual are halved until they
/// do not; the residual history is therefore non-increasing.
pub fn fit_bank(bank: &KernelBank, samples: &[FitSample], config: &FitConfig) -> Result<(KernelBank, FitReport)> {
    if samples.is_empty() {
        return Err(Error::Empty("fit needs at least one sample"));
    }
    let data: Vec<Prepared> = samples
        .iter()
        .map(|s| {
            if s.u.dims() != s.depth_map.dims() || s.u.dims() != s.target.dims() {
                return Err(Error::DimensionMismatch {
                    expected: s.u.dims(),
                    actual: s.depth_map.dims(),
                });
            }
            Ok(Prepared {
                features: feature_maps(&s.u, bank.num_features()),
                weights: pixel_weights(bank, &s.depth_map),
                target: s.target.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut current = project_lipschitz(bank);
    let mut residual = residual_sq(&current, &data);
    let initial_residual = residual;
    let mut history = Vec::new();
    let mut step = config.step;
    for _ in 0..config.iterations {
        if residual == 0.0 {
            break;
        }
        let grad = objective_gradient(&current, &data);
        let gnorm = grad.norm_sq();
        if gnorm == 0.0 {
            break;
        }
        let mut alpha = match step {
            Some(s) => s,
            None => {
                // exact minimizer of ‖r - a A g‖² along the gradient, with
                // ⟨r, A g⟩ = ‖g‖² / 2
                let ag: f64 = data
                    .iter()
                    .map(|p| apply_with_features(&grad, &p.features, &p.weights).norm_sq())
                    .sum();
                if ag == 0.0 {
                    break;
                }
                0.5 * gnorm / ag
            }
        };
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let mut trial = current.clone();
            trial.axpy(-alpha, &grad);
            let trial = project_lipschitz(&trial);
            let r = residual_sq(&trial, &data);
            if r <= residual {
                accepted = Some((trial, r));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((bank, r)) => {
                current = bank;
                residual = r;
                history.push(r);
                if step.is_some() {
                    step = Some(alpha);
                }
            }
            None => break,
        }
    }
    Ok((
        current,
        FitReport {
            initial_residual,
            final_residual: residual,
            history,
        },
    ))
}

/// Fits the bank so that `apply_bank(u)` tracks the analytic regularizer
/// gradient on the given `(u, depth)` samples.
pub fn fit_bank_to_analytic(
    bank: &KernelBank,
    samples: &[(ScalarField, ScalarField)],
    params: &RegularizerParams,
    config: &FitConfig,
) -> Result<(KernelBank, FitReport)> {
    let prepared = samples
        .iter()
        .map(|(u, depth)| {
            Ok(FitSample {
                u: u.clone(),
                depth_map: depth.clone(),
                target: regularizer_gradient(u, depth, params)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fit_bank(bank, &prepared, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::convolve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(w: usize, h: usize, seed: u64, lo: f64, hi: f64) -> ScalarField {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_fn(w, h, |_, _| r.random_range(lo..hi))
    }

    fn random_bank(seed: u64, anchors: Vec<f64>, features: usize, radius: usize, scale: f64, lipschitz: f64) -> KernelBank {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let side = 2 * radius + 1;
        let kernels = anchors
            .iter()
            .map(|_| {
                (0..features)
                    .map(|_| Kernel::new(radius, (0..side * side).map(|_| scale * r.random_range(-1.0..1.0)).collect()).unwrap())
                    .collect()
            })
            .collect();
        KernelBank::new(anchors, kernels, lipschitz).unwrap()
    }

    #[test]
    fn interpolation_nodes_and_midpoints() {
        let bank = random_bank(1, vec![1.0, 3.0, 7.0], 4, 2, 1.0, 10.0);
        let (at, clamped) = interpolate_kernels(&bank, 3.0);
        assert!(!clamped);
        assert_eq!(at, bank.kernels()[1]);
        let (mid, _) = interpolate_kernels(&bank, 5.0);
        for i in 0..4 {
            for (j, v) in mid[i].taps().iter().enumerate() {
                let e = 0.5 * (bank.kernels()[1][i].taps()[j] + bank.kernels()[2][i].taps()[j]);
                assert!((v - e).abs() < 1e-15);
            }
        }
        let (below, clamped) = interpolate_kernels(&bank, 0.2);
        assert!(clamped);
        assert_eq!(below, bank.kernels()[0]);
    }

    #[test]
    fn projection_fixes_single_violation() {
        let mut bank = KernelBank::zeros(vec![0.0, 1.0], 1, 1, 0.5).unwrap();
        bank.kernels_mut()[1][0].taps_mut()[4] = 1.0; // norm 2L
        let p = project_lipschitz(&bank);
        let norm = diff_norm(&p.kernels()[1][0], &p.kernels()[0][0]);
        assert!((norm - 0.5).abs() < 1e-15);
        assert!(norm <= 0.5);
    }

    #[test]
    fn projection_leaves_feasible_bank_untouched_and_is_idempotent() {
        let feasible = random_bank(2, vec![0.0, 10.0, 20.0], 4, 2, 0.1, 1.0);
        assert!(feasible.lipschitz_ratio() <= 1.0);
        assert_eq!(project_lipschitz(&feasible), feasible);

        let wild = random_bank(3, vec![0.0, 0.5, 0.7, 3.0], 4, 2, 5.0, 0.3);
        assert!(wild.lipschitz_ratio() > 1.0);
        let once = project_lipschitz(&wild);
        assert!(once.lipschitz_ratio() <= 1.0);
        assert_eq!(project_lipschitz(&once), once);
    }

    #[test]
    fn interpolant_satisfies_bound_between_any_depths() {
        let bank = project_lipschitz(&random_bank(4, vec![1.0, 2.0, 4.0, 8.0, 16.0], 4, 2, 3.0, 0.7));
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let d1 = r.random_range(1.0..16.0);
            let d2 = r.random_range(1.0..16.0);
            let (k1, _) = interpolate_kernels(&bank, d1);
            let (k2, _) = interpolate_kernels(&bank, d2);
            for i in 0..4 {
                assert!(diff_norm(&k1[i], &k2[i]) <= bank.lipschitz() * (d1 - d2).abs() + 1e-12);
            }
        }
    }

    #[test]
    fn identity_bank_is_identity() {
        let mut bank = KernelBank::zeros(vec![1.0, 50.0], 4, 2, 1.0).unwrap();
        for set in bank.kernels_mut() {
            set[0].taps_mut()[12] = 1.0;
        }
        let u = random_field(7, 6, 6, 0.0, 1.0);
        let depth = random_field(7, 6, 7, 1.0, 50.0);
        let out = apply_bank(&bank, &u, &depth).unwrap();
        assert!(out.zip_map(&u, |a, b| a - b).unwrap().max_abs() < 1e-15);
        let zero = KernelBank::zeros(vec![1.0, 50.0], 4, 2, 1.0).unwrap();
        assert_eq!(apply_bank(&zero, &u, &depth).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn constant_depth_matches_direct_convolution() {
        let bank = random_bank(8, vec![2.0, 6.0, 9.0], 4, 2, 1.0, 10.0);
        let u = random_field(8, 8, 9, 0.0, 1.0);
        let depth = ScalarField::filled(8, 8, 4.5);
        let (ks, _) = interpolate_kernels(&bank, 4.5);
        let mut expect = ScalarField::zeros(8, 8);
        for (f, k) in ALL_FEATURES.iter().zip(&ks) {
            expect.axpy(1.0, &convolve(&f.extract(&u), k));
        }
        let got = apply_bank(&bank, &u, &depth).unwrap();
        assert!(got.zip_map(&expect, |a, b| a - b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn anchor_blending_equals_per_pixel_interpolation() {
        let bank = random_bank(10, vec![1.0, 4.0, 9.0, 20.0], 4, 2, 1.0, 10.0);
        let u = random_field(8, 8, 11, 0.0, 1.0);
        let depth = random_field(8, 8, 12, 0.5, 25.0);
        let got = apply_bank(&bank, &u, &depth).unwrap();
        let feats: Vec<ScalarField> = ALL_FEATURES.iter().map(|f| f.extract(&u)).collect();
        for y in 0..8 {
            for x in 0..8 {
                let (ks, _) = interpolate_kernels(&bank, depth.get(x, y));
                let expect: f64 = feats.iter().zip(&ks).map(|(f, k)| convolve_at(f, k, x, y)).sum();
                assert!((got.get(x, y) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_bank_is_linear() {
        let bank = random_bank(13, vec![1.0, 5.0], 4, 1, 1.0, 10.0);
        let u = random_field(6, 6, 14, 0.0, 1.0);
        let v = random_field(6, 6, 15, 0.0, 1.0);
        let depth = random_field(6, 6, 16, 1.0, 5.0);
        let mut combo = u.clone();
        combo.scale(2.5);
        combo.axpy(-1.0, &v);
        let lhs = apply_bank(&bank, &combo, &depth).unwrap();
        let mut rhs = apply_bank(&bank, &u, &depth).unwrap();
        rhs.scale(2.5);
        rhs.axpy(-1.0, &apply_bank(&bank, &v, &depth).unwrap());
        assert!(lhs.zip_map(&rhs, |a, b| a - b).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn planted_bank_is_recovered() {
        let anchors = vec![1.0, 20.0];
        let planted = project_lipschitz(&random_bank(17, anchors.clone(), 1, 1, 0.5, 10.0));
        let samples: Vec<FitSample> = (0..2)
            .map(|s| {
                let u = random_field(12, 12, 30 + s, 0.0, 1.0);
                let depth = random_field(12, 12, 40 + s, 1.0, 20.0);
                let target = apply_bank(&planted, &u, &depth).unwrap();
                FitSample { u, depth_map: depth, target }
            })
            .collect();
        let start = KernelBank::zeros(anchors, 1, 1, 10.0).unwrap();
        let (_, report) = fit_bank(
            &start,
            &samples,
            &FitConfig {
                iterations: 500,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.final_residual < 1e-6 * report.initial_residual, "{report:?}");
        assert!(report.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_targets_shrink_kernels() {
        let start = random_bank(18, vec![1.0, 10.0], 1, 1, 0.2, 10.0);
        let u = random_field(16, 16, 19, 0.0, 1.0);
        let depth = random_field(16, 16, 20, 1.0, 10.0);
        let sample = FitSample {
            target: ScalarField::zeros(16, 16),
            u,
            depth_map: depth,
        };
        let (fitted, report) = fit_bank(&start, &[sample], &FitConfig { iterations: 2000, ..Default::default() }).unwrap();
        assert!(report.final_residual < 1e-6 * report.initial_residual, "{report:?}");
        assert!(fitted.norm_sq() < 1e-4 * start.norm_sq());
    }

    #[test]
    fn single_step_matches_least_squares_gradient() {
        // one anchor, identity feature, 3x3 kernel: apply_bank(u) = A w with
        // A's columns the mirrored shifts of u
        let u = random_field(4, 4, 21, 0.0, 1.0);
        let depth = ScalarField::filled(4, 4, 5.0);
        let target = random_field(4, 4, 22, -1.0, 1.0);
        let start = random_bank(23, vec![5.0], 1, 1, 0.3, 100.0);
        let mut a = vec![[0.0; 9]; 16];
        for y in 0..4 {
            for x in 0..4 {
                for (j, (dx, dy)) in (-1..=1isize).flat_map(|dy| (-1..=1isize).map(move |dx| (dx, dy))).enumerate() {
                    let sx = reflect_index(x as isize - dx, 4);
                    let sy = reflect_index(y as isize - dy, 4);
                    a[y * 4 + x][j] = u.get(sx, sy);
                }
            }
        }
        let w0 = start.kernels()[0][0].taps().to_vec();
        let residual: Vec<f64> = (0..16)
            .map(|i| (0..9).map(|j| a[i][j] * w0[j]).sum::<f64>() - target.data()[i])
            .collect();
        let step = 1e-3;
        let expect: Vec<f64> = (0..9)
            .map(|j| w0[j] - step * 2.0 * (0..16).map(|i| a[i][j] * residual[i]).sum::<f64>())
            .collect();
        let sample = FitSample {
            u,
            depth_map: depth,
            target,
        };
        let (fitted, report) = fit_bank(
            &start,
            &[sample],
            &FitConfig {
                iterations: 1,
                step: Some(step),
                max_halvings: 0,
            },
        )
        .unwrap();
        assert_eq!(report.history.len(), 1);
        for (g, e) in fitted.kernels()[0][0].taps().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-13);
        }
    }

    #[test]
    fn linearized_bank_matches_analytic_gradient_for_flat_depth() {
        let params = RegularizerParams {
            d0: f64::MIN_POSITIVE,
            ..Default::default()
        };
        let u = random_field(9, 9, 24, 0.0, 1.0);
        let depth = ScalarField::filled(9, 9, 30.0);
        let bank = KernelBank::linearized(&params, vec![10.0, 30.0, 60.0], 2, 1.0).unwrap();
        let got = apply_bank(&bank, &u, &depth).unwrap();
        let expect = regularizer_gradient(&u, &depth, &params).unwrap();
        assert!(got.zip_map(&expect, |a, b| a - b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn analytic_fit_reduces_residual() {
        let params = RegularizerParams::default();
        let u = random_field(10, 10, 25, 0.0, 1.0);
        let depth = random_field(10, 10, 26, 2.0, 80.0);
        let anchors = KernelBank::uniform_anchors(2.0, 80.0, 4);
        let start = KernelBank::linearized(&params, anchors, 2, 1.0).unwrap();
        let (_, report) = fit_bank_to_analytic(
            &start,
            &[(u, depth)],
            &params,
            &FitConfig {
                iterations: 30,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.final_residual < report.initial_residual);
    }

    #[test]
    fn binary_round_trip_and_header() {
        let bank = random_bank(27, vec![1.0, 2.5, 9.0], 4, 2, 1.0, 0.75);
        let bytes = bank.to_bytes();
        assert_eq!(&bytes[..4], b"DKB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 0.75);
        assert_eq!(bytes.len(), 24 + 3 * 8 + 3 * 4 * 25 * 8);
        assert_eq!(KernelBank::from_bytes(&bytes).unwrap(), bank);
        assert!(KernelBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(KernelBank::from_bytes(b"XXXX").is_err());
    }
}
