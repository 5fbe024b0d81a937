//! Procedural scenes with known depth for self-contained benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::ScalarField;

pub const DEFAULT_SCENE_SIZE: usize = 64;
pub const DEFAULT_SUITE_SIZE: usize = 10;
pub const NEAR_DEPTH: f64 = 5.0;
pub const FAR_DEPTH: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthLayout {
    /// Near plane on one side, far plane on the other.
    TwoPlane,
    /// Depth rising in equal steps from near to far.
    Staircase,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub name: String,
    pub hr: ScalarField,
    pub depth: ScalarField,
}

pub fn depth_map(layout: DepthLayout, size: usize, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d3b7);
    let vertical = rng.random_bool(0.5);
    let coord = move |x: usize, y: usize| if vertical { y } else { x };
    match layout {
        DepthLayout::TwoPlane => {
            let split = rng.random_range(size * 3 / 8..=size * 5 / 8);
            ScalarField::from_fn(size, size, |x, y| if coord(x, y) < split { NEAR_DEPTH } else { FAR_DEPTH })
        }
        DepthLayout::Staircase => {
            let steps = 4;
            ScalarField::from_fn(size, size, |x, y| {
                let k = (coord(x, y) * steps / size).min(steps - 1);
                NEAR_DEPTH + (FAR_DEPTH - NEAR_DEPTH) * k as f64 / (steps - 1) as f64
            })
        }
    }
}

/// Piecewise-smooth texture in `[0, 1]`: a shaded background with
/// rectangles, discs and a few grating patches.
pub fn texture(size: usize, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let (gx, gy, base) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.3..0.7));
    let mut u = ScalarField::from_fn(size, size, |x, y| base + gx * (x as f64 / n - 0.5) + gy * (y as f64 / n - 0.5));

    for _ in 0..rng.random_range(4..8) {
        let (x0, y0) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let (w, h) = (rng.random_range(n / 8.0..n / 2.5), rng.random_range(n / 8.0..n / 2.5));
        let v = rng.random_range(0.05..0.95);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if fx >= x0 && fx < x0 + w && fy >= y0 && fy < y0 + h {
                    u.set(x, y, v);
                }
            }
        }
    }
    for _ in 0..rng.random_range(3..6) {
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let r = rng.random_range(n / 16.0..n / 5.0);
        let v = rng.random_range(0.05..0.95);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    u.set(x, y, v);
                }
            }
        }
    }
    for _ in 0..rng.random_range(1..3) {
        let (x0, y0) = (rng.random_range(0.0..n * 0.7), rng.random_range(0.0..n * 0.7));
        let side = rng.random_range(n / 6.0..n / 3.0);
        let period = rng.random_range(4.0..10.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (c, s) = (angle.cos(), angle.sin());
        let amp = rng.random_range(0.15..0.35);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if fx >= x0 && fx < x0 + side && fy >= y0 && fy < y0 + side {
                    let phase = 2.0 * std::f64::consts::PI * (c * fx + s * fy) / period;
                    u.set(x, y, 0.5 + amp * phase.sin());
                }
            }
        }
    }
    u.clamp(0.0, 1.0)
}

pub fn scene(layout: DepthLayout, size: usize, seed: u64) -> SyntheticScene {
    let tag = match layout {
        DepthLayout::TwoPlane => "two_plane",
        DepthLayout::Staircase => "staircase",
    };
    SyntheticScene {
        name: format!("{tag}_{seed:02}"),
        hr: texture(size, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)),
        depth: depth_map(layout, size, seed),
    }
}

/// `count` scenes alternating two-plane and staircase depth, sorted by name.
pub fn synthetic_suite(count: usize, size: usize, seed: u64) -> Vec<SyntheticScene> {
    let mut scenes: Vec<SyntheticScene> = (0..count as u64)
        .map(|i| {
            let layout = if i % 2 == 0 { DepthLayout::TwoPlane } else { DepthLayout::Staircase };
            scene(layout, size, seed.wrapping_add(i))
        })
        .collect();
    scenes.sort_by(|a, b| a.name.cmp(&b.name));
    scenes
}
