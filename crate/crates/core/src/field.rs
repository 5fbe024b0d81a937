//! Grid containers and the discrete differential / spectral primitives.
//!
//! All stencils use Neumann boundaries: first differences vanish across the
//! last row and column, and convolutions extend the grid by half-sample
//! mirroring (`.. u1 u0 | u0 u1 ..`). Gradient and divergence form an exact
//! adjoint pair, so `laplacian = divergence ∘ gradient` is symmetric and
//! negative semidefinite.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{invalid, Error, Result};

/// A 2-D grid of real samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
    pixel_pitch: f64,
}

impl ScalarField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("dimensions", "width and height must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::BadLength {
                len: data.len(),
                width,
                height,
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            data,
            pixel_pitch: 1.0,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "empty field");
        assert!(value.is_finite());
        Self {
            width,
            height,
            data: vec![value; width * height],
            pixel_pitch: 1.0,
        }
    }

    /// Builds a field by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty field");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
            pixel_pitch: 1.0,
        }
    }

    pub fn with_pitch(mut self, pixel_pitch: f64) -> Self {
        assert!(pixel_pitch > 0.0 && pixel_pitch.is_finite(), "pixel pitch must be positive");
        self.pixel_pitch = pixel_pitch;
        self
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Meters per pixel on the scene.
    #[inline]
    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Same grid geometry, new samples.
    pub fn like(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self {
            width: self.width,
            height: self.height,
            data,
            pixel_pitch: self.pixel_pitch,
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        self.like(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Ok(self.like(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn ensure_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }
}

/// A pair of scalar components on a common grid (used for `∇u`).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub x: ScalarField,
    pub y: ScalarField,
}

impl VectorField {
    pub fn new(x: ScalarField, y: ScalarField) -> Result<Self> {
        x.ensure_same_dims(&y)?;
        Ok(Self { x, y })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.x.dims()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.x.dot(&other.x) + self.y.dot(&other.y)
    }

    /// Per-pixel squared Euclidean norm.
    pub fn magnitude_sq(&self) -> ScalarField {
        self.x
            .zip_map(&self.y, |a, b| a * a + b * b)
            .expect("components share dimensions")
    }

    pub fn magnitude(&self) -> ScalarField {
        self.magnitude_sq().map(f64::sqrt)
    }
}

/// Forward differences; the difference across the last column (row) is zero.
pub fn gradient(u: &ScalarField) -> VectorField {
    let (w, h) = u.dims();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let d = u.data();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                gx[i] = d[i + 1] - d[i];
            }
            if y + 1 < h {
                gy[i] = d[i + w] - d[i];
            }
        }
    }
    VectorField {
        x: u.like(gx),
        y: u.like(gy),
    }
}

/// Backward differences matched to [`gradient`] so that
/// `<∇u, v> = -<u, div v>` holds exactly.
pub fn divergence(v: &VectorField) -> Result<ScalarField> {
    v.x.ensure_same_dims(&v.y)?;
    let (w, h) = v.dims();
    let px = v.x.data();
    let py = v.y.data();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut acc = 0.0;
            if x + 1 < w {
                acc += px[i];
            }
            if x > 0 {
                acc -= px[i - 1];
            }
            if y + 1 < h {
                acc += py[i];
            }
            if y > 0 {
                acc -= py[i - w];
            }
            out[i] = acc;
        }
    }
    Ok(v.x.like(out))
}

pub fn laplacian(u: &ScalarField) -> ScalarField {
    divergence(&gradient(u)).expect("gradient components share dimensions")
}

/// Maps an out-of-range index onto the grid by half-sample mirroring.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// A square convolution kernel of odd side `2 * radius + 1`, indexed by
/// offsets in `-radius..=radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    radius: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(radius: usize, taps: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if taps.len() != side * side {
            return Err(Error::BadLength {
                len: taps.len(),
                width: side,
                height: side,
            });
        }
        if let Some(index) = taps.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { radius, taps })
    }

    pub fn delta() -> Self {
        Self {
            radius: 0,
            taps: vec![1.0],
        }
    }

    pub fn zeros(radius: usize) -> Self {
        let side = 2 * radius + 1;
        Self {
            radius,
            taps: vec![0.0; side * side],
        }
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.radius
    }

    #[inline]
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    #[inline]
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    #[inline]
    pub fn taps_mut(&mut self) -> &mut [f64] {
        &mut self.taps
    }

    /// Tap at offset `(dx, dy)`.
    #[inline]
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        let side = self.side();
        self.taps[((dy + r) as usize) * side + (dx + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.taps.iter().map(|v| v.abs()).sum()
    }

    /// The kernel rotated by 180 degrees.
    pub fn flipped(&self) -> Self {
        let mut taps = self.taps.clone();
        taps.reverse();
        Self {
            radius: self.radius,
            taps,
        }
    }

    /// Re-embeds the kernel with a larger radius (zero padding).
    pub fn padded(&self, radius: usize) -> Self {
        assert!(radius >= self.radius);
        let mut out = Self::zeros(radius);
        let r = self.radius as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let side = out.side();
                let ro = radius as isize;
                out.taps[((dy + ro) as usize) * side + (dx + ro) as usize] = self.at(dx, dy);
            }
        }
        out
    }
}

/// `(k * u)(x) = Σ_j k(j) u(x - j)` with mirrored boundaries.
pub fn convolve(u: &ScalarField, k: &Kernel) -> ScalarField {
    let (w, h) = u.dims();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = convolve_at(u, k, x, y);
        }
    }
    u.like(out)
}

/// Single output sample of [`convolve`].
#[inline]
pub fn convolve_at(u: &ScalarField, k: &Kernel, x: usize, y: usize) -> f64 {
    let (w, h) = u.dims();
    let r = k.radius as isize;
    let side = k.side();
    let d = u.data();
    let mut acc = 0.0;
    for (row, dy) in (-r..=r).enumerate() {
        let sy = reflect_index(y as isize - dy, h);
        let base = sy * w;
        let krow = &k.taps[row * side..(row + 1) * side];
        for (col, dx) in (-r..=r).enumerate() {
            let sx = reflect_index(x as isize - dx, w);
            acc += krow[col] * d[base + sx];
        }
    }
    acc
}

/// Scatters `value` through the transpose of [`convolve`] at output pixel
/// `(x, y)`: adds `k(j) * value` to `out[reflect(x - j)]`.
#[inline]
pub fn convolve_transpose_scatter(out: &mut [f64], dims: (usize, usize), k: &Kernel, x: usize, y: usize, value: f64) {
    let (w, h) = dims;
    let r = k.radius as isize;
    let side = k.side();
    for (row, dy) in (-r..=r).enumerate() {
        let sy = reflect_index(y as isize - dy, h);
        let base = sy * w;
        let krow = &k.taps[row * side..(row + 1) * side];
        for (col, dx) in (-r..=r).enumerate() {
            let sx = reflect_index(x as isize - dx, w);
            out[base + sx] += krow[col] * value;
        }
    }
}

/// Mirror-extended copy of a field with `pad` samples on every side, in
/// row-major order with row length `width + 2 pad`.
pub fn mirror_pad(u: &ScalarField, pad: usize) -> Vec<f64> {
    let (w, h) = u.dims();
    let pw = w + 2 * pad;
    let mut out = Vec::with_capacity(pw * (h + 2 * pad));
    for py in 0..h + 2 * pad {
        let sy = reflect_index(py as isize - pad as isize, h);
        let row = &u.data()[sy * w..(sy + 1) * w];
        out.extend((0..pw).map(|px| row[reflect_index(px as isize - pad as isize, w)]));
    }
    out
}

/// Adjoint of [`mirror_pad`]: folds a padded buffer back onto the grid.
pub fn fold_padded(padded: &[f64], dims: (usize, usize), pad: usize) -> Vec<f64> {
    let (w, h) = dims;
    let pw = w + 2 * pad;
    let mut out = vec![0.0; w * h];
    for py in 0..h + 2 * pad {
        let sy = reflect_index(py as isize - pad as isize, h);
        for px in 0..pw {
            let sx = reflect_index(px as isize - pad as isize, w);
            out[sy * w + sx] += padded[py * pw + px];
        }
    }
    out
}

/// `(k * u)(x, y)` read from a [`mirror_pad`] buffer; `flipped` is
/// `k.flipped()` and `pad >= k.radius()`.
#[inline]
pub fn convolve_padded_at(padded: &[f64], padded_width: usize, pad: usize, flipped: &Kernel, x: usize, y: usize) -> f64 {
    let side = flipped.side();
    let off = pad - flipped.radius;
    let mut acc = 0.0;
    for row in 0..side {
        let start = (y + off + row) * padded_width + x + off;
        let src = &padded[start..start + side];
        let krow = &flipped.taps[row * side..(row + 1) * side];
        acc += krow.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// Transpose of [`convolve_padded_at`]: adds `value * k` into the padded
/// buffer around `(x, y)`.
#[inline]
pub fn scatter_padded_at(padded: &mut [f64], padded_width: usize, pad: usize, flipped: &Kernel, x: usize, y: usize, value: f64) {
    let side = flipped.side();
    let off = pad - flipped.radius;
    for row in 0..side {
        let start = (y + off + row) * padded_width + x + off;
        let dst = &mut padded[start..start + side];
        let krow = &flipped.taps[row * side..(row + 1) * side];
        for (d, k) in dst.iter_mut().zip(krow) {
            *d += k * value;
        }
    }
}

/// Exact transpose of [`convolve`] under the field inner product.
pub fn convolve_transpose(v: &ScalarField, k: &Kernel) -> ScalarField {
    let (w, h) = v.dims();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            convolve_transpose_scatter(&mut out, (w, h), k, x, y, v.get(x, y));
        }
    }
    v.like(out)
}

fn check_scale(u: &ScalarField, s: usize) -> Result<()> {
    if s == 0 {
        return Err(invalid("scale", "must be at least 1"));
    }
    if u.width() % s != 0 || u.height() % s != 0 {
        return Err(Error::NotDivisible {
            width: u.width(),
            height: u.height(),
            scale: s,
        });
    }
    Ok(())
}

/// `s × s` block average.
pub fn downsample(u: &ScalarField, s: usize) -> Result<ScalarField> {
    check_scale(u, s)?;
    let (w, h) = u.dims();
    let (lw, lh) = (w / s, h / s);
    let inv = 1.0 / (s * s) as f64;
    let mut out = vec![0.0; lw * lh];
    for y in 0..h {
        for x in 0..w {
            out[(y / s) * lw + x / s] += u.get(x, y);
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(ScalarField {
        width: lw,
        height: lh,
        data: out,
        pixel_pitch: u.pixel_pitch * s as f64,
    })
}

/// Adjoint of [`downsample`]: each low-resolution sample is replicated into
/// its block and scaled by `1 / s²`.
pub fn upsample_adjoint(v: &ScalarField, s: usize) -> Result<ScalarField> {
    if s == 0 {
        return Err(invalid("scale", "must be at least 1"));
    }
    let (lw, lh) = v.dims();
    let (w, h) = (lw * s, lh * s);
    let inv = 1.0 / (s * s) as f64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = v.get(x / s, y / s) * inv;
        }
    }
    Ok(ScalarField {
        width: w,
        height: h,
        data: out,
        pixel_pitch: v.pixel_pitch / s as f64,
    })
}

/// Bilinear resampling onto a grid of the given size (pixel-centre aligned,
/// edge samples clamped).
pub fn resize_bilinear(u: &ScalarField, width: usize, height: usize) -> ScalarField {
    let (w, h) = u.dims();
    let sx = w as f64 / width as f64;
    let sy = h as f64 / height as f64;
    let coord = |o: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = ScalarField::from_fn(width, height, |x, y| {
        let (x0, x1, tx) = coord(x, sx, w);
        let (y0, y1, ty) = coord(y, sy, h);
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let top = lerp(u.get(x0, y0), u.get(x1, y0), tx);
        let bottom = lerp(u.get(x0, y1), u.get(x1, y1), tx);
        lerp(top, bottom, ty)
    });
    out.pixel_pitch = u.pixel_pitch * sx;
    out
}

/// Bilinear upsampling by an integer factor.
pub fn upsample_bilinear(u: &ScalarField, s: usize) -> ScalarField {
    resize_bilinear(u, u.width() * s, u.height() * s)
}

/// Complex samples on a 2-D grid in standard DFT ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Complex64>,
}

impl ComplexField {
    pub fn get(&self, x: usize, y: usize) -> Complex64 {
        self.data[y * self.width + x]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn fft_2d(width: usize, height: usize, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        col_fft.process(&mut column);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }
    let norm = 1.0 / ((width * height) as f64).sqrt();
    data.iter_mut().for_each(|c| *c *= norm);
}

/// Unitary forward DFT.
pub fn dft2(u: &ScalarField) -> ComplexField {
    let mut data: Vec<Complex64> = u.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_2d(u.width(), u.height(), &mut data, false);
    ComplexField {
        width: u.width(),
        height: u.height(),
        data,
    }
}

/// Unitary inverse DFT of an arbitrary complex grid.
pub fn idft2_complex(spec: &ComplexField) -> ComplexField {
    let mut data = spec.data.clone();
    fft_2d(spec.width, spec.height, &mut data, true);
    ComplexField {
        width: spec.width,
        height: spec.height,
        data,
    }
}

/// Unitary inverse DFT, keeping the real part.
pub fn idft2(spec: &ComplexField) -> ScalarField {
    let c = idft2_complex(spec);
    ScalarField::from_fn(c.width, c.height, |x, y| c.get(x, y).re)
}

/// Radial frequencies (cycles per meter) of the DFT bins of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    width: usize,
    height: usize,
    pixel_pitch: f64,
}

impl FrequencyGrid {
    pub fn new(width: usize, height: usize, pixel_pitch: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("dimensions", "width and height must be positive"));
        }
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(invalid("pixel_pitch", "must be positive and finite"));
        }
        Ok(Self {
            width,
            height,
            pixel_pitch,
        })
    }

    pub fn for_field(u: &ScalarField) -> Self {
        Self {
            width: u.width(),
            height: u.height(),
            pixel_pitch: u.pixel_pitch(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Signed frequency of DFT index `k` on an axis of length `n`.
    #[inline]
    fn axis_frequency(k: usize, n: usize, pitch: f64) -> f64 {
        let signed = if k <= (n - 1) / 2 {
            k as f64
        } else {
            k as f64 - n as f64
        };
        signed / (n as f64 * pitch)
    }

    pub fn frequency(&self, kx: usize, ky: usize) -> (f64, f64) {
        (
            Self::axis_frequency(kx, self.width, self.pixel_pitch),
            Self::axis_frequency(ky, self.height, self.pixel_pitch),
        )
    }

    pub fn radial(&self, kx: usize, ky: usize) -> f64 {
        let (fx, fy) = self.frequency(kx, ky);
        fx.hypot(fy)
    }

    /// All radial frequencies in row-major DFT order.
    pub fn radial_map(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for ky in 0..self.height {
            for kx in 0..self.width {
                out.push(self.radial(kx, ky));
            }
        }
        out
    }
}
