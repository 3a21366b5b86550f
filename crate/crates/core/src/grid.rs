//! Centered Fourier grids, transforms, frequency shells and shell-wise
//! comparison primitives.
//!
//! Every grid in the crate is *centered*: along each axis the zero frequency
//! (and the real-space origin) lives at index `n / 2` (integer division), so
//! index `i` corresponds to the signed frequency `i - n / 2`. Transforms are
//! unitary, which makes Parseval hold without any scale bookkeeping.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Index of the zero frequency along an axis of length `n`.
#[inline]
pub fn center(n: usize) -> usize {
    n / 2
}

/// Signed frequency for a centered index.
#[inline]
pub fn freq(i: usize, n: usize) -> i64 {
    i as i64 - center(n) as i64
}

/// Centered index of a signed frequency, or `None` when it falls off the grid.
#[inline]
pub fn index_of(f: i64, n: usize) -> Option<usize> {
    let i = f + center(n) as i64;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// Real-valued cubic volume in real space (centered origin).
#[derive(Clone, Debug, PartialEq)]
pub struct RealVolume {
    n: usize,
    data: Vec<f64>,
}

impl RealVolume {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n * n {
            return Err(Error::Shape(format!(
                "expected a cubic {n}^3 grid, got {} samples",
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Centered complex `N x N x N` Fourier volume, stored z-major (`(z * n + y) * n + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct FourierVolume {
    n: usize,
    voxel_size: f64,
    data: Vec<Complex64>,
}

impl FourierVolume {
    pub fn zeros(n: usize, voxel_size: f64) -> Self {
        Self { n, voxel_size, data: vec![ZERO; n * n * n] }
    }

    pub fn from_data(n: usize, voxel_size: f64, data: Vec<Complex64>) -> Result<Self> {
        if n == 0 || data.len() != n * n * n {
            return Err(Error::Shape(format!(
                "expected {n}^3 Fourier coefficients, got {}",
                data.len()
            )));
        }
        Ok(Self { n, voxel_size, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    /// Linear index of the signed frequency `(fx, fy, fz)`.
    pub fn index(&self, fx: i64, fy: i64, fz: i64) -> Option<usize> {
        let n = self.n;
        Some((index_of(fz, n)? * n + index_of(fy, n)?) * n + index_of(fx, n)?)
    }

    /// Signed frequency of a linear index.
    pub fn frequency(&self, idx: usize) -> [i64; 3] {
        let n = self.n;
        [freq(idx % n, n), freq((idx / n) % n, n), freq(idx / (n * n), n)]
    }

    pub fn get(&self, fx: i64, fy: i64, fz: i64) -> Complex64 {
        self.index(fx, fy, fz).map_or(ZERO, |i| self.data[i])
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `<self, other> = self^* other`.
    pub fn inner(&self, other: &Self) -> Complex64 {
        inner(&self.data, &other.data)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|c| *c *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: Complex64, other: &Self) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    /// Largest deviation from Hermitian symmetry, relative to the largest
    /// coefficient. Only frequency pairs that are both on the grid count.
    pub fn hermitian_defect(&self) -> f64 {
        let peak = self.data.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if peak == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for (idx, c) in self.data.iter().enumerate() {
            let [fx, fy, fz] = self.frequency(idx);
            if let Some(j) = self.index(-fx, -fy, -fz) {
                worst = worst.max((c - self.data[j].conj()).norm());
            }
        }
        worst / peak
    }
}

/// Centered complex `N x N` Fourier image, stored row-major (`y * n + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct FourierImage {
    n: usize,
    data: Vec<Complex64>,
}

impl FourierImage {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![ZERO; n * n] }
    }

    pub fn from_data(n: usize, data: Vec<Complex64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::Shape(format!(
                "expected {n}^2 Fourier coefficients, got {}",
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn frequency(&self, idx: usize) -> [i64; 2] {
        [freq(idx % self.n, self.n), freq(idx / self.n, self.n)]
    }

    pub fn index(&self, fx: i64, fy: i64) -> Option<usize> {
        Some(index_of(fy, self.n)? * self.n + index_of(fx, self.n)?)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn inner(&self, other: &Self) -> Complex64 {
        inner(&self.data, &other.data)
    }

    pub fn hermitian_defect(&self) -> f64 {
        let peak = self.data.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if peak == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for (idx, c) in self.data.iter().enumerate() {
            let [fx, fy] = self.frequency(idx);
            if let Some(j) = self.index(-fx, -fy) {
                worst = worst.max((c - self.data[j].conj()).norm());
            }
        }
        worst / peak
    }
}

/// `a^* b` over flat slices.
#[inline]
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

/// In-place centered, unitary FFT of a `dims`-dimensional cube of side `n`.
pub fn centered_fft(data: &mut [Complex64], n: usize, dims: u32, inverse: bool) {
    debug_assert_eq!(data.len(), n.pow(dims));
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    let mut scratch = vec![ZERO; fft.get_inplace_scratch_len()];
    let mut line = vec![ZERO; n];
    let h = center(n);
    let total = data.len();
    for axis in 0..dims {
        let stride = n.pow(axis);
        let block = stride * n;
        for outer in (0..total).step_by(block) {
            for inner_off in 0..stride {
                let base = outer + inner_off;
                // ifftshift on the way in, fftshift on the way out
                for c in 0..n {
                    line[(c + n - h) % n] = data[base + c * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for c in 0..n {
                    data[base + c * stride] = line[(c + n - h) % n];
                }
            }
        }
    }
    let s = (n as f64).powf(-(dims as f64) / 2.0);
    data.iter_mut().for_each(|v| *v *= s);
}

/// Unitary centered 3-D transform of a real volume.
pub fn forward_fft_3d(vol: &RealVolume) -> FourierVolume {
    let n = vol.n();
    let mut data: Vec<Complex64> = vol.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
    centered_fft(&mut data, n, 3, false);
    FourierVolume { n, voxel_size: 1.0, data }
}

/// Inverse of [`forward_fft_3d`], keeping the complex result.
pub fn inverse_fft_3d(vol: &FourierVolume) -> Vec<Complex64> {
    let mut data = vol.data().to_vec();
    centered_fft(&mut data, vol.n(), 3, true);
    data
}

/// Real part of the inverse transform.
pub fn inverse_fft_3d_real(vol: &FourierVolume) -> RealVolume {
    let data = inverse_fft_3d(vol).into_iter().map(|c| c.re).collect();
    RealVolume { n: vol.n(), data }
}

pub fn forward_fft_2d(n: usize, real: &[f64]) -> Result<FourierImage> {
    if real.len() != n * n {
        return Err(Error::Shape(format!("expected {n}^2 pixels, got {}", real.len())));
    }
    let mut data: Vec<Complex64> = real.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    centered_fft(&mut data, n, 2, false);
    Ok(FourierImage { n, data })
}

pub fn inverse_fft_2d(img: &FourierImage) -> Vec<Complex64> {
    let mut data = img.data().to_vec();
    centered_fft(&mut data, img.n(), 2, true);
    data
}

// ---------------------------------------------------------------------------
// Oversampling
// ---------------------------------------------------------------------------

/// Resample a Fourier volume onto the `factor`-times finer grid obtained by
/// zero-padding in real space. Scaled so that samples at integer multiples of
/// `factor` reproduce the original coefficients exactly.
pub fn oversample(vol: &FourierVolume, factor: usize) -> Vec<Complex64> {
    if factor == 1 {
        return vol.data().to_vec();
    }
    let n = vol.n();
    let m = n * factor;
    let real = inverse_fft_3d(vol);
    let mut padded = vec![ZERO; m * m * m];
    let off = center(m) - center(n);
    for z in 0..n {
        for y in 0..n {
            let src = (z * n + y) * n;
            let dst = ((z + off) * m + y + off) * m + off;
            padded[dst..dst + n].copy_from_slice(&real[src..src + n]);
        }
    }
    centered_fft(&mut padded, m, 3, false);
    let s = (factor as f64).powf(1.5);
    padded.iter_mut().for_each(|v| *v *= s);
    padded
}

/// Exact adjoint of [`oversample`].
pub fn oversample_adjoint(grid: Vec<Complex64>, n: usize, factor: usize, voxel_size: f64) -> FourierVolume {
    if factor == 1 {
        return FourierVolume { n, voxel_size, data: grid };
    }
    let m = n * factor;
    let mut grid = grid;
    centered_fft(&mut grid, m, 3, true);
    let off = center(m) - center(n);
    let mut data = vec![ZERO; n * n * n];
    for z in 0..n {
        for y in 0..n {
            let dst = (z * n + y) * n;
            let src = ((z + off) * m + y + off) * m + off;
            data[dst..dst + n].copy_from_slice(&grid[src..src + n]);
        }
    }
    centered_fft(&mut data, n, 3, false);
    let s = (factor as f64).powf(1.5);
    data.iter_mut().for_each(|v| *v *= s);
    FourierVolume { n, voxel_size, data }
}

// ---------------------------------------------------------------------------
// Shells, filters, FSC
// ---------------------------------------------------------------------------

/// Partition of the frequency grid into unit-width radial shells:
/// shell `i` holds every `f` with `|f|` in `[i - 0.5, i + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShellIndex {
    n: usize,
    shell_of: Vec<usize>,
    count: usize,
}

impl ShellIndex {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of radial shells.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Shell of each voxel, in volume storage order.
    pub fn shell_of(&self) -> &[usize] {
        &self.shell_of
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &s in &self.shell_of {
            sizes[s] += 1;
        }
        sizes
    }

    /// Voxel indices of every shell.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (idx, &s) in self.shell_of.iter().enumerate() {
            out[s].push(idx);
        }
        out
    }

    /// Expand one value per shell to a full volume of values.
    pub fn broadcast(&self, per_shell: &[f64]) -> Vec<f64> {
        self.shell_of.iter().map(|&s| per_shell[s]).collect()
    }
}

/// Radius band assignment used for shells: `round(|f|)`, half-open upward.
#[inline]
pub fn shell_of_radius(r: f64) -> usize {
    (r + 0.5).floor() as usize
}

pub fn build_shells(n: usize) -> Result<ShellIndex> {
    if n < 2 {
        return Err(Error::Config(format!("shell index needs N >= 2, got {n}")));
    }
    let mut shell_of = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let (fx, fy, fz) = (freq(x, n) as f64, freq(y, n) as f64, freq(z, n) as f64);
                shell_of.push(shell_of_radius((fx * fx + fy * fy + fz * fz).sqrt()));
            }
        }
    }
    let count = shell_of.iter().copied().max().unwrap_or(0) + 1;
    Ok(ShellIndex { n, shell_of, count })
}

/// Radius (in frequency-index units) passed by a cutoff given in radians.
#[inline]
pub fn cutoff_radius(cutoff: f64, n: usize) -> f64 {
    cutoff * n as f64 / (2.0 * PI)
}

/// Zero every coefficient with `|f| * 2 pi / N > cutoff`, in place. A
/// cutoff of pi or more is the full band and leaves the volume unchanged.
pub fn lowpass_in_place(vol: &mut FourierVolume, cutoff: f64) -> Result<()> {
    if !(cutoff > 0.0) {
        return Err(Error::Config(format!("lowpass cutoff must be positive, got {cutoff}")));
    }
    if cutoff >= PI {
        return Ok(());
    }
    ball_mask_in_place(vol, cutoff);
    Ok(())
}

/// Zero every coefficient with `|f| * 2 pi / N > cutoff` for any cutoff,
/// including the cube corners beyond pi.
pub fn ball_mask_in_place(vol: &mut FourierVolume, cutoff: f64) {
    let n = vol.n();
    let scale = 2.0 * PI / n as f64;
    for idx in 0..vol.len() {
        let [fx, fy, fz] = vol.frequency(idx);
        let r = ((fx * fx + fy * fy + fz * fz) as f64).sqrt();
        if r * scale > cutoff {
            vol.data[idx] = ZERO;
        }
    }
}

pub fn lowpass(vol: &FourierVolume, cutoff: f64) -> Result<FourierVolume> {
    let mut out = vol.clone();
    lowpass_in_place(&mut out, cutoff)?;
    Ok(out)
}

/// Per-shell Fourier shell correlation. `None` marks shells where either
/// input has no energy.
pub fn fsc(a: &FourierVolume, b: &FourierVolume) -> Result<Vec<Option<f64>>> {
    if a.n() != b.n() {
        return Err(Error::Shape(format!("FSC of N={} against N={}", a.n(), b.n())));
    }
    let shells = build_shells(a.n().max(2))?;
    let k = shells.count();
    let mut cross = vec![0.0; k];
    let mut na = vec![0.0; k];
    let mut nb = vec![0.0; k];
    for (idx, &s) in shells.shell_of().iter().enumerate() {
        let (x, y) = (a.data[idx], b.data[idx]);
        cross[s] += (x.conj() * y).re;
        na[s] += x.norm_sqr();
        nb[s] += y.norm_sqr();
    }
    Ok((0..k)
        .map(|s| {
            let d = (na[s] * nb[s]).sqrt();
            (d > 0.0).then(|| (cross[s] / d).clamp(-1.0, 1.0))
        })
        .collect())
}
