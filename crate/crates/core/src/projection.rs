//! Per-image linear imaging operator `P = a C T_t S_R`: a central slice of the
//! (optionally oversampled) Fourier volume, a phase ramp for the in-plane
//! offset, the CTF, and the contrast scale. Also its exact adjoint and its
//! derivatives with respect to the rotation vector and the offset.
//!
//! Image pixel with frequency `k = (kx, ky)` samples the volume at
//! `R^T (kx, ky, 0)`, i.e. the plane spanned by the first two rows of `R`.
//! With this convention a volume actively rotated by `R2` and projected
//! with `R1` equals the original projected with `R1 * R2`.
//!
//! Only pixels inside the disk `|k| <= ceil(N/2) - 1` are sampled; all other
//! pixels of a projection are zero. Slice samples falling off the grid
//! contribute zero in both directions, which keeps the adjoint exact.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ctf::CtfParams;
use crate::error::{Error, Result};
use crate::grid::{self, FourierImage, FourierVolume};
use crate::rotation;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const OFF_GRID: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationKind {
    Nearest,
    Trilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterpolationScheme {
    pub kind: InterpolationKind,
    pub oversampling: usize,
}

impl Default for InterpolationScheme {
    fn default() -> Self {
        Self::trilinear(2)
    }
}

impl InterpolationScheme {
    pub fn nearest() -> Self {
        Self { kind: InterpolationKind::Nearest, oversampling: 1 }
    }

    pub fn trilinear(oversampling: usize) -> Self {
        Self { kind: InterpolationKind::Trilinear, oversampling }
    }

    pub fn validate(&self) -> Result<()> {
        if self.oversampling == 0 {
            return Err(Error::Config("oversampling must be at least 1".into()));
        }
        Ok(())
    }
}

/// Orientation, in-plane offset (pixels) and contrast of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub theta: Vector3<f64>,
    pub offset: [f64; 2],
    pub contrast: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { theta: Vector3::zeros(), offset: [0.0, 0.0], contrast: 1.0 }
    }

    pub fn new(theta: Vector3<f64>, offset: [f64; 2], contrast: f64) -> Self {
        Self { theta, offset, contrast }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation::rotation_matrix(&self.theta)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.theta.iter().all(|x| x.is_finite())
            && self.offset.iter().all(|x| x.is_finite())
            && self.contrast.is_finite();
        if !finite {
            return Err(Error::Pose("non-finite pose parameter".into()));
        }
        if self.theta.norm() > PI + 1e-9 {
            return Err(Error::Pose(format!("|theta| = {} exceeds pi", self.theta.norm())));
        }
        Ok(())
    }
}

/// Sampling geometry of one pose: which (oversampled) voxels each image
/// pixel reads and with which weights.
#[derive(Clone, Debug)]
pub struct SlicePlan {
    corners: usize,
    pixels: Vec<u32>,
    index: Vec<u32>,
    weight: Vec<f64>,
    // d(weight)/dq for each corner, trilinear only
    weight_grad: Vec<[f64; 3]>,
    // dq/dtheta_a per pixel, trilinear only
    dq_dtheta: Vec<[Vector3<f64>; 3]>,
}

impl SlicePlan {
    pub fn sampled_pixels(&self) -> &[u32] {
        &self.pixels
    }

    pub fn has_derivatives(&self) -> bool {
        !self.dq_dtheta.is_empty()
    }
}

/// Volume resampled onto the projector's working grid.
#[derive(Clone, Debug)]
pub struct PreparedVolume {
    grid: Vec<Complex64>,
}

impl PreparedVolume {
    pub fn data(&self) -> &[Complex64] {
        &self.grid
    }
}

/// Accumulator for backprojections on the working grid.
#[derive(Clone, Debug)]
pub struct Backprojection {
    grid: Vec<Complex64>,
}

impl Backprojection {
    pub fn data(&self) -> &[Complex64] {
        &self.grid
    }

    pub fn add(&mut self, other: &Backprojection) {
        for (a, b) in self.grid.iter_mut().zip(&other.grid) {
            *a += b;
        }
    }
}

/// Projection operator factory for a fixed image size and interpolation scheme.
#[derive(Clone, Debug)]
pub struct Projector {
    n: usize,
    voxel_size: f64,
    scheme: InterpolationScheme,
    grid_n: usize,
    disk: Vec<(u32, [f64; 2])>,
}

impl Projector {
    pub fn new(n: usize, voxel_size: f64, scheme: InterpolationScheme) -> Result<Self> {
        scheme.validate()?;
        if n < 2 {
            return Err(Error::Config(format!("image size must be at least 2, got {n}")));
        }
        let radius = (n as f64 / 2.0).ceil() - 1.0;
        let mut disk = Vec::new();
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (grid::freq(x, n) as f64, grid::freq(y, n) as f64);
                if fx * fx + fy * fy <= radius * radius + 1e-9 {
                    disk.push(((y * n + x) as u32, [fx, fy]));
                }
            }
        }
        Ok(Self { n, voxel_size, scheme, grid_n: n * scheme.oversampling, disk })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn scheme(&self) -> InterpolationScheme {
        self.scheme
    }

    /// Side of the working (oversampled) grid.
    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    /// Radius (in frequency-index units) of the sampled disk.
    pub fn disk_radius(&self) -> f64 {
        (self.n.div_ceil(2) - 1) as f64
    }

    /// Image pixels that can carry signal.
    pub fn disk_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.disk.iter().map(|(p, _)| *p as usize)
    }

    fn check_volume(&self, vol: &FourierVolume) -> Result<()> {
        if vol.n() != self.n {
            return Err(Error::Shape(format!("volume N={} but projector N={}", vol.n(), self.n)));
        }
        Ok(())
    }

    fn check_image(&self, img: &FourierImage) -> Result<()> {
        if img.n() != self.n {
            return Err(Error::Shape(format!("image N={} but projector N={}", img.n(), self.n)));
        }
        Ok(())
    }

    pub fn prepare(&self, vol: &FourierVolume) -> Result<PreparedVolume> {
        self.check_volume(vol)?;
        Ok(PreparedVolume { grid: grid::oversample(vol, self.scheme.oversampling) })
    }

    pub fn new_backprojection(&self) -> Backprojection {
        Backprojection { grid: vec![ZERO; self.grid_n.pow(3)] }
    }

    /// Map an accumulated backprojection back to the native grid.
    pub fn finish(&self, acc: Backprojection) -> FourierVolume {
        grid::oversample_adjoint(acc.grid, self.n, self.scheme.oversampling, self.voxel_size)
    }

    /// Per-pixel filter `a * C(k) * exp(-2 pi i k.t / N)`.
    pub fn filter(&self, pose: &Pose, ctf: &CtfParams) -> Vec<Complex64> {
        let n = self.n as f64;
        self.disk
            .iter()
            .map(|&(_, [fx, fy])| {
                let c = ctf.value((fx * fx + fy * fy).sqrt(), self.n, self.voxel_size);
                let phase = -2.0 * PI * (fx * pose.offset[0] + fy * pose.offset[1]) / n;
                Complex64::from_polar(pose.contrast * c, phase)
            })
            .collect()
    }

    /// Sampling geometry for a pose. `derivatives` additionally records what
    /// is needed for rotation derivatives (trilinear only).
    pub fn plan(&self, pose: &Pose, derivatives: bool) -> Result<SlicePlan> {
        pose.validate()?;
        let trilinear = self.scheme.kind == InterpolationKind::Trilinear;
        if derivatives && !trilinear {
            return Err(Error::Config(
                "rotation derivatives require trilinear interpolation".into(),
            ));
        }
        let r = pose.rotation();
        let dr = if derivatives { Some(rotation::rotation_derivatives(&pose.theta)) } else { None };
        let s = self.scheme.oversampling as f64;
        let m = self.grid_n;
        let h = grid::center(m) as f64;
        let corners = if trilinear { 8 } else { 1 };
        let npix = self.disk.len();
        let mut plan = SlicePlan {
            corners,
            pixels: Vec::with_capacity(npix),
            index: Vec::with_capacity(npix * corners),
            weight: Vec::with_capacity(npix * corners),
            weight_grad: Vec::new(),
            dq_dtheta: Vec::new(),
        };
        if derivatives {
            plan.weight_grad.reserve(npix * corners);
            plan.dq_dtheta.reserve(npix);
        }
        let in_grid = |i: i64| i >= 0 && (i as usize) < m;
        for &(p, [kx, ky]) in &self.disk {
            let q = Vector3::new(
                r[(0, 0)] * kx + r[(1, 0)] * ky,
                r[(0, 1)] * kx + r[(1, 1)] * ky,
                r[(0, 2)] * kx + r[(1, 2)] * ky,
            ) * s;
            let g = q.add_scalar(h);
            plan.pixels.push(p);
            if !trilinear {
                let (ix, iy, iz) = (g.x.round() as i64, g.y.round() as i64, g.z.round() as i64);
                if in_grid(ix) && in_grid(iy) && in_grid(iz) {
                    plan.index.push(((iz as usize * m + iy as usize) * m + ix as usize) as u32);
                } else {
                    plan.index.push(OFF_GRID);
                }
                plan.weight.push(1.0);
                continue;
            }
            let base = [g.x.floor(), g.y.floor(), g.z.floor()];
            let frac = [g.x - base[0], g.y - base[1], g.z - base[2]];
            for c in 0..8usize {
                let d = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                let w1 = |a: usize| if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                let dw = |a: usize| if d[a] == 1 { 1.0 } else { -1.0 };
                let idx = [base[0] as i64 + d[0] as i64, base[1] as i64 + d[1] as i64, base[2] as i64 + d[2] as i64];
                if idx.iter().all(|&i| in_grid(i)) {
                    plan.index.push(((idx[2] as usize * m + idx[1] as usize) * m + idx[0] as usize) as u32);
                } else {
                    plan.index.push(OFF_GRID);
                }
                plan.weight.push(w1(0) * w1(1) * w1(2));
                if derivatives {
                    plan.weight_grad.push([
                        dw(0) * w1(1) * w1(2),
                        w1(0) * dw(1) * w1(2),
                        w1(0) * w1(1) * dw(2),
                    ]);
                }
            }
            if let Some(dr) = &dr {
                plan.dq_dtheta.push(dr.map(|d| {
                    Vector3::new(
                        d[(0, 0)] * kx + d[(1, 0)] * ky,
                        d[(0, 1)] * kx + d[(1, 1)] * ky,
                        d[(0, 2)] * kx + d[(1, 2)] * ky,
                    ) * s
                }));
            }
        }
        Ok(plan)
    }

    /// Unfiltered slice samples, one per disk pixel.
    pub fn sample(&self, plan: &SlicePlan, vol: &PreparedVolume) -> Vec<Complex64> {
        let k = plan.corners;
        (0..plan.pixels.len())
            .map(|j| {
                let mut acc = ZERO;
                for c in j * k..(j + 1) * k {
                    let i = plan.index[c];
                    if i != OFF_GRID {
                        acc += vol.grid[i as usize] * plan.weight[c];
                    }
                }
                acc
            })
            .collect()
    }

    /// Filtered projection as disk samples.
    pub fn project_samples(&self, plan: &SlicePlan, filter: &[Complex64], vol: &PreparedVolume) -> Vec<Complex64> {
        let mut s = self.sample(plan, vol);
        for (x, f) in s.iter_mut().zip(filter) {
            *x *= f;
        }
        s
    }

    pub fn project_prepared(
        &self,
        plan: &SlicePlan,
        filter: &[Complex64],
        vol: &PreparedVolume,
    ) -> FourierImage {
        self.scatter(&self.project_samples(plan, filter, vol))
    }

    /// Disk samples of a full image.
    pub fn gather(&self, img: &FourierImage) -> Vec<Complex64> {
        self.disk.iter().map(|(p, _)| img.data()[*p as usize]).collect()
    }

    /// Full image from disk samples (zero elsewhere).
    pub fn scatter(&self, samples: &[Complex64]) -> FourierImage {
        let mut img = FourierImage::zeros(self.n);
        let data = img.data_mut();
        for ((p, _), v) in self.disk.iter().zip(samples) {
            data[*p as usize] = *v;
        }
        img
    }

    /// Number of disk samples per image.
    pub fn disk_len(&self) -> usize {
        self.disk.len()
    }

    /// `acc += P^* img` on the working grid, with `img` given as disk samples.
    pub fn backproject_into(
        &self,
        plan: &SlicePlan,
        filter: &[Complex64],
        img: &[Complex64],
        acc: &mut Backprojection,
    ) {
        let k = plan.corners;
        for j in 0..plan.pixels.len() {
            let v = filter[j].conj() * img[j];
            if v == ZERO {
                continue;
            }
            for c in j * k..(j + 1) * k {
                let i = plan.index[c];
                if i != OFF_GRID {
                    acc.grid[i as usize] += v * plan.weight[c];
                }
            }
        }
    }

    /// Derivatives of the (filtered) projection with respect to the three
    /// rotation-vector components.
    pub fn jacobian_prepared(
        &self,
        plan: &SlicePlan,
        filter: &[Complex64],
        vol: &PreparedVolume,
    ) -> Result<[FourierImage; 3]> {
        if !plan.has_derivatives() {
            return Err(Error::Config("slice plan was built without derivatives".into()));
        }
        let mut out = [FourierImage::zeros(self.n), FourierImage::zeros(self.n), FourierImage::zeros(self.n)];
        for (j, &p) in plan.pixels.iter().enumerate() {
            let g = self.sample_gradient(plan, j, vol);
            for (a, img) in out.iter_mut().enumerate() {
                let dq = plan.dq_dtheta[j][a];
                img.data_mut()[p as usize] = filter[j] * (g[0] * dq.x + g[1] * dq.y + g[2] * dq.z);
            }
        }
        Ok(out)
    }

    // gradient of the unfiltered sample w.r.t. the grid coordinate q
    #[inline]
    fn sample_gradient(&self, plan: &SlicePlan, j: usize, vol: &PreparedVolume) -> [Complex64; 3] {
        let mut g = [ZERO; 3];
        for c in j * 8..(j + 1) * 8 {
            let i = plan.index[c];
            if i != OFF_GRID {
                let v = vol.grid[i as usize];
                let w = plan.weight_grad[c];
                g[0] += v * w[0];
                g[1] += v * w[1];
                g[2] += v * w[2];
            }
        }
        g
    }

    /// `Re sum_p conj(W_p) d(P vol)_p / d theta` for each rotation component,
    /// i.e. the chain rule through a real objective whose gradient with
    /// respect to the projected image is `W` (given as disk samples).
    pub fn theta_gradient(
        &self,
        plan: &SlicePlan,
        filter: &[Complex64],
        vol: &PreparedVolume,
        weight: &[Complex64],
    ) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for j in 0..plan.pixels.len() {
            let w = weight[j];
            if w == ZERO {
                continue;
            }
            let g = self.sample_gradient(plan, j, vol);
            let f = w.conj() * filter[j];
            let dq = &plan.dq_dtheta[j];
            for a in 0..3 {
                let d = g[0] * dq[a].x + g[1] * dq[a].y + g[2] * dq[a].z;
                out[a] += (f * d).re;
            }
        }
        out
    }
}

/// Project a volume with a single pose.
pub fn project(
    vol: &FourierVolume,
    pose: &Pose,
    ctf: &CtfParams,
    scheme: InterpolationScheme,
) -> Result<FourierImage> {
    let p = Projector::new(vol.n(), vol.voxel_size(), scheme)?;
    let plan = p.plan(pose, false)?;
    Ok(p.project_prepared(&plan, &p.filter(pose, ctf), &p.prepare(vol)?))
}

/// Exact adjoint of [`project`].
pub fn backproject(
    img: &FourierImage,
    pose: &Pose,
    ctf: &CtfParams,
    scheme: InterpolationScheme,
    voxel_size: f64,
) -> Result<FourierVolume> {
    let p = Projector::new(img.n(), voxel_size, scheme)?;
    p.check_image(img)?;
    let plan = p.plan(pose, false)?;
    let mut acc = p.new_backprojection();
    p.backproject_into(&plan, &p.filter(pose, ctf), &p.gather(img), &mut acc);
    Ok(p.finish(acc))
}

/// Derivatives of [`project`] with respect to the rotation vector.
pub fn project_jacobian_theta(
    vol: &FourierVolume,
    pose: &Pose,
    ctf: &CtfParams,
    scheme: InterpolationScheme,
) -> Result<[FourierImage; 3]> {
    let p = Projector::new(vol.n(), vol.voxel_size(), scheme)?;
    let plan = p.plan(pose, true)?;
    p.jacobian_prepared(&plan, &p.filter(pose, ctf), &p.prepare(vol)?)
}

// ---------------------------------------------------------------------------
// Offsets
// ---------------------------------------------------------------------------

/// Objective terms of one image as a function of its in-plane offset.
///
/// With the offset removed from the model, every objective used for offset
/// refinement has the form `f(t) = w(t)^* A w(t) + const` where
/// `w(t) = T_t^* Y - m` un-shifts the observed image and `m` is the
/// unshifted model prediction. `A = c0 I - c1 Z K Z^*` for a set of unshifted
/// projected components `Z` and a Hermitian `r x r` matrix `K`.
#[derive(Clone, Debug)]
pub struct OffsetTerms {
    pub n: usize,
    pub image: Vec<Complex64>,
    pub reference: Vec<Complex64>,
    pub basis: Vec<Vec<Complex64>>,
    pub kernel: DMatrix<Complex64>,
    pub c0: f64,
    pub c1: f64,
}

impl OffsetTerms {
    fn unshift(&self, t: [f64; 2]) -> Vec<Complex64> {
        let n = self.n;
        self.image
            .iter()
            .enumerate()
            .map(|(p, y)| {
                let (fx, fy) = (grid::freq(p % n, n) as f64, grid::freq(p / n, n) as f64);
                y * Complex64::from_polar(1.0, 2.0 * PI * (fx * t[0] + fy * t[1]) / n as f64)
            })
            .collect()
    }

    fn apply_a(&self, w: &[Complex64]) -> Vec<Complex64> {
        let mut out: Vec<Complex64> = w.iter().map(|x| x * self.c0).collect();
        if self.basis.is_empty() || self.c1 == 0.0 {
            return out;
        }
        let b = nalgebra::DVector::from_iterator(
            self.basis.len(),
            self.basis.iter().map(|z| grid::inner(z, w)),
        );
        let u = &self.kernel * b;
        for (z, uj) in self.basis.iter().zip(u.iter()) {
            let c = uj * self.c1;
            for (o, zp) in out.iter_mut().zip(z) {
                *o -= c * zp;
            }
        }
        out
    }

    pub fn value(&self, t: [f64; 2]) -> f64 {
        let w: Vec<Complex64> =
            self.unshift(t).iter().zip(&self.reference).map(|(u, m)| u - m).collect();
        grid::inner(&w, &self.apply_a(&w)).re
    }

    pub fn gradient_hessian(&self, t: [f64; 2]) -> (Vector2<f64>, Matrix2<f64>) {
        let n = self.n;
        let u = self.unshift(t);
        let w: Vec<Complex64> = u.iter().zip(&self.reference).map(|(u, m)| u - m).collect();
        let k = 2.0 * PI / n as f64;
        let i = Complex64::i();
        let dw: [Vec<Complex64>; 2] = std::array::from_fn(|a| {
            u.iter()
                .enumerate()
                .map(|(p, up)| {
                    let f = [grid::freq(p % n, n) as f64, grid::freq(p / n, n) as f64][a];
                    i * (k * f) * up
                })
                .collect()
        });
        let aw = self.apply_a(&w);
        let adw = [self.apply_a(&dw[0]), self.apply_a(&dw[1])];
        let mut g = Vector2::zeros();
        let mut hess = Matrix2::zeros();
        for a in 0..2 {
            g[a] = 2.0 * grid::inner(&aw, &dw[a]).re;
            for b in 0..2 {
                // w^* A d2w, with d2w_ab = -(k f_a)(k f_b) u
                let mut second = ZERO;
                for (p, (awp, up)) in aw.iter().zip(&u).enumerate() {
                    let f = [grid::freq(p % n, n) as f64, grid::freq(p / n, n) as f64];
                    second += awp.conj() * up * (-(k * f[a]) * (k * f[b]));
                }
                hess[(a, b)] = 2.0 * grid::inner(&dw[a], &adw[b]).re + 2.0 * second.re;
            }
        }
        (g, hess)
    }
}

/// Analytic offset gradient and Hessian at `pose.offset`.
pub fn offset_gradient_hessian(terms: &OffsetTerms, pose: &Pose) -> (Vector2<f64>, Matrix2<f64>) {
    terms.gradient_hessian(pose.offset)
}
