//! Low-rank least-squares and maximum-likelihood covariance objectives, their
//! gradients, latent coordinates and contrast estimates.
//!
//! Per image, with residual `y = Y - P mu` and projected components
//! `Z = P V` (an `N^2 x r` matrix):
//!
//! - least squares: `|y y^* - Z Z^* - sigma^2 I|_F^2`, expanded so that only
//!   `r x r` Gram matrices are formed;
//! - maximum likelihood: `y^* (Z Z^* + sigma^2 I)^{-1} y + log det(Z Z^* + sigma^2 I)`,
//!   evaluated through `M = I + Z^* Z / sigma^2`.
//!
//! Batch values are averages over the images of the batch, plus the
//! regularizer divided by the population size. Gradients use the real-pair
//! convention: for a real `f` of a complex `x`, `G = df/dRe x + i df/dIm x`,
//! so `df = Re sum conj(G) dx`.

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctf::CtfParams;
use crate::error::{Error, Result};
use crate::grid::{FourierImage, FourierVolume};
use crate::projection::{Backprojection, InterpolationScheme, Pose, PreparedVolume, Projector, SlicePlan};
use crate::regularization::ShellRegularizer;
use crate::simulator::ParticleStack;

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Ls,
    Ml,
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ls" => Ok(ObjectiveKind::Ls),
            "ml" => Ok(ObjectiveKind::Ml),
            _ => Err(Error::Config(format!("unknown objective '{s}' (expected ls or ml)"))),
        }
    }
}

/// Mean volume and (not necessarily orthogonal) components; the covariance
/// is `sum_j v_j v_j^*`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankModel {
    pub mean: FourierVolume,
    pub components: Vec<FourierVolume>,
}

impl LowRankModel {
    pub fn new(mean: FourierVolume, components: Vec<FourierVolume>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if components.iter().any(|c| c.n() != mean.n()) {
            return Err(Error::Shape("components and mean differ in size".into()));
        }
        Ok(Self { mean, components })
    }

    pub fn rank(&self) -> usize {
        self.components.len()
    }

    pub fn n(&self) -> usize {
        self.mean.n()
    }
}

/// A subset of the images of a stack together with the poses to use.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub stack: &'a ParticleStack,
    pub poses: &'a [Pose],
    pub indices: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(stack: &'a ParticleStack, poses: &'a [Pose], indices: Vec<usize>) -> Result<Self> {
        if poses.len() != stack.len() {
            return Err(Error::Shape(format!("{} poses for {} images", poses.len(), stack.len())));
        }
        if let Some(i) = indices.iter().find(|&&i| i >= stack.len()) {
            return Err(Error::Shape(format!("batch index {i} out of range")));
        }
        Ok(Self { stack, poses, indices })
    }

    /// Every image of the stack, with the stack's own poses.
    pub fn full(stack: &'a ParticleStack) -> Self {
        Self { stack, poses: &stack.poses, indices: (0..stack.len()).collect() }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Per-image algebra on sampled (disk) vectors
// ---------------------------------------------------------------------------

/// Objective of one image and its gradients with respect to the projected
/// components (`gz`, same shape as `z`) and the residual (`gy`).
#[derive(Clone, Debug)]
pub struct ImageTerms {
    pub value: f64,
    pub gz: DMatrix<Complex64>,
    pub gy: DVector<Complex64>,
}

fn gram(z: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    z.adjoint() * z
}

/// Least-squares objective of one image. `y_extra` is residual energy in
/// pixels not represented in `y`, `pixels` the full pixel count `N^2`.
pub fn ls_image(y: &DVector<Complex64>, y_extra: f64, z: &DMatrix<Complex64>, sigma2: f64, pixels: usize, grad: bool) -> ImageTerms {
    let yy = y.norm_squared() + y_extra;
    let s = gram(z);
    let b = z.adjoint() * y;
    let trace: f64 = (0..s.nrows()).map(|j| s[(j, j)].re).sum();
    let value = yy * yy - 2.0 * (b.norm_squared() + sigma2 * yy) + s.norm_squared() + 2.0 * sigma2 * trace
        + sigma2 * sigma2 * pixels as f64;
    if !grad {
        return ImageTerms { value, gz: DMatrix::zeros(0, 0), gy: DVector::zeros(0) };
    }
    let gz = (z * &s - y * b.adjoint() + z * Complex64::from(sigma2)) * Complex64::from(4.0);
    let gy = (y * Complex64::from(yy - sigma2) - z * &b) * Complex64::from(4.0);
    ImageTerms { value, gz, gy }
}

/// Maximum-likelihood objective of one image (see [`ls_image`] for the
/// arguments).
pub fn ml_image(
    y: &DVector<Complex64>,
    y_extra: f64,
    z: &DMatrix<Complex64>,
    sigma2: f64,
    pixels: usize,
    grad: bool,
) -> Result<ImageTerms> {
    let r = z.ncols();
    let yy = y.norm_squared() + y_extra;
    let m = DMatrix::<Complex64>::identity(r, r) + gram(z) / Complex64::from(sigma2);
    let chol = m.clone().cholesky().ok_or_else(|| Error::Divergence("M is not positive definite".into()))?;
    let b = z.adjoint() * y;
    let u = chol.solve(&b);
    let logdet: f64 = 2.0 * (0..r).map(|j| chol.l_dirty()[(j, j)].re.ln()).sum::<f64>();
    let quad = b.dotc(&u).re;
    let value = (yy - quad / sigma2) / sigma2 + logdet + pixels as f64 * sigma2.ln();
    if !grad {
        return Ok(ImageTerms { value, gz: DMatrix::zeros(0, 0), gy: DVector::zeros(0) });
    }
    let minv = chol.inverse();
    let s2 = Complex64::from(sigma2);
    let zu = z * &u;
    let gz = z * &minv * (Complex64::from(2.0) / s2) - y * u.adjoint() * (Complex64::from(2.0) / (s2 * s2))
        + &zu * u.adjoint() * (Complex64::from(2.0) / (s2 * s2 * s2));
    let gy = y * (Complex64::from(2.0) / s2) - zu * (Complex64::from(2.0) / (s2 * s2));
    Ok(ImageTerms { value, gz, gy })
}

fn image_terms(kind: ObjectiveKind, y: &DVector<Complex64>, y_extra: f64, z: &DMatrix<Complex64>, sigma2: f64, pixels: usize, grad: bool) -> Result<ImageTerms> {
    match kind {
        ObjectiveKind::Ls => Ok(ls_image(y, y_extra, z, sigma2, pixels, grad)),
        ObjectiveKind::Ml => ml_image(y, y_extra, z, sigma2, pixels, grad),
    }
}

/// Ridge solution `Re (Z^* Z + sigma^2 I)^{-1} Z^* y` and the size of the
/// discarded imaginary part.
pub fn ridge_latents(z: &DMatrix<Complex64>, y: &DVector<Complex64>, sigma2: f64) -> (Vec<f64>, f64) {
    let r = z.ncols();
    let a = gram(z) + DMatrix::<Complex64>::identity(r, r) * Complex64::from(sigma2);
    let b = z.adjoint() * y;
    let sol = match a.clone().cholesky() {
        Some(c) => c.solve(&b),
        None => a.lu().solve(&b).unwrap_or_else(|| DVector::zeros(r)),
    };
    let imag = sol.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    (sol.iter().map(|c| c.re).collect(), imag)
}

// ---------------------------------------------------------------------------
// Batched evaluation
// ---------------------------------------------------------------------------

/// Model resampled onto a projector's working grid.
#[derive(Clone, Debug)]
pub struct PreparedModel {
    pub mean: PreparedVolume,
    pub components: Vec<PreparedVolume>,
}

impl PreparedModel {
    pub fn new(projector: &Projector, model: &LowRankModel) -> Result<Self> {
        Ok(Self {
            mean: projector.prepare(&model.mean)?,
            components: model.components.iter().map(|v| projector.prepare(v)).collect::<Result<_>>()?,
        })
    }

    pub fn rank(&self) -> usize {
        self.components.len()
    }
}

/// Projected quantities of one image, in disk samples.
pub struct Projected {
    pub plan: SlicePlan,
    pub filter: Vec<Complex64>,
    /// `Y - P mu` on the disk.
    pub residual: DVector<Complex64>,
    /// Energy of `Y` outside the disk.
    pub outside: f64,
    pub z: DMatrix<Complex64>,
}

pub fn project_image(
    projector: &Projector,
    model: &PreparedModel,
    image: &FourierImage,
    pose: &Pose,
    ctf: &CtfParams,
    derivatives: bool,
) -> Result<Projected> {
    let plan = projector.plan(pose, derivatives)?;
    let filter = projector.filter(pose, ctf);
    let y = projector.gather(image);
    let inside: f64 = y.iter().map(|c| c.norm_sqr()).sum();
    let outside = (image.norm_sqr() - inside).max(0.0);
    let m = projector.project_samples(&plan, &filter, &model.mean);
    let residual = DVector::from_iterator(y.len(), y.iter().zip(&m).map(|(a, b)| a - b));
    let d = projector.disk_len();
    let mut z = DMatrix::zeros(d, model.rank());
    for (j, v) in model.components.iter().enumerate() {
        let s = projector.project_samples(&plan, &filter, v);
        z.column_mut(j).copy_from_slice(&s);
    }
    Ok(Projected { plan, filter, residual, outside, z })
}

/// What to compute in [`evaluate`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Want {
    pub components: bool,
    pub theta: bool,
}

pub struct Evaluation {
    /// Objective of each batch image, in batch order.
    pub values: Vec<f64>,
    /// Sum over the batch of `P_i^* dG/dZ_i` per component, on the working grid.
    pub gradients: Vec<Backprojection>,
    /// Per-image gradient with respect to the rotation vector.
    pub theta: Vec<Vector3<f64>>,
}

/// Per-image data terms over a batch. Images are processed in fixed-size
/// chunks; within a chunk the per-image work runs in parallel and the
/// backprojections are accumulated in image order, so results do not
/// depend on the number of worker threads.
pub fn evaluate(
    projector: &Projector,
    model: &PreparedModel,
    batch: &Batch,
    kind: ObjectiveKind,
    sigma2: f64,
    want: Want,
) -> Result<Evaluation> {
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("noise variance must be positive, got {sigma2}")));
    }
    let stack = batch.stack;
    if stack.n != projector.n() {
        return Err(Error::Shape(format!("stack N={} but projector N={}", stack.n, projector.n())));
    }
    let pixels = stack.n * stack.n;
    let r = model.rank();
    let grad = want.components || want.theta;
    let mut out = Evaluation {
        values: Vec::with_capacity(batch.len()),
        gradients: if want.components { (0..r).map(|_| projector.new_backprojection()).collect() } else { Vec::new() },
        theta: Vec::new(),
    };
    for chunk in batch.indices.chunks(CHUNK) {
        let results: Vec<(Projected, ImageTerms, Vector3<f64>)> = chunk
            .par_iter()
            .map(|&i| -> Result<_> {
                let p = project_image(projector, model, &stack.images[i], &batch.poses[i], &stack.ctfs[i], want.theta)?;
                let t = image_terms(kind, &p.residual, p.outside, &p.z, sigma2, pixels, grad)?;
                let mut th = Vector3::zeros();
                if want.theta {
                    for (j, v) in model.components.iter().enumerate() {
                        let w: Vec<Complex64> = t.gz.column(j).iter().copied().collect();
                        th += projector.theta_gradient(&p.plan, &p.filter, v, &w);
                    }
                    let w: Vec<Complex64> = t.gy.iter().copied().collect();
                    th -= projector.theta_gradient(&p.plan, &p.filter, &model.mean, &w);
                }
                Ok((p, t, th))
            })
            .collect::<Result<_>>()?;
        for (_, t, th) in &results {
            if !t.value.is_finite() {
                return Err(Error::Divergence(format!("non-finite objective {}", t.value)));
            }
            out.values.push(t.value);
            if want.theta {
                out.theta.push(*th);
            }
        }
        if want.components {
            out.gradients.par_iter_mut().enumerate().for_each(|(j, acc)| {
                for (p, t, _) in &results {
                    let col: Vec<Complex64> = t.gz.column(j).iter().copied().collect();
                    projector.backproject_into(&p.plan, &p.filter, &col, acc);
                }
            });
        }
    }
    Ok(out)
}

/// Objective value and component gradients of a batch, including the
/// regularizer (`None` means no regularization). `population` is the number
/// of images the full objective sums over.
pub fn batch_objective(
    batch: &Batch,
    model: &LowRankModel,
    kind: ObjectiveKind,
    sigma2: f64,
    reg: Option<&ShellRegularizer>,
    scheme: InterpolationScheme,
    population: usize,
    with_gradient: bool,
) -> Result<(f64, Vec<FourierVolume>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let projector = Projector::new(model.n(), model.mean.voxel_size(), scheme)?;
    let prepared = PreparedModel::new(&projector, model)?;
    let want = Want { components: with_gradient, theta: false };
    let eval = evaluate(&projector, &prepared, batch, kind, sigma2, want)?;
    let scale = 1.0 / batch.len() as f64;
    let pop = 1.0 / population.max(1) as f64;
    let mut value = eval.values.iter().sum::<f64>() * scale;
    if let Some(reg) = reg {
        value += pop * reg.penalty(kind, &model.components)?;
    }
    if !with_gradient {
        return Ok((value, Vec::new()));
    }
    let mut grads: Vec<FourierVolume> = eval
        .gradients
        .into_iter()
        .map(|g| {
            let mut v = projector.finish(g);
            v.scale(scale);
            v
        })
        .collect();
    if let Some(reg) = reg {
        for (g, rg) in grads.iter_mut().zip(reg.penalty_gradient(kind, &model.components)?) {
            g.axpy(Complex64::from(pop), &rg);
        }
    }
    Ok((value, grads))
}

pub fn ls_objective(batch: &Batch, model: &LowRankModel, sigma2: f64, reg: Option<&ShellRegularizer>, scheme: InterpolationScheme) -> Result<f64> {
    Ok(batch_objective(batch, model, ObjectiveKind::Ls, sigma2, reg, scheme, batch.stack.len(), false)?.0)
}

pub fn ls_gradient(batch: &Batch, model: &LowRankModel, sigma2: f64, reg: Option<&ShellRegularizer>, scheme: InterpolationScheme) -> Result<Vec<FourierVolume>> {
    Ok(batch_objective(batch, model, ObjectiveKind::Ls, sigma2, reg, scheme, batch.stack.len(), true)?.1)
}

pub fn ml_objective(batch: &Batch, model: &LowRankModel, sigma2: f64, reg: Option<&ShellRegularizer>, scheme: InterpolationScheme) -> Result<f64> {
    Ok(batch_objective(batch, model, ObjectiveKind::Ml, sigma2, reg, scheme, batch.stack.len(), false)?.0)
}

pub fn ml_gradient(batch: &Batch, model: &LowRankModel, sigma2: f64, reg: Option<&ShellRegularizer>, scheme: InterpolationScheme) -> Result<Vec<FourierVolume>> {
    Ok(batch_objective(batch, model, ObjectiveKind::Ml, sigma2, reg, scheme, batch.stack.len(), true)?.1)
}

/// Latent coordinates `Re ((PV)^*(PV) + sigma^2 I)^{-1} (PV)^* (Y - P mu)`.
pub fn latent_coordinates(
    image: &FourierImage,
    pose: &Pose,
    ctf: &CtfParams,
    model: &LowRankModel,
    sigma2: f64,
    scheme: InterpolationScheme,
) -> Result<Vec<f64>> {
    let projector = Projector::new(model.n(), model.mean.voxel_size(), scheme)?;
    let prepared = PreparedModel::new(&projector, model)?;
    let p = project_image(&projector, &prepared, image, pose, ctf, false)?;
    Ok(ridge_latents(&p.z, &p.residual, sigma2).0)
}

/// Least-squares contrast `Re[(P(mu + V z))^* Y] / |P(mu + V z)|^2`, relative
/// to the contrast already in `pose`. Returns `(1, false)` when the
/// prediction vanishes.
pub fn contrast_estimate(
    image: &FourierImage,
    pose: &Pose,
    ctf: &CtfParams,
    model: &LowRankModel,
    zhat: &[f64],
    scheme: InterpolationScheme,
) -> Result<(f64, bool)> {
    let projector = Projector::new(model.n(), model.mean.voxel_size(), scheme)?;
    let prepared = PreparedModel::new(&projector, model)?;
    let p = project_image(&projector, &prepared, image, pose, ctf, false)?;
    Ok(contrast_from_projected(&projector, &p, image, zhat))
}

pub fn contrast_from_projected(projector: &Projector, p: &Projected, image: &FourierImage, zhat: &[f64]) -> (f64, bool) {
    let y = projector.gather(image);
    // P mu = Y - residual on the disk
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, yk) in y.iter().enumerate() {
        let mut pred = yk - p.residual[k];
        for (j, zj) in zhat.iter().enumerate() {
            pred += p.z[(k, j)] * zj;
        }
        num += (pred.conj() * yk).re;
        den += pred.norm_sqr();
    }
    if den <= 0.0 || !den.is_finite() {
        return (1.0, false);
    }
    (num / den, true)
}
