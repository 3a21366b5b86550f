//! Dense reference computations shared by the integration tests and the
//! acceptance harness. Everything here builds explicit matrices and avoids
//! the low-rank algebra under test.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lrh::rotation::random_rotation_vector;
use lrh::{CtfParams, FourierImage, FourierVolume, InterpolationScheme, LowRankModel, ParticleStack, Pose, Projector};

pub fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

pub fn random_volume(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> FourierVolume {
    FourierVolume::from_data(n, 1.0, (0..n * n * n).map(|_| complex_normal(rng) * scale).collect()).unwrap()
}

pub fn random_image(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> FourierImage {
    FourierImage::from_data(n, (0..n * n).map(|_| complex_normal(rng) * scale).collect()).unwrap()
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let theta = random_rotation_vector(rng);
    Pose::new(theta, [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)], rng.random_range(0.5..1.5))
}

/// Random stack and model at grid size `n`: arbitrary complex images, random
/// poses and contrasts, CTFs on every other image.
pub fn random_instance(n: usize, count: usize, rank: usize, seed: u64) -> (ParticleStack, LowRankModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = random_volume(n, &mut rng, 1.0);
    let comps = (0..rank).map(|_| random_volume(n, &mut rng, 0.3)).collect();
    let images = (0..count).map(|_| random_image(n, &mut rng, 1.0)).collect();
    let poses = (0..count).map(|_| random_pose(&mut rng)).collect();
    let ctfs = (0..count)
        .map(|i| if i % 2 == 0 { CtfParams::identity() } else { CtfParams::typical(rng.random_range(8000.0..20000.0)) })
        .collect();
    let sigma2 = rng.random_range(0.3..1.5);
    (ParticleStack { n, voxel_size: 1.0, images, ctfs, poses, sigma2 }, LowRankModel::new(mean, comps).unwrap())
}

/// `P_i` as an explicit `N^2 x N^3` matrix, one projected unit voxel per
/// column.
pub fn dense_projection(stack: &ParticleStack, i: usize, scheme: InterpolationScheme) -> DMatrix<Complex64> {
    let n = stack.n;
    let len = n * n * n;
    let p = Projector::new(n, stack.voxel_size, scheme).unwrap();
    let plan = p.plan(&stack.poses[i], false).unwrap();
    let filter = p.filter(&stack.poses[i], &stack.ctfs[i]);
    let mut out = DMatrix::zeros(n * n, len);
    for k in 0..len {
        let mut e = FourierVolume::zeros(n, stack.voxel_size);
        e.data_mut()[k] = Complex64::new(1.0, 0.0);
        let img = p.project_prepared(&plan, &filter, &p.prepare(&e).unwrap());
        out.column_mut(k).copy_from_slice(img.data());
    }
    out
}

pub fn as_vector(v: &FourierVolume) -> DVector<Complex64> {
    DVector::from_column_slice(v.data())
}

/// `Sigma = V V^*` as an explicit `N^3 x N^3` matrix.
pub fn dense_covariance(model: &LowRankModel) -> DMatrix<Complex64> {
    let len = model.mean.len();
    let mut v = DMatrix::zeros(len, model.rank());
    for (j, c) in model.components.iter().enumerate() {
        v.column_mut(j).copy_from_slice(c.data());
    }
    &v * v.adjoint()
}

/// Per-image residual and projected covariance `(Y - P mu, P Sigma P^*)`.
fn dense_terms(stack: &ParticleStack, model: &LowRankModel, i: usize, scheme: InterpolationScheme, sigma: &DMatrix<Complex64>) -> (DVector<Complex64>, DMatrix<Complex64>) {
    let p = dense_projection(stack, i, scheme);
    let y = DVector::from_column_slice(stack.images[i].data()) - &p * as_vector(&model.mean);
    let c = &p * sigma * p.adjoint();
    (y, c)
}

/// Batch mean of `|y y^* - P Sigma P^* - sigma^2 I|_F^2`.
pub fn dense_ls(stack: &ParticleStack, model: &LowRankModel, scheme: InterpolationScheme) -> f64 {
    let sigma = dense_covariance(model);
    let pixels = stack.n * stack.n;
    let total: f64 = (0..stack.len())
        .map(|i| {
            let (y, c) = dense_terms(stack, model, i, scheme, &sigma);
            let e = &y * y.adjoint() - c - DMatrix::<Complex64>::identity(pixels, pixels) * Complex64::from(stack.sigma2);
            e.norm_squared()
        })
        .sum();
    total / stack.len() as f64
}

/// Batch mean of `y^* C^{-1} y + log det C` with `C = P Sigma P^* + sigma^2 I`,
/// by explicit inversion and LU determinant.
pub fn dense_ml(stack: &ParticleStack, model: &LowRankModel, scheme: InterpolationScheme) -> f64 {
    let sigma = dense_covariance(model);
    let pixels = stack.n * stack.n;
    let total: f64 = (0..stack.len())
        .map(|i| {
            let (y, c) = dense_terms(stack, model, i, scheme, &sigma);
            let c = c + DMatrix::<Complex64>::identity(pixels, pixels) * Complex64::from(stack.sigma2);
            let inv = c.clone().try_inverse().unwrap();
            let quad = (y.adjoint() * inv * &y)[(0, 0)].re;
            let logdet = c.lu().determinant().ln().re;
            quad + logdet
        })
        .sum();
    total / stack.len() as f64
}

/// Central difference of `f` along `dir` at `model`.
pub fn directional_fd(f: impl Fn(&LowRankModel) -> f64, model: &LowRankModel, dir: &[FourierVolume], h: f64) -> f64 {
    let shifted = |s: f64| {
        let comps = model
            .components
            .iter()
            .zip(dir)
            .map(|(v, d)| {
                let mut x = v.clone();
                x.axpy(Complex64::from(s), d);
                x
            })
            .collect();
        LowRankModel::new(model.mean.clone(), comps).unwrap()
    };
    (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h)
}

/// `Re sum_j <G_j, D_j>`: the derivative along `dir` predicted by a gradient in
/// the real-pair convention.
pub fn directional_from_gradient(grad: &[FourierVolume], dir: &[FourierVolume]) -> f64 {
    grad.iter().zip(dir).map(|(g, d)| g.inner(d).re).sum()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn unit(v: Vector3<f64>) -> Vector3<f64> {
    v / v.norm()
}
