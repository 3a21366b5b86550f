//! Stochastic fitting of the low-rank covariance model.
//!
//! The images are split into two halves (even and odd indices), each with
//! its own components and Adam state; the shell regularizer of each half is
//! rebuilt from the covariance correlation of the two halves whenever the
//! lowpass cutoff doubles. The first stage runs unregularized. Internally
//! images are divided by the noise standard deviation so the fit works at
//! unit noise variance; results are returned in the original units.

pub mod adam;
pub mod mean;
pub mod pose;

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::grid::{self, FourierVolume, RealVolume};
use crate::metrics;
use crate::objectives::{self, Batch, LowRankModel, PreparedModel, Want};
use crate::projection::{InterpolationScheme, Pose, Projector};
use crate::regularization::{self, ShellRegularizer, ShellWeights};
use crate::rotation;
use crate::simulator::ParticleStack;

pub use adam::{AdamParams, AdamState};
pub use mean::refresh_mean;
pub use pose::{newton_offset, offset_terms, refine_offsets, refine_rotations_step, refresh_contrast, rotation_gradients};

/// Contrast estimates at or below this are treated as failures.
const CONTRAST_FLOOR: f64 = 0.05;

/// Thin SVD of the matrix whose columns are `components`. Returns
/// orthonormal volumes `u_j` and nonincreasing singular values `s_j` with
/// `sum_j s_j^2 u_j u_j^* = sum_j v_j v_j^*`.
pub fn orthogonalize(components: &[FourierVolume]) -> Result<(Vec<FourierVolume>, Vec<f64>)> {
    let first = components.first().ok_or_else(|| Error::Config("nothing to orthogonalize".into()))?;
    let (n, voxel, len) = (first.n(), first.voxel_size(), first.len());
    let r = components.len();
    let v = DMatrix::from_fn(len, r, |i, j| components[j].data()[i]);
    let qr = v.qr();
    let q = qr.q();
    let svd = qr.r().svd(true, false);
    let u = q * svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let vols = order
        .iter()
        .map(|&k| FourierVolume::from_data(n, voxel, u.column(k).iter().copied().collect()))
        .collect::<Result<_>>()?;
    Ok((vols, order.iter().map(|&k| svd.singular_values[k]).collect()))
}

/// Output of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult {
    /// Mean and orthonormal components.
    pub model: LowRankModel,
    pub singular_values: Vec<f64>,
    /// Poses after refinement (the input poses when refinement is off).
    pub poses: Vec<Pose>,
    /// Latent coordinates in the basis `s_j u_j`.
    pub latents: Vec<Vec<f64>>,
    /// Epoch-mean batch objective.
    pub objective_trace: Vec<f64>,
    /// Mean rotation error (degrees) after each epoch, when reference poses
    /// were supplied.
    pub pose_error_trace: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Distinct lowpass cutoffs in the order they were used.
    pub cutoffs: Vec<f64>,
}

impl FitResult {
    /// Components scaled by their singular values (`Sigma = V V^*`).
    pub fn scaled_components(&self) -> Vec<FourierVolume> {
        self.model.components.iter().zip(&self.singular_values).map(|(u, s)| u.scaled(*s)).collect()
    }
}

/// Optional inputs of [`fit`].
#[derive(Clone, Debug, Default)]
pub struct FitInputs<'a> {
    /// Initial mean; reconstructed from the images when absent.
    pub mean: Option<&'a FourierVolume>,
    /// Reference poses for the pose-error trace.
    pub reference_poses: Option<&'a [Pose]>,
}

struct Half {
    indices: Vec<usize>,
    components: Vec<FourierVolume>,
    adam: Vec<AdamState>,
    reg: ShellRegularizer,
    weights: ShellWeights,
}

fn initial_components(n: usize, voxel: f64, rank: usize, rms: f64, cutoff: f64, rng: &mut ChaCha8Rng) -> Result<Vec<FourierVolume>> {
    (0..rank)
        .map(|_| {
            let noise: Vec<f64> = (0..n * n * n).map(|_| StandardNormal.sample(rng)).collect();
            let mut v = grid::forward_fft_3d(&RealVolume::new(n, noise)?);
            for idx in 0..v.len() {
                let [x, y, z] = v.frequency(idx);
                let f2 = (x * x + y * y + z * z) as f64;
                v.data_mut()[idx] *= 1.0 / (1.0 + f2);
            }
            grid::ball_mask_in_place(&mut v, cutoff);
            let now = (v.norm_sqr() / v.len() as f64).sqrt();
            if now > 0.0 {
                v.scale(rms / now);
            }
            FourierVolume::from_data(n, voxel, v.into_data())
        })
        .collect()
}

fn whiten(stack: &ParticleStack) -> ParticleStack {
    let s = 1.0 / stack.sigma2.sqrt();
    let mut w = stack.clone();
    for img in &mut w.images {
        img.data_mut().iter_mut().for_each(|c| *c *= s);
    }
    w.sigma2 = 1.0;
    w
}

/// Mean reconstruction with a half-set prior: two unregularized half means
/// give the per-shell prior for the full solve.
fn reconstruct_mean(
    projector: &Projector,
    stack: &ParticleStack,
    poses: &[Pose],
    halves: [&[usize]; 2],
    diagonal: &[f64],
    all: &[usize],
    cg: usize,
) -> Result<FourierVolume> {
    let shells = grid::build_shells(stack.n)?;
    let ma = refresh_mean(projector, stack, poses, halves[0], None, cg)?;
    let mb = refresh_mean(projector, stack, poses, halves[1], None, cg)?;
    let half_diag: Vec<f64> = diagonal.iter().map(|d| 0.5 * d).collect();
    let prior = regularization::build_mean_prior(&ma, &mb, &shells, &half_diag)?;
    refresh_mean(projector, stack, poses, all, Some(&prior), cg)
}

/// Fit a rank-`config.rank` covariance model to `stack`, whose poses are
/// used as the initial (or fixed) pose estimates.
pub fn fit(stack: &ParticleStack, config: &OptimConfig, inputs: FitInputs) -> Result<FitResult> {
    config.validate()?;
    stack.validate()?;
    let n_img = stack.len();
    if n_img < 2 {
        return Err(Error::Config("fitting needs at least two images (one per half)".into()));
    }
    if let Some(r) = inputs.reference_poses {
        if r.len() != n_img {
            return Err(Error::Shape("reference poses do not match the stack".into()));
        }
    }
    let sigma = stack.sigma2.sqrt();
    let data = whiten(stack);
    let n = data.n;
    let voxel = data.voxel_size;
    let scheme = config.scheme();
    let projector = Projector::new(n, voxel, scheme)?;
    let shells = grid::build_shells(n)?;
    let mut poses = data.poses.clone();
    let all: Vec<usize> = (0..n_img).collect();
    let even: Vec<usize> = all.iter().copied().filter(|i| i % 2 == 0).collect();
    let odd: Vec<usize> = all.iter().copied().filter(|i| i % 2 == 1).collect();
    let adam_params = AdamParams { beta1: config.adam_beta1, beta2: config.adam_beta2, eps: config.adam_eps };
    let len = n * n * n;

    let weights_of = |poses: &[Pose], idx: &[usize]| regularization::shell_weights(&data, poses, idx, &shells);
    let mut halves: Vec<Half> = Vec::with_capacity(2);
    let mut mean = match inputs.mean {
        Some(m) => {
            if m.n() != n {
                return Err(Error::Shape("initial mean does not match the images".into()));
            }
            FourierVolume::from_data(n, voxel, m.data().iter().map(|c| c / sigma).collect())?
        }
        None => FourierVolume::zeros(n, voxel),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for idx in [even, odd] {
        let weights = weights_of(&poses, &idx)?;
        halves.push(Half {
            indices: idx,
            components: Vec::new(),
            adam: (0..config.rank).map(|_| AdamState::new(2 * len, adam_params)).collect(),
            reg: ShellRegularizer::none(),
            weights,
        });
    }
    let diagonal = |h: &[Half]| -> Vec<f64> { h[0].weights.diagonal.iter().zip(&h[1].weights.diagonal).map(|(a, b)| a + b).collect() };
    if inputs.mean.is_none() {
        mean = reconstruct_mean(&projector, &data, &poses, [&halves[0].indices, &halves[1].indices], &diagonal(&halves), &all, config.mean_cg_iterations)?;
    }
    let mean_rms = (mean.norm_sqr() / len as f64).sqrt();
    for h in halves.iter_mut() {
        h.components = initial_components(n, voxel, config.rank, config.init_scale * mean_rms, support_cutoff(&projector, config.cutoff_at(0)), &mut rng)?;
    }

    let batch = config.batch_size.min(halves[0].indices.len().max(halves[1].indices.len()));
    let mut rot_adam: Vec<AdamState> = vec![AdamState::new(3, adam_params); n_img];
    let mut objective_trace = Vec::with_capacity(config.epochs);
    let mut pose_error_trace = Vec::new();
    let mut epoch_seconds = Vec::with_capacity(config.epochs);
    let mut cutoffs: Vec<f64> = Vec::new();
    let mut prepared_mean = projector.prepare(&mean)?;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let cutoff = config.cutoff_at(epoch);
        let boundary = epoch > 0 && cutoffs.last() != Some(&cutoff);
        if cutoffs.last() != Some(&cutoff) {
            cutoffs.push(cutoff);
        }
        let pose_refresh = config.pose_opt && epoch > 0 && epoch % config.offset_refresh_period == 0;
        if pose_refresh {
            for h in &halves {
                let model = PreparedModel { mean: prepared_mean.clone(), components: prepare_all(&projector, &h.components)? };
                refine_offsets(&projector, &model, &data, &mut poses, &h.indices, 1.0, config.newton_iterations)?;
                refresh_contrast(&projector, &model, &data, &mut poses, &h.indices, 1.0, CONTRAST_FLOOR)?;
            }
        }
        let mean_refresh = config.pose_opt && epoch > 0 && (boundary || epoch % config.mean_refresh_period == 0);
        if mean_refresh {
            for k in 0..2 {
                halves[k].weights = weights_of(&poses, &halves[k].indices)?;
            }
            mean = reconstruct_mean(&projector, &data, &poses, [&halves[0].indices, &halves[1].indices], &diagonal(&halves), &all, config.mean_cg_iterations)?;
            prepared_mean = projector.prepare(&mean)?;
        }
        if boundary || (epoch > 0 && epoch % config.reg_refresh_period == 0) {
            let fsc = regularization::covar_fsc(&halves[0].components, &halves[1].components, &shells)?;
            log::debug!("epoch {epoch}: shell covariance FSC {:?}", fsc.diagonal());
            for h in halves.iter_mut() {
                let m = config.reg_rank.min(shells.count());
                h.reg = ShellRegularizer::build(&fsc, &h.weights, &shells, m)?;
                log::debug!("epoch {epoch}: component prior per shell {:?}", shell_means(&h.reg.rv, &shells));
                if boundary {
                    h.adam.iter_mut().for_each(AdamState::reset);
                }
            }
            if boundary {
                rot_adam.iter_mut().for_each(AdamState::reset);
            }
        }
        let rotation_lr = rotation_lr_at(config, cutoffs.len() - 1);

        let mut order: Vec<Vec<usize>> = halves.iter().map(|h| h.indices.clone()).collect();
        for o in order.iter_mut() {
            o.shuffle(&mut rng);
        }
        let steps = order.iter().map(|o| o.len().div_ceil(batch)).max().unwrap_or(0);
        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        for step in 0..steps {
            for (h, o) in halves.iter_mut().zip(&order) {
                let lo = step * batch;
                if lo >= o.len() {
                    continue;
                }
                let ids = o[lo..(lo + batch).min(o.len())].to_vec();
                let value = train_step(&projector, &prepared_mean, &data, &mut poses, h, ids, config, cutoff, rotation_lr, &mut rot_adam)?;
                epoch_sum += value;
                epoch_count += 1;
            }
        }
        let epoch_value = epoch_sum / epoch_count.max(1) as f64;
        if !epoch_value.is_finite() {
            return Err(Error::Divergence(format!("objective became {epoch_value} in epoch {epoch}")));
        }
        objective_trace.push(epoch_value);
        epoch_seconds.push(start.elapsed().as_secs_f64());
        if let Some(reference) = inputs.reference_poses {
            pose_error_trace.push(metrics::pose_errors(&poses, reference)?.rotation_mean_deg);
        }
    }

    // combine the halves: Sigma = (V_A V_A^* + V_B V_B^*) / 2
    let stacked: Vec<FourierVolume> = halves.iter().flat_map(|h| h.components.iter().map(|v| v.scaled(std::f64::consts::FRAC_1_SQRT_2))).collect();
    let (mut u, mut s) = orthogonalize(&stacked)?;
    u.truncate(config.rank);
    s.truncate(config.rank);
    let scaled: Vec<FourierVolume> = u.iter().zip(&s).map(|(v, x)| v.scaled(*x)).collect();
    let final_model = PreparedModel { mean: prepared_mean, components: prepare_all(&projector, &scaled)? };
    let latents = latents_for(&projector, &final_model, &data, &poses, 1.0)?;

    let mean_out = mean.scaled(sigma);
    let sv: Vec<f64> = s.iter().map(|x| x * sigma).collect();
    let mut out_poses = stack.poses.clone();
    for (o, p) in out_poses.iter_mut().zip(&poses) {
        *o = *p;
    }
    Ok(FitResult {
        model: LowRankModel::new(mean_out, u)?,
        singular_values: sv,
        poses: out_poses,
        latents,
        objective_trace,
        pose_error_trace,
        epoch_seconds,
        cutoffs,
    })
}

/// Latent coordinates of every image of `stack` under a fitted model, using
/// the fitted poses. Matches the latents stored in the fit.
pub fn embed(stack: &ParticleStack, fit: &FitResult, scheme: InterpolationScheme) -> Result<Vec<Vec<f64>>> {
    stack.validate()?;
    if fit.poses.len() != stack.len() || fit.model.n() != stack.n {
        return Err(Error::Shape("fit does not belong to this stack".into()));
    }
    let projector = Projector::new(stack.n, stack.voxel_size, scheme)?;
    let model = PreparedModel { mean: projector.prepare(&fit.model.mean)?, components: prepare_all(&projector, &fit.scaled_components())? };
    latents_for(&projector, &model, stack, &fit.poses, stack.sigma2)
}

fn shell_means(x: &[f64], shells: &grid::ShellIndex) -> Vec<f64> {
    let mut sum = vec![0.0; shells.count()];
    for (v, &s) in x.iter().zip(shells.shell_of()) {
        sum[s] += v;
    }
    sum.iter().zip(shells.sizes()).map(|(a, n)| a / n.max(1) as f64).collect()
}

fn prepare_all(projector: &Projector, vols: &[FourierVolume]) -> Result<Vec<crate::projection::PreparedVolume>> {
    vols.iter().map(|v| projector.prepare(v)).collect()
}

fn latents_for(projector: &Projector, model: &PreparedModel, stack: &ParticleStack, poses: &[Pose], sigma2: f64) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    (0..stack.len())
        .into_par_iter()
        .map(|i| {
            let p = objectives::project_image(projector, model, &stack.images[i], &poses[i], &stack.ctfs[i], false)?;
            Ok(objectives::ridge_latents(&p.z, &p.residual, sigma2).0)
        })
        .collect()
}

/// Frequency marching cutoff further limited to the ball swept by the
/// sampled disks.
fn support_cutoff(projector: &Projector, cutoff: f64) -> f64 {
    let disk = projector.disk_radius() * 2.0 * PI / projector.n() as f64;
    cutoff.min(disk)
}

/// Rotation step size in a frequency stage: none in the first stage, then
/// `rotation_lr` halved at every further stage.
pub fn rotation_lr_at(config: &OptimConfig, stage: usize) -> f64 {
    if !config.pose_opt || stage == 0 {
        return 0.0;
    }
    config.rotation_lr * 0.5f64.powi(stage as i32 - 1)
}

/// One Adam step on a half's components (and, when `rotation_lr > 0`, on
/// the rotations of the batch images). Returns the batch objective.
#[allow(clippy::too_many_arguments)]
fn train_step(
    projector: &Projector,
    prepared_mean: &crate::projection::PreparedVolume,
    data: &ParticleStack,
    poses: &mut [Pose],
    half: &mut Half,
    ids: Vec<usize>,
    config: &OptimConfig,
    cutoff: f64,
    rotation_lr: f64,
    rot_adam: &mut [AdamState],
) -> Result<f64> {
    let model = PreparedModel { mean: prepared_mean.clone(), components: prepare_all(projector, &half.components)? };
    let population = half.indices.len();
    let b = ids.len();
    let want = Want { components: true, theta: rotation_lr > 0.0 };
    let batch_ids = ids.clone();
    let eval = {
        let batch = Batch::new(data, poses, ids)?;
        objectives::evaluate(projector, &model, &batch, config.objective, 1.0, want)?
    };
    let scale = 1.0 / b as f64;
    let pop = 1.0 / population as f64;
    let mut value = eval.values.iter().sum::<f64>() * scale;
    let reg_grads = if half.reg.is_zero() {
        None
    } else {
        value += pop * half.reg.penalty(config.objective, &half.components)?;
        Some(half.reg.penalty_gradient(config.objective, &half.components)?)
    };
    if !value.is_finite() {
        return Err(Error::Divergence(format!("batch objective became {value}")));
    }
    for (j, acc) in eval.gradients.into_iter().enumerate() {
        let mut g = projector.finish(acc);
        g.scale(scale);
        if let Some(rg) = &reg_grads {
            g.axpy(Complex64::from(pop), &rg[j]);
        }
        half.adam[j].step_complex(half.components[j].data_mut(), g.data(), config.learning_rate);
        // components live in the ball the projections observe
        grid::ball_mask_in_place(&mut half.components[j], support_cutoff(projector, cutoff));
    }
    if rotation_lr > 0.0 {
        for (k, g) in eval.theta.iter().enumerate() {
            let i = batch_ids[k];
            poses[i].theta = rotation_update(&poses[i].theta, g, &mut rot_adam[i], rotation_lr);
        }
    }
    Ok(value)
}

/// Per-image adaptive rotation step used by [`fit`].
fn rotation_update(theta: &Vector3<f64>, grad: &Vector3<f64>, state: &mut AdamState, lr: f64) -> Vector3<f64> {
    let mut t = *theta;
    state.step3(&mut t, grad, lr);
    rotation::rewrap(&t)
}
