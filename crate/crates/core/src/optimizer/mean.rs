//! Homogeneous reconstruction of the mean volume:
//! `argmin sum_i |Y_i - P_i mu|^2 + mu^* diag(prior) mu`.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::FourierVolume;
use crate::projection::{Backprojection, InterpolationKind, Pose, Projector};
use crate::regularization;
use crate::simulator::ParticleStack;

const CHUNK: usize = 64;

/// `sum_i P_i^* Y_i`, accumulated in image order.
fn backproject_images(projector: &Projector, stack: &ParticleStack, poses: &[Pose], indices: &[usize]) -> Result<FourierVolume> {
    let mut acc = projector.new_backprojection();
    for chunk in indices.chunks(CHUNK) {
        let parts: Vec<_> = chunk
            .par_iter()
            .map(|&i| -> Result<_> {
                let plan = projector.plan(&poses[i], false)?;
                Ok((plan, projector.filter(&poses[i], &stack.ctfs[i]), projector.gather(&stack.images[i])))
            })
            .collect::<Result<_>>()?;
        for (plan, filter, y) in &parts {
            projector.backproject_into(plan, filter, y, &mut acc);
        }
    }
    Ok(projector.finish(acc))
}

/// `(sum_i P_i^* P_i + diag(prior)) x`.
fn normal_apply(projector: &Projector, stack: &ParticleStack, poses: &[Pose], indices: &[usize], prior: &[f64], x: &FourierVolume) -> Result<FourierVolume> {
    let prepared = projector.prepare(x)?;
    let mut acc: Backprojection = projector.new_backprojection();
    for chunk in indices.chunks(CHUNK) {
        let parts: Vec<_> = chunk
            .par_iter()
            .map(|&i| -> Result<_> {
                let plan = projector.plan(&poses[i], false)?;
                let filter = projector.filter(&poses[i], &stack.ctfs[i]);
                let s = projector.project_samples(&plan, &filter, &prepared);
                Ok((plan, filter, s))
            })
            .collect::<Result<_>>()?;
        for (plan, filter, s) in &parts {
            projector.backproject_into(plan, filter, s, &mut acc);
        }
    }
    let mut out = projector.finish(acc);
    for ((o, xi), p) in out.data_mut().iter_mut().zip(x.data()).zip(prior) {
        *o += xi * p;
    }
    Ok(out)
}

/// Mean reconstruction from the images in `indices`. The diagonal of the
/// nearest-neighbor normal equations gives the initial estimate (exact for
/// nearest sampling without oversampling); otherwise `cg_iterations` steps
/// of conjugate gradients preconditioned by that diagonal refine it.
pub fn refresh_mean(
    projector: &Projector,
    stack: &ParticleStack,
    poses: &[Pose],
    indices: &[usize],
    prior: Option<&[f64]>,
    cg_iterations: usize,
) -> Result<FourierVolume> {
    if indices.is_empty() {
        return Err(Error::Config("mean reconstruction needs at least one image".into()));
    }
    let n = stack.n;
    let len = n * n * n;
    let zero_prior = vec![0.0; len];
    let prior = prior.unwrap_or(&zero_prior);
    if prior.len() != len {
        return Err(Error::Shape("mean prior does not match the volume".into()));
    }
    let shells = crate::grid::build_shells(n)?;
    let diag = regularization::shell_weights(stack, poses, indices, &shells)?.diagonal;
    let precond: Vec<f64> = diag.iter().zip(prior).map(|(d, p)| if d + p > 0.0 { 1.0 / (d + p) } else { 0.0 }).collect();
    let rhs = backproject_images(projector, stack, poses, indices)?;
    let apply_precond = |r: &FourierVolume| {
        let mut z = r.clone();
        z.data_mut().iter_mut().zip(&precond).for_each(|(a, w)| *a *= w);
        z
    };
    let mut x = apply_precond(&rhs);
    let exact = projector.scheme().kind == InterpolationKind::Nearest && projector.scheme().oversampling == 1;
    if exact || cg_iterations == 0 {
        return Ok(x);
    }
    let ax = normal_apply(projector, stack, poses, indices, prior, &x)?;
    let mut r = rhs.clone();
    r.axpy(Complex64::new(-1.0, 0.0), &ax);
    let mut z = apply_precond(&r);
    let mut p = z.clone();
    let mut rz = r.inner(&z).re;
    let tol = 1e-12 * rhs.norm_sqr().max(f64::MIN_POSITIVE);
    for _ in 0..cg_iterations {
        if r.norm_sqr() <= tol {
            break;
        }
        let ap = normal_apply(projector, stack, poses, indices, prior, &p)?;
        let pap = p.inner(&ap).re;
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        x.axpy(Complex64::from(alpha), &p);
        r.axpy(Complex64::from(-alpha), &ap);
        z = apply_precond(&r);
        let rz_new = r.inner(&z).re;
        let beta = rz_new / rz;
        rz = rz_new;
        let mut next = z.clone();
        next.axpy(Complex64::from(beta), &p);
        p = next;
    }
    Ok(x)
}
