//! Per-image pose refinement: Newton offsets with backtracking, contrast
//! rescaling and rotation gradient steps.

use nalgebra::{DMatrix, Vector2, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objectives::{self, Batch, ObjectiveKind, PreparedModel, Want};
use crate::projection::{InterpolationKind, OffsetTerms, Pose, Projector};
use crate::rotation;
use crate::simulator::ParticleStack;

/// Offset objective of one image under the maximum-likelihood data term,
/// with the offset taken out of the model.
pub fn offset_terms(projector: &Projector, model: &PreparedModel, stack: &ParticleStack, pose: &Pose, i: usize, sigma2: f64) -> Result<OffsetTerms> {
    let centered = Pose { offset: [0.0, 0.0], ..*pose };
    let p = objectives::project_image(projector, model, &stack.images[i], &centered, &stack.ctfs[i], false)?;
    let y = projector.gather(&stack.images[i]);
    let mean: Vec<Complex64> = y.iter().zip(p.residual.iter()).map(|(a, b)| a - b).collect();
    let r = p.z.ncols();
    let m = DMatrix::<Complex64>::identity(r, r) + p.z.adjoint() * &p.z / Complex64::from(sigma2);
    let kernel = m.try_inverse().ok_or_else(|| Error::Divergence("singular offset kernel".into()))?;
    let basis = (0..r)
        .map(|j| {
            let col: Vec<Complex64> = p.z.column(j).iter().copied().collect();
            projector.scatter(&col).into_data()
        })
        .collect();
    Ok(OffsetTerms {
        n: stack.n,
        image: stack.images[i].data().to_vec(),
        reference: projector.scatter(&mean).into_data(),
        basis,
        kernel,
        c0: 1.0 / sigma2,
        c1: 1.0 / (sigma2 * sigma2),
    })
}

/// Newton iterations with backtracking on one image's offset. Returns the
/// new offset and the objective after every iteration (first entry is the
/// starting value).
pub fn newton_offset(terms: &OffsetTerms, start: [f64; 2], iterations: usize) -> ([f64; 2], Vec<f64>) {
    let bound = terms.n as f64;
    let clamp = |t: Vector2<f64>| [t.x.clamp(-bound, bound), t.y.clamp(-bound, bound)];
    let mut t = start;
    let mut f = terms.value(t);
    let mut trace = vec![f];
    for _ in 0..iterations {
        let (g, h) = terms.gradient_hessian(t);
        let dir = match h.cholesky() {
            Some(c) => -c.solve(&g),
            None => {
                let norm = g.norm();
                if norm == 0.0 {
                    trace.push(f);
                    continue;
                }
                // one pixel along the descent direction, shortened by the line search
                -g / norm
            }
        };
        let base = Vector2::new(t[0], t[1]);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=10 {
            let cand = clamp(base + dir * alpha);
            let fc = terms.value(cand);
            if fc < f {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        if let Some((cand, fc)) = accepted {
            t = cand;
            f = fc;
        }
        trace.push(f);
    }
    (t, trace)
}

/// Refine the offsets of `indices` in place; returns per-image objective
/// traces.
pub fn refine_offsets(
    projector: &Projector,
    model: &PreparedModel,
    stack: &ParticleStack,
    poses: &mut [Pose],
    indices: &[usize],
    sigma2: f64,
    iterations: usize,
) -> Result<Vec<Vec<f64>>> {
    let updates: Vec<([f64; 2], Vec<f64>)> = indices
        .par_iter()
        .map(|&i| -> Result<_> {
            let terms = offset_terms(projector, model, stack, &poses[i], i, sigma2)?;
            Ok(newton_offset(&terms, poses[i].offset, iterations))
        })
        .collect::<Result<_>>()?;
    let mut traces = Vec::with_capacity(indices.len());
    for (&i, (t, trace)) in indices.iter().zip(updates) {
        poses[i].offset = t;
        traces.push(trace);
    }
    Ok(traces)
}

/// Rescale each image's contrast by the least-squares factor between the
/// image and its model prediction at the ridge latent coordinates.
/// Estimates at or below `floor` are ignored.
pub fn refresh_contrast(
    projector: &Projector,
    model: &PreparedModel,
    stack: &ParticleStack,
    poses: &mut [Pose],
    indices: &[usize],
    sigma2: f64,
    floor: f64,
) -> Result<()> {
    let factors: Vec<Option<f64>> = indices
        .par_iter()
        .map(|&i| -> Result<_> {
            let p = objectives::project_image(projector, model, &stack.images[i], &poses[i], &stack.ctfs[i], false)?;
            let (z, _) = objectives::ridge_latents(&p.z, &p.residual, sigma2);
            let (alpha, ok) = objectives::contrast_from_projected(projector, &p, &stack.images[i], &z);
            Ok((ok && alpha > floor).then_some(alpha))
        })
        .collect::<Result<_>>()?;
    for (&i, f) in indices.iter().zip(factors) {
        if let Some(a) = f {
            poses[i].contrast *= a;
        }
    }
    Ok(())
}

/// Gradients of the maximum-likelihood objective of each batch image with
/// respect to its rotation vector.
pub fn rotation_gradients(projector: &Projector, model: &PreparedModel, batch: &Batch, sigma2: f64) -> Result<Vec<Vector3<f64>>> {
    if projector.scheme().kind != InterpolationKind::Trilinear {
        return Err(Error::Config("rotation refinement requires trilinear interpolation".into()));
    }
    let eval = objectives::evaluate(projector, model, batch, ObjectiveKind::Ml, sigma2, Want { components: false, theta: true })?;
    Ok(eval.theta)
}

/// One plain gradient step `theta_i <- rewrap(theta_i - lr * df/dtheta_i)`
/// for every image of the batch; other poses are untouched.
pub fn refine_rotations_step(projector: &Projector, model: &PreparedModel, batch: &Batch, sigma2: f64, lr: f64) -> Result<Vec<Pose>> {
    let grads = rotation_gradients(projector, model, batch, sigma2)?;
    let mut poses = batch.poses.to_vec();
    for (&i, g) in batch.indices.iter().zip(grads) {
        poses[i].theta = rotation::rewrap(&(poses[i].theta - g * lr));
    }
    Ok(poses)
}
