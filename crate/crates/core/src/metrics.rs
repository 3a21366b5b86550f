//! Evaluation metrics: pose errors after global alignment, principal
//! angles between component subspaces, clustering accuracy of latents.

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FourierVolume;
use crate::projection::Pose;
use crate::rotation::{self, geodesic_distance, project_to_rotation, rotation_matrix, rotation_vector};

/// Rotation `g` minimizing the mean geodesic distance between `est_i * g`
/// and `truth_i`. A volume reconstructed in a frame rotated by `g^T` is
/// seen through poses `truth_i * g^T`, hence the right multiplication.
/// Starts from the chordal mean and refines with ten reweighted steps.
pub fn global_align(est: &[Matrix3<f64>], truth: &[Matrix3<f64>]) -> Result<Matrix3<f64>> {
    if est.is_empty() || est.len() != truth.len() {
        return Err(Error::Shape(format!("aligning {} estimates against {} references", est.len(), truth.len())));
    }
    let pairs: Vec<Matrix3<f64>> = est.iter().zip(truth).map(|(e, t)| e.transpose() * t).collect();
    let sum: Matrix3<f64> = pairs.iter().sum();
    let mut g = project_to_rotation(&sum);
    for _ in 0..10 {
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for a in &pairs {
            let w = rotation_vector(&(g.transpose() * a));
            let weight = 1.0 / w.norm().max(1e-9);
            num += w * weight;
            den += weight;
        }
        g *= rotation_matrix(&(num / den));
    }
    Ok(g)
}

/// Geodesic errors (radians) of `est_i * g` against `truth_i`.
pub fn rotation_errors(est: &[Matrix3<f64>], truth: &[Matrix3<f64>], g: &Matrix3<f64>) -> Vec<f64> {
    est.iter().zip(truth).map(|(e, t)| geodesic_distance(&(e * g), t)).collect()
}

/// Split of the error into tilt of the viewing axis (out-of-plane) and the
/// remaining rotation about it (in-plane), both in radians.
pub fn split_error(est: &Matrix3<f64>, truth: &Matrix3<f64>) -> (f64, f64) {
    let row = |m: &Matrix3<f64>, k: usize| Vector3::new(m[(k, 0)], m[(k, 1)], m[(k, 2)]);
    let (de, dt) = (row(est, 2), row(truth, 2));
    let out = de.dot(&dt).clamp(-1.0, 1.0).acos();
    // minimal rotation taking the estimated viewing axis onto the true one
    let axis = de.cross(&dt);
    let q = if axis.norm() < 1e-12 {
        Matrix3::identity()
    } else {
        rotation_matrix(&(axis.normalize() * out))
    };
    let xe = q * row(est, 0);
    let xt = row(truth, 0);
    let inplane = xe.cross(&xt).dot(&dt).atan2(xe.dot(&xt)).abs();
    (out, inplane)
}

/// Pose error summary after global alignment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    pub rotation_mean_deg: f64,
    pub rotation_median_deg: f64,
    pub out_of_plane_mean_deg: f64,
    pub in_plane_mean_deg: f64,
    pub offset_mean_px: f64,
    pub contrast_correlation: Option<f64>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

pub fn pose_errors(est: &[Pose], truth: &[Pose]) -> Result<PoseErrors> {
    let re: Vec<Matrix3<f64>> = est.iter().map(Pose::rotation).collect();
    let rt: Vec<Matrix3<f64>> = truth.iter().map(Pose::rotation).collect();
    let g = global_align(&re, &rt)?;
    let errs: Vec<f64> = rotation_errors(&re, &rt, &g).iter().map(|e| e.to_degrees()).collect();
    let splits: Vec<(f64, f64)> = re.iter().zip(&rt).map(|(e, t)| split_error(&(e * g), t)).collect();
    let offsets: Vec<f64> = est
        .iter()
        .zip(truth)
        .map(|(e, t)| ((e.offset[0] - t.offset[0]).powi(2) + (e.offset[1] - t.offset[1]).powi(2)).sqrt())
        .collect();
    let ce: Vec<f64> = est.iter().map(|p| p.contrast).collect();
    let ct: Vec<f64> = truth.iter().map(|p| p.contrast).collect();
    Ok(PoseErrors {
        rotation_mean_deg: mean(&errs),
        rotation_median_deg: median(&errs),
        out_of_plane_mean_deg: mean(&splits.iter().map(|s| s.0.to_degrees()).collect::<Vec<_>>()),
        in_plane_mean_deg: mean(&splits.iter().map(|s| s.1.to_degrees()).collect::<Vec<_>>()),
        offset_mean_px: mean(&offsets),
        contrast_correlation: pearson(&ce, &ct),
    })
}

/// Orthonormal basis (columns) of the span of `vols`, dropping directions
/// with relative singular value below `1e-10`.
fn orthonormal_basis(vols: &[FourierVolume]) -> DMatrix<Complex64> {
    let len = vols.first().map_or(0, |v| v.len());
    let m = DMatrix::from_fn(len, vols.len(), |i, j| vols[j].data()[i]);
    let svd = m.svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > 1e-10 * smax).collect();
    DMatrix::from_fn(len, keep.len(), |i, j| u[(i, keep[j])])
}

/// Principal angles in degrees between `span(est)` and `span(reference)`,
/// nondecreasing; as many as the smaller rank.
pub fn subspace_angles(est: &[FourierVolume], reference: &[FourierVolume]) -> Result<Vec<f64>> {
    if est.is_empty() || reference.is_empty() {
        return Err(Error::Config("subspace comparison needs nonempty bases".into()));
    }
    if est.iter().chain(reference).any(|v| v.len() != est[0].len()) {
        return Err(Error::Shape("volumes differ in size".into()));
    }
    let a = orthonormal_basis(est);
    let b = orthonormal_basis(reference);
    let k = a.ncols().min(b.ncols());
    if k == 0 {
        return Ok(Vec::new());
    }
    let s = (b.adjoint() * a).singular_values();
    let mut sv: Vec<f64> = s.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv.into_iter().take(k).map(|c| c.clamp(0.0, 1.0).acos().to_degrees()).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means with k-means++ seeding, best of `restarts` runs by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = vec![points[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = points.iter().map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min)).collect();
            let total: f64 = d.iter().sum();
            let idx = if total > 0.0 {
                let mut u = rng.random_range(0.0..total);
                d.iter().position(|&x| {
                    u -= x;
                    u < 0.0
                })
                .unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            centers.push(points[idx].clone());
        }
        let mut assign = vec![0; n];
        for _ in 0..100 {
            let mut changed = false;
            for (a, p) in assign.iter_mut().zip(points) {
                let c = (0..k).min_by(|&i, &j| sq_dist(p, &centers[i]).total_cmp(&sq_dist(p, &centers[j]))).unwrap();
                changed |= *a != c;
                *a = c;
            }
            let dim = points[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (a, p) in assign.iter().zip(points) {
                counts[*a] += 1;
                for (s, x) in sums[*a].iter_mut().zip(p) {
                    *s += x;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = assign.iter().zip(points).map(|(a, p)| sq_dist(p, &centers[*a])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Fraction of points whose k-means cluster maps to their true label under
/// the best one-to-one matching of clusters to labels.
pub fn cluster_accuracy(latents: &[Vec<f64>], labels: &[usize], k: usize, seed: u64) -> Result<f64> {
    if latents.len() != labels.len() {
        return Err(Error::Shape("latents and labels differ in length".into()));
    }
    let n = latents.len();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(k);
    let clusters = kmeans(latents, k, 10, seed)?;
    let mut counts = Matrix::new(classes, classes, 0i64);
    for (c, l) in clusters.iter().zip(labels) {
        counts[(*c, *l)] += 1;
    }
    let (matched, _) = kuhn_munkres(&counts);
    Ok(matched as f64 / n as f64)
}

/// Everything `report` emits about a fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub initial: Option<PoseErrors>,
    pub refined: Option<PoseErrors>,
    pub principal_angles_deg: Vec<f64>,
    pub mean_fsc: Vec<Option<f64>>,
    pub cluster_accuracy: Option<f64>,
    pub objective_trace: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl MetricsReport {
    /// Relative error reductions (percent) from initial to refined poses:
    /// rotation, out-of-plane, in-plane, offset.
    pub fn improvements(&self) -> Option<[f64; 4]> {
        let (a, b) = (self.initial.as_ref()?, self.refined.as_ref()?);
        let pct = |x: f64, y: f64| if x > 0.0 { 100.0 * (x - y) / x } else { 0.0 };
        Some([
            pct(a.rotation_mean_deg, b.rotation_mean_deg),
            pct(a.out_of_plane_mean_deg, b.out_of_plane_mean_deg),
            pct(a.in_plane_mean_deg, b.in_plane_mean_deg),
            pct(a.offset_mean_px, b.offset_mean_px),
        ])
    }
}

/// Rotation vectors of a rotation composed on the right, for callers that
/// need to move estimated poses into the reference frame.
pub fn align_poses(est: &[Pose], g: &Matrix3<f64>) -> Vec<Pose> {
    est.iter()
        .map(|p| Pose { theta: rotation::rotation_vector(&(p.rotation() * g)), ..*p })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::random_rotation_vector;

    fn rotations(n: usize, seed: u64) -> Vec<Matrix3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rotation_matrix(&random_rotation_vector(&mut rng))).collect()
    }

    #[test]
    fn identical_poses_align_to_identity() {
        let r = rotations(50, 1);
        let g = global_align(&r, &r).unwrap();
        assert!((g - Matrix3::identity()).abs().max() < 1e-10);
        assert!(rotation_errors(&r, &r, &g).iter().all(|e| *e < 1e-7));
    }

    #[test]
    fn recovers_global_rotation() {
        let r = rotations(50, 2);
        let g0 = rotation_matrix(&Vector3::new(0.4, -1.1, 0.7));
        let est: Vec<_> = r.iter().map(|x| x * g0.transpose()).collect();
        let g = global_align(&est, &r).unwrap();
        assert!((g - g0).abs().max() < 1e-9);
        assert!(rotation_errors(&est, &r, &g).iter().all(|e| *e < 1e-7));
    }

    #[test]
    fn alignment_matches_grid_search() {
        let truth = rotations(200, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g0 = rotation_matrix(&Vector3::new(0.2, 0.1, -0.3));
        let s = 5f64.to_radians() / (2.0 * (2.0 / std::f64::consts::PI).sqrt());
        let est: Vec<_> = truth
            .iter()
            .map(|t| {
                let w = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * (2.0 * s * 3f64.sqrt());
                t * rotation_matrix(&w) * g0.transpose()
            })
            .collect();
        let g = global_align(&est, &truth).unwrap();
        let err = |g: &Matrix3<f64>| mean(&rotation_errors(&est, &truth, g)).to_degrees();
        let ours = err(&g);
        // exhaustive local grid around the chordal estimate
        let step = 0.05f64.to_radians();
        let mut best = f64::INFINITY;
        let g_c = project_to_rotation(&est.iter().zip(&truth).map(|(e, t)| e.transpose() * t).sum::<Matrix3<f64>>());
        for i in -8..=8 {
            for j in -8..=8 {
                for k in -8..=8 {
                    let d = Vector3::new(i as f64, j as f64, k as f64) * step;
                    best = best.min(err(&(g_c * rotation_matrix(&d))));
                }
            }
        }
        assert!(ours <= best + 0.1, "aligned {ours} vs grid {best}");
    }

    #[test]
    fn split_separates_tilt_and_spin() {
        let t = rotation_matrix(&Vector3::new(0.3, 0.2, -0.4));
        // spin about the viewing axis: rows rotate within the image plane
        let spin = rotation_matrix(&Vector3::new(0.0, 0.0, 0.1)) * t;
        let (o, i) = split_error(&spin, &t);
        assert!(o < 1e-9 && (i - 0.1).abs() < 1e-9);
        let tilt = rotation_matrix(&Vector3::new(0.07, 0.0, 0.0)) * t;
        let (o, i) = split_error(&tilt, &t);
        assert!((o - 0.07).abs() < 1e-9 && i < 1e-9);
    }

    fn random_vols(n: usize, count: usize, seed: u64) -> Vec<FourierVolume> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let d = (0..n * n * n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
                FourierVolume::from_data(n, 1.0, d).unwrap()
            })
            .collect()
    }

    #[test]
    fn subspace_angle_cases() {
        let v = random_vols(4, 2, 5);
        assert!(subspace_angles(&v, &v).unwrap().iter().all(|a| *a < 1e-5));
        let mut e0 = FourierVolume::zeros(4, 1.0);
        e0.data_mut()[0] = Complex64::new(1.0, 0.0);
        let mut e1 = FourierVolume::zeros(4, 1.0);
        e1.data_mut()[1] = Complex64::new(0.0, 2.0);
        let a = subspace_angles(&[e0.clone()], &[e1.clone()]).unwrap();
        assert!((a[0] - 90.0).abs() < 1e-9);
        let mixed = vec![e0.scaled(2.0), e1.clone()];
        let b = subspace_angles(&mixed, &[e0, e1]).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.abs() < 1e-6));
        assert!(b.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn subspace_angles_match_dense_gram() {
        let a = random_vols(3, 2, 6);
        let b = random_vols(3, 2, 7);
        let got = subspace_angles(&a, &b).unwrap();
        // Gram-based oracle: cos^2 are the eigenvalues of (A^*A)^{-1} A^*B (B^*B)^{-1} B^*A
        let len = 27;
        let ma = DMatrix::from_fn(len, 2, |i, j| a[j].data()[i]);
        let mb = DMatrix::from_fn(len, 2, |i, j| b[j].data()[i]);
        let gaa = (ma.adjoint() * &ma).try_inverse().unwrap();
        let gbb = (mb.adjoint() * &mb).try_inverse().unwrap();
        let m = gaa * ma.adjoint() * &mb * gbb * mb.adjoint() * &ma;
        let tr = m[(0, 0)] + m[(1, 1)];
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        let disc = (tr * tr - det * 4.0).sqrt();
        let mut cos2: Vec<f64> = vec![((tr + disc) / 2.0).re, ((tr - disc) / 2.0).re];
        cos2.sort_by(|x, y| y.total_cmp(x));
        for (g, c) in got.iter().zip(cos2) {
            assert!((g - c.clamp(0.0, 1.0).sqrt().acos().to_degrees()).abs() < 1e-6);
        }
    }

    #[test]
    fn clustering_cases() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]].iter().enumerate() {
            for k in 0..30 {
                pts.push(vec![center[0] + (k % 5) as f64 * 0.1, center[1] + (k / 5) as f64 * 0.1]);
                labels.push((c + 1) % 3);
            }
        }
        assert_eq!(cluster_accuracy(&pts, &labels, 3, 1).unwrap(), 1.0);
        assert_eq!(cluster_accuracy(&pts, &vec![0; pts.len()], 1, 1).unwrap(), 1.0);
        assert!(cluster_accuracy(&pts[..2], &labels[..2], 3, 1).is_err());
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_none());
    }
}
