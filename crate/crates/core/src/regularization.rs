//! Frequency-shell priors built from two half-set estimates: the covariance
//! regularizer `R_Sigma` (kept as a rank-m factorization), the diagonal
//! component prior `R_V` and the diagonal mean prior.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{self, FourierVolume, ShellIndex};
use crate::objectives::ObjectiveKind;
use crate::projection::{InterpolationScheme, Pose, Projector};
use crate::simulator::ParticleStack;

/// Lower clamp applied to correlations before forming `(1 - c) / c`.
pub const FSC_FLOOR: f64 = 1e-3;

/// Default number of factors kept from the shell matrix.
pub const DEFAULT_RANK: usize = 5;

/// Correlation of two covariances restricted to every pair of shells.
/// `None` marks pairs where either covariance has no energy.
#[derive(Clone, Debug, PartialEq)]
pub struct ShellFscMatrix {
    size: usize,
    values: Vec<Option<f64>>,
}

impl ShellFscMatrix {
    pub fn new(size: usize, values: Vec<Option<f64>>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::Shape(format!("{} values for a {size}x{size} shell matrix", values.len())));
        }
        Ok(Self { size, values })
    }

    /// Every entry equal to `c`.
    pub fn constant(size: usize, c: f64) -> Self {
        Self { size, values: vec![Some(c); size * size] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size + j]
    }

    /// Correlations on the diagonal shell pairs.
    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.size).map(|i| self.get(i, i)).collect()
    }
}

/// Per-shell Gram matrices `G_s[a][b] = <a_a, b_b>_{S_s}`.
fn shell_grams(a: &[FourierVolume], b: &[FourierVolume], shells: &ShellIndex) -> Vec<DMatrix<Complex64>> {
    let (ra, rb) = (a.len(), b.len());
    let pairs: Vec<(usize, usize)> = (0..ra).flat_map(|i| (0..rb).map(move |j| (i, j))).collect();
    let per_pair: Vec<Vec<Complex64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut acc = vec![Complex64::new(0.0, 0.0); shells.count()];
            for ((x, y), &s) in a[i].data().iter().zip(b[j].data()).zip(shells.shell_of()) {
                acc[s] += x.conj() * y;
            }
            acc
        })
        .collect();
    (0..shells.count())
        .map(|s| DMatrix::from_fn(ra, rb, |i, j| per_pair[i * rb + j][s]))
        .collect()
}

/// `sum_ab G_i[a,b] conj(G_j[a,b])`: the inner product of two low-rank
/// covariances restricted to the block `S_i x S_j`.
fn block_inner(gi: &DMatrix<Complex64>, gj: &DMatrix<Complex64>) -> Complex64 {
    gi.iter().zip(gj.iter()).map(|(x, y)| x * y.conj()).sum()
}

/// Shell-pair correlations of `sum_a a_a a_a^*` and `sum_b b_b b_b^*`,
/// computed from per-shell inner products of the factors.
pub fn covar_fsc(a: &[FourierVolume], b: &[FourierVolume], shells: &ShellIndex) -> Result<ShellFscMatrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("covariance FSC needs at least one component per side".into()));
    }
    if a.iter().chain(b).any(|v| v.n() != shells.n()) {
        return Err(Error::Shape("components do not match the shell index".into()));
    }
    let gab = shell_grams(a, b, shells);
    let gaa = shell_grams(a, a, shells);
    let gbb = shell_grams(b, b, shells);
    let s = shells.count();
    let values = (0..s * s)
        .map(|idx| {
            let (i, j) = (idx / s, idx % s);
            let cross = block_inner(&gab[i], &gab[j]).re;
            let na = block_inner(&gaa[i], &gaa[j]).re;
            let nb = block_inner(&gbb[i], &gbb[j]).re;
            let d = (na.max(0.0) * nb.max(0.0)).sqrt();
            (d > 0.0).then(|| (cross / d).clamp(-1.0, 1.0))
        })
        .collect();
    ShellFscMatrix::new(s, values)
}

/// Statistics of the nearest-neighbor projection diagonals
/// `d_m(k) = sum over pixels of image m hitting voxel k of |a_m C_m|^2`.
#[derive(Clone, Debug)]
pub struct ShellWeights {
    /// `T_ij = sum_m u_m(i) u_m(j)` with `u_m(i)` the mean of `d_m` on shell `i`.
    pub t: DMatrix<f64>,
    /// `sum_m d_m`, per voxel.
    pub diagonal: Vec<f64>,
}

pub fn shell_weights(stack: &ParticleStack, poses: &[Pose], indices: &[usize], shells: &ShellIndex) -> Result<ShellWeights> {
    let n = stack.n;
    if shells.n() != n {
        return Err(Error::Shape("shell index does not match the stack".into()));
    }
    let projector = Projector::new(n, stack.voxel_size, InterpolationScheme::nearest())?;
    let sizes = shells.sizes();
    let s = shells.count();
    let per_image: Vec<(Vec<f64>, Vec<(usize, f64)>)> = indices
        .par_iter()
        .map(|&i| -> Result<_> {
            let plan = projector.plan(&poses[i], false)?;
            let filter = projector.filter(&poses[i], &stack.ctfs[i]);
            let weight: Vec<f64> = filter.iter().map(|f| f.norm_sqr()).collect();
            // backprojecting |filter|^2 yields the diagonal of P^* P for nearest sampling
            let mut acc = projector.new_backprojection();
            let w: Vec<Complex64> = weight.iter().map(|&x| Complex64::new(x, 0.0)).collect();
            let ones: Vec<Complex64> = vec![Complex64::new(1.0, 0.0); w.len()];
            projector.backproject_into(&plan, &ones, &w, &mut acc);
            let mut u = vec![0.0; s];
            let mut hits = Vec::new();
            for (k, c) in acc.data().iter().enumerate() {
                if c.re != 0.0 {
                    u[shells.shell_of()[k]] += c.re;
                    hits.push((k, c.re));
                }
            }
            for (ui, &sz) in u.iter_mut().zip(&sizes) {
                *ui /= sz as f64;
            }
            Ok((u, hits))
        })
        .collect::<Result<_>>()?;
    let mut t = DMatrix::zeros(s, s);
    let mut diagonal = vec![0.0; n * n * n];
    for (u, hits) in &per_image {
        for i in 0..s {
            if u[i] == 0.0 {
                continue;
            }
            for j in 0..s {
                t[(i, j)] += u[i] * u[j];
            }
        }
        for &(k, w) in hits {
            diagonal[k] += w;
        }
    }
    Ok(ShellWeights { t, diagonal })
}

/// `(1 - c) / c` with `c` clamped to `[FSC_FLOOR, 1]`; undefined entries
/// give no regularization.
fn fsc_ratio(c: Option<f64>) -> f64 {
    match c {
        Some(c) => {
            let c = c.clamp(FSC_FLOOR, 1.0);
            (1.0 - c) / c
        }
        None => 0.0,
    }
}

/// Shell-level matrix `(1 - c_ij) / c_ij * T_ij`.
pub fn shell_matrix(fsc: &ShellFscMatrix, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = fsc.size();
    if t.nrows() != s || t.ncols() != s {
        return Err(Error::Shape(format!("T is {}x{} but FSC is {s}x{s}", t.nrows(), t.ncols())));
    }
    let mut w = DMatrix::from_fn(s, s, |i, j| fsc_ratio(fsc.get(i, j)) * t[(i, j)]);
    // symmetrize against round-off in the correlations
    w = (&w + w.transpose()) * 0.5;
    Ok(w)
}

/// Top-`m` positive eigenpairs of the shell matrix as signed shell vectors
/// `sqrt(lambda) e`, each normalized to a nonnegative sum.
pub fn shell_factors(w: &DMatrix<f64>, m: usize) -> Result<Vec<Vec<f64>>> {
    let s = w.nrows();
    if m == 0 || m > s {
        return Err(Error::Config(format!("regularizer rank {m} must lie in 1..={s}")));
    }
    let eig = SymmetricEigen::new(w.clone());
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Ok(order
        .into_iter()
        .take(m)
        .filter(|&k| eig.eigenvalues[k] > 0.0)
        .map(|k| {
            let scale = eig.eigenvalues[k].sqrt();
            let col = eig.eigenvectors.column(k);
            let sign = if col.sum() < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|x| x * scale * sign).collect()
        })
        .collect())
}

/// Covariance regularizer `R_Sigma = sum_l r_l r_l^T` expanded to voxels.
pub fn build_r_sigma(fsc: &ShellFscMatrix, weights: &ShellWeights, shells: &ShellIndex, m: usize) -> Result<Vec<Vec<f64>>> {
    if fsc.size() != shells.count() {
        return Err(Error::Shape("FSC matrix does not match the shell index".into()));
    }
    let w = shell_matrix(fsc, &weights.t)?;
    Ok(shell_factors(&w, m)?.iter().map(|f| shells.broadcast(f)).collect())
}

/// `sqrt(diag(R_Sigma)) = sqrt(sum_l r_l^2)`, entrywise.
pub fn build_rv(rvecs: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for r in rvecs {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x * x;
        }
    }
    out.iter_mut().for_each(|x| *x = x.sqrt());
    out
}

/// `sqrt(diag(R_Sigma))` from the untruncated shell matrix: per shell
/// `sqrt((1 - c_ii) / c_ii * T_ii)`.
pub fn build_component_prior(fsc: &ShellFscMatrix, weights: &ShellWeights, shells: &ShellIndex) -> Result<Vec<f64>> {
    let w = shell_matrix(fsc, &weights.t)?;
    let per_shell: Vec<f64> = (0..w.nrows()).map(|i| w[(i, i)].max(0.0).sqrt()).collect();
    Ok(shells.broadcast(&per_shell))
}

/// Diagonal mean prior: per shell `(1 - c) / c` times the shell average of
/// `diagonal` (the projection weight the prior competes with).
pub fn build_mean_prior(half_a: &FourierVolume, half_b: &FourierVolume, shells: &ShellIndex, diagonal: &[f64]) -> Result<Vec<f64>> {
    if diagonal.len() != half_a.len() {
        return Err(Error::Shape("projection diagonal does not match the volume".into()));
    }
    let c = grid::fsc(half_a, half_b)?;
    let sizes = shells.sizes();
    let mut mean_w = vec![0.0; shells.count()];
    for (&s, d) in shells.shell_of().iter().zip(diagonal) {
        mean_w[s] += d;
    }
    let per_shell: Vec<f64> = (0..shells.count())
        .map(|s| fsc_ratio(c[s]) * mean_w[s] / sizes[s] as f64)
        .collect();
    Ok(shells.broadcast(&per_shell))
}

/// Priors for the low-rank objectives. The covariance penalty uses the
/// weighted inner products `<v_j, v_k>_r = sum_i r_i conj(v_ji) v_ki`, so
/// `sum_l sum_jk |<v_j, v_k>_{r_l}|^2 = sum_ab |Sigma_ab|^2 (R_Sigma)_ab`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShellRegularizer {
    pub rvecs: Vec<Vec<f64>>,
    pub rv: Vec<f64>,
    pub mean_prior: Vec<f64>,
}

impl ShellRegularizer {
    /// Regularizer that penalizes nothing.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_rvecs(rvecs: Vec<Vec<f64>>, len: usize) -> Self {
        let rv = build_rv(&rvecs, len);
        Self { rvecs, rv, mean_prior: Vec::new() }
    }

    /// Rank-`m` covariance factors plus the exact diagonal component prior.
    pub fn build(fsc: &ShellFscMatrix, weights: &ShellWeights, shells: &ShellIndex, m: usize) -> Result<Self> {
        let rvecs = build_r_sigma(fsc, weights, shells, m)?;
        let rv = build_component_prior(fsc, weights, shells)?;
        Ok(Self { rvecs, rv, mean_prior: Vec::new() })
    }

    pub fn is_zero(&self) -> bool {
        self.rvecs.iter().all(|r| r.iter().all(|x| *x == 0.0)) && self.rv.iter().all(|x| *x == 0.0)
    }

    fn check(&self, comps: &[FourierVolume]) -> Result<()> {
        let len = comps.first().map_or(0, |c| c.len());
        if self.rvecs.iter().any(|r| r.len() != len) || (!self.rv.is_empty() && self.rv.len() != len) {
            return Err(Error::Shape("regularizer does not match the component size".into()));
        }
        Ok(())
    }

    fn weighted_grams(&self, comps: &[FourierVolume]) -> Vec<DMatrix<Complex64>> {
        let r = comps.len();
        self.rvecs
            .iter()
            .map(|w| {
                DMatrix::from_fn(r, r, |j, k| {
                    comps[j].data().iter().zip(comps[k].data()).zip(w).map(|((a, b), x)| a.conj() * b * x).sum()
                })
            })
            .collect()
    }

    /// Covariance-prior value `sum_l sum_jk |<v_j, v_k>_{r_l}|^2`.
    pub fn covariance_penalty(&self, comps: &[FourierVolume]) -> Result<f64> {
        self.check(comps)?;
        Ok(self.weighted_grams(comps).iter().map(|g| g.norm_squared()).sum())
    }

    pub fn covariance_penalty_gradient(&self, comps: &[FourierVolume]) -> Result<Vec<FourierVolume>> {
        self.check(comps)?;
        let grams = self.weighted_grams(comps);
        Ok((0..comps.len())
            .map(|k| {
                let mut g = FourierVolume::zeros(comps[k].n(), comps[k].voxel_size());
                for (c, w) in grams.iter().zip(&self.rvecs) {
                    for (j, v) in comps.iter().enumerate() {
                        let coef = c[(j, k)] * 4.0;
                        for ((o, a), x) in g.data_mut().iter_mut().zip(v.data()).zip(w) {
                            *o += coef * a * x;
                        }
                    }
                }
                g
            })
            .collect())
    }

    /// Component-prior value `sum_j sum_i Rv_i |v_ji|^2`.
    pub fn component_penalty(&self, comps: &[FourierVolume]) -> Result<f64> {
        self.check(comps)?;
        if self.rv.is_empty() {
            return Ok(0.0);
        }
        Ok(comps.iter().map(|v| v.data().iter().zip(&self.rv).map(|(a, w)| w * a.norm_sqr()).sum::<f64>()).sum())
    }

    pub fn component_penalty_gradient(&self, comps: &[FourierVolume]) -> Result<Vec<FourierVolume>> {
        self.check(comps)?;
        Ok(comps
            .iter()
            .map(|v| {
                let mut g = FourierVolume::zeros(v.n(), v.voxel_size());
                if !self.rv.is_empty() {
                    for ((o, a), w) in g.data_mut().iter_mut().zip(v.data()).zip(&self.rv) {
                        *o = a * (2.0 * w);
                    }
                }
                g
            })
            .collect())
    }

    /// Penalty matching the objective kind.
    pub fn penalty(&self, kind: ObjectiveKind, comps: &[FourierVolume]) -> Result<f64> {
        match kind {
            ObjectiveKind::Ls => self.covariance_penalty(comps),
            ObjectiveKind::Ml => self.component_penalty(comps),
        }
    }

    pub fn penalty_gradient(&self, kind: ObjectiveKind, comps: &[FourierVolume]) -> Result<Vec<FourierVolume>> {
        match kind {
            ObjectiveKind::Ls => self.covariance_penalty_gradient(comps),
            ObjectiveKind::Ml => self.component_penalty_gradient(comps),
        }
    }
}
