//! Synthetic ground truth under the linear heterogeneity model
//! `X_i = X_0 + sum_j z_ij v_j` and simulated particle stacks.

use nalgebra::Vector3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SimulateSettings;
use crate::ctf::CtfParams;
use crate::error::{Error, Result};
use crate::grid::{self, FourierImage, FourierVolume, RealVolume};
use crate::projection::{InterpolationScheme, Pose, Projector};
use crate::rotation;

/// Isotropic Gaussian density blob. `center` is given in units of the half
/// box (`|center| < 1` keeps it inside the box), `width` is the standard
/// deviation in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub width: f64,
    pub amplitude: f64,
}

/// One degree of freedom: a rigid displacement of a set of blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub blobs: Vec<usize>,
    /// Displacement per unit latent, in half-box units.
    pub direction: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub n: usize,
    pub voxel_size: f64,
    pub blobs: Vec<Blob>,
    pub motions: Vec<Motion>,
}

impl Phantom {
    /// Four static blobs plus `moving` smaller blobs, each moving along its
    /// own axis. Used by tests and examples.
    pub fn standard(n: usize, moving: usize) -> Self {
        let w = (n as f64 / 10.0).max(1.2);
        let mut blobs = vec![
            Blob { center: [0.0, 0.0, 0.0], width: 1.6 * w, amplitude: 1.0 },
            Blob { center: [0.3, 0.1, -0.1], width: w, amplitude: 0.8 },
            Blob { center: [-0.25, 0.2, 0.15], width: w, amplitude: 0.7 },
            Blob { center: [0.05, -0.3, 0.2], width: w, amplitude: 0.6 },
        ];
        let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.7, 0.7, 0.0]];
        let anchors = [[0.35, -0.3, 0.0], [-0.3, 0.35, -0.2], [0.1, 0.2, 0.4], [-0.2, -0.25, -0.3]];
        let mut motions = Vec::new();
        for j in 0..moving {
            blobs.push(Blob { center: anchors[j % 4], width: w, amplitude: 0.9 });
            motions.push(Motion { blobs: vec![blobs.len() - 1], direction: axes[j % 4] });
        }
        Self { n, voxel_size: 1.0, blobs, motions }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("phantom grid must have N >= 2".into()));
        }
        for b in &self.blobs {
            let r = b.center.iter().map(|c| c * c).sum::<f64>().sqrt();
            if r >= 1.0 || !(b.width > 0.0) {
                return Err(Error::Config(format!("blob outside the unit ball or with bad width: {b:?}")));
            }
        }
        for m in &self.motions {
            if m.blobs.iter().any(|&i| i >= self.blobs.len()) {
                return Err(Error::Config("motion references a missing blob".into()));
            }
        }
        Ok(())
    }

    /// Real-space density with every blob of `motion` displaced by `shift`
    /// (in latent units).
    fn density(&self, displaced: Option<(&Motion, f64)>) -> RealVolume {
        let n = self.n;
        let half = n as f64 / 2.0;
        let mut out = RealVolume::zeros(n);
        for (bi, b) in self.blobs.iter().enumerate() {
            let mut c = b.center;
            if let Some((m, s)) = displaced {
                if m.blobs.contains(&bi) {
                    for a in 0..3 {
                        c[a] += s * m.direction[a];
                    }
                }
            }
            let c = c.map(|x| x * half);
            let inv = 1.0 / (2.0 * b.width * b.width);
            let data = out.data_mut();
            for z in 0..n {
                let dz = grid::freq(z, n) as f64 - c[2];
                for y in 0..n {
                    let dy = grid::freq(y, n) as f64 - c[1];
                    for x in 0..n {
                        let dx = grid::freq(x, n) as f64 - c[0];
                        data[(z * n + y) * n + x] += b.amplitude * (-(dx * dx + dy * dy + dz * dz) * inv).exp();
                    }
                }
            }
        }
        out
    }
}

/// Law of the per-image latent coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LatentLaw {
    /// Independent `N(0, std_j^2)` per component.
    Gaussian { std: Vec<f64> },
    /// Uniformly chosen state `k`, with `z = scale * e_k`.
    Discrete { scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PoseLaw {
    Identity,
    /// Uniform rotations; offsets uniform in `[-max_offset, max_offset]^2`.
    Uniform { max_offset: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ContrastLaw {
    Fixed(f64),
    /// Gaussian contrast, redrawn below `floor`.
    Gaussian { mean: f64, std: f64, floor: f64 },
}

impl ContrastLaw {
    /// Contrast spread used in the synthetic benchmarks: `N(1, 0.2^2)`.
    pub fn benchmark() -> Self {
        ContrastLaw::Gaussian { mean: 1.0, std: 0.2, floor: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CtfLaw {
    Identity,
    /// Defocus uniform in `[min, max]`.
    Defocus { min: f64, max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseLevel {
    Sigma(f64),
    /// `mean_i |P_i X_i|^2 / (sigma^2 N^2)`.
    Snr(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_images: usize,
    pub noise: NoiseLevel,
    pub latents: LatentLaw,
    pub poses: PoseLaw,
    pub contrast: ContrastLaw,
    pub ctf: CtfLaw,
    pub scheme: InterpolationScheme,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(n_images: usize, noise: NoiseLevel, latents: LatentLaw, seed: u64) -> Self {
        Self {
            n_images,
            noise,
            latents,
            poses: PoseLaw::Uniform { max_offset: 0.0 },
            contrast: ContrastLaw::Fixed(1.0),
            ctf: CtfLaw::Identity,
            scheme: InterpolationScheme::default(),
            seed,
        }
    }
}

/// Ground-truth mean and orthonormal components.
#[derive(Clone, Debug)]
pub struct Volumes {
    pub mean: FourierVolume,
    pub components: Vec<FourierVolume>,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub mean: FourierVolume,
    pub components: Vec<FourierVolume>,
    /// `n x r`, row-major by image.
    pub latents: Vec<Vec<f64>>,
    /// State index per image for discrete latent laws.
    pub labels: Option<Vec<usize>>,
    pub poses: Vec<Pose>,
    pub ctfs: Vec<CtfParams>,
    pub sigma: f64,
}

/// Observed images plus the per-image metadata that travels with them.
#[derive(Clone, Debug)]
pub struct ParticleStack {
    pub n: usize,
    pub voxel_size: f64,
    pub images: Vec<FourierImage>,
    pub ctfs: Vec<CtfParams>,
    /// Pose estimates supplied with the images.
    pub poses: Vec<Pose>,
    pub sigma2: f64,
}

impl ParticleStack {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Config("particle stack is empty".into()));
        }
        if self.images.iter().any(|im| im.n() != self.n) {
            return Err(Error::Shape("images of mixed size in stack".into()));
        }
        if self.ctfs.len() != self.len() || self.poses.len() != self.len() {
            return Err(Error::Shape("per-image metadata length mismatch".into()));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config(format!("noise variance must be positive, got {}", self.sigma2)));
        }
        Ok(())
    }

    /// Sub-stack of the given image indices.
    pub fn subset(&self, indices: &[usize]) -> ParticleStack {
        ParticleStack {
            n: self.n,
            voxel_size: self.voxel_size,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            ctfs: indices.iter().map(|&i| self.ctfs[i]).collect(),
            poses: indices.iter().map(|&i| self.poses[i]).collect(),
            sigma2: self.sigma2,
        }
    }
}

/// Mean and orthonormalized motion components of a phantom. Components are
/// central finite differences of the density along each motion, normalized
/// and Gram-Schmidt orthogonalized in the Fourier domain.
pub fn synthesize_volumes(phantom: &Phantom) -> Result<Volumes> {
    phantom.validate()?;
    let voxel = phantom.voxel_size;
    let with_voxel = |v: RealVolume| {
        let f = grid::forward_fft_3d(&v);
        FourierVolume::from_data(f.n(), voxel, f.into_data()).expect("shape preserved")
    };
    let mean = with_voxel(phantom.density(None));
    let h = 1e-4;
    let mut components: Vec<FourierVolume> = Vec::new();
    for m in &phantom.motions {
        let plus = phantom.density(Some((m, h)));
        let minus = phantom.density(Some((m, -h)));
        let diff: Vec<f64> = plus.data().iter().zip(minus.data()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let mut v = with_voxel(RealVolume::new(phantom.n, diff)?);
        let raw = v.norm();
        for u in &components {
            let c = u.inner(&v);
            v.axpy(-c, u);
        }
        let left = v.norm();
        if raw == 0.0 || left < 1e-6 * raw {
            return Err(Error::Config("phantom motions are degenerate (linearly dependent)".into()));
        }
        v.scale(1.0 / left);
        components.push(v);
    }
    Ok(Volumes { mean, components })
}

fn image_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulate a particle stack. The returned stack carries the true poses.
pub fn simulate_stack(volumes: &Volumes, cfg: &SimulationConfig) -> Result<(ParticleStack, GroundTruth)> {
    if cfg.n_images == 0 {
        return Err(Error::Config("n_images must be at least 1".into()));
    }
    let n = volumes.mean.n();
    let voxel = volumes.mean.voxel_size();
    let r = volumes.components.len();
    if let LatentLaw::Gaussian { std } = &cfg.latents {
        if std.len() != r {
            return Err(Error::Config(format!("{} latent std values for {r} components", std.len())));
        }
    }
    let projector = Projector::new(n, voxel, cfg.scheme)?;
    let mean = projector.prepare(&volumes.mean)?;
    let comps = volumes.components.iter().map(|v| projector.prepare(v)).collect::<Result<Vec<_>>>()?;

    struct Draw {
        pose: Pose,
        ctf: CtfParams,
        z: Vec<f64>,
        label: Option<usize>,
        clean: Vec<Complex64>,
    }

    let draws: Vec<Draw> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| -> Result<Draw> {
            let mut rng = image_rng(cfg.seed, 2 * i as u64);
            let (z, label) = match &cfg.latents {
                LatentLaw::Gaussian { std } => {
                    (std.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect(), None)
                }
                LatentLaw::Discrete { scale } => {
                    let k = rng.random_range(0..r.max(1));
                    let mut z = vec![0.0; r];
                    if r > 0 {
                        z[k] = *scale;
                    }
                    (z, Some(k))
                }
            };
            let theta;
            let mut offset = [0.0, 0.0];
            match &cfg.poses {
                PoseLaw::Identity => theta = Vector3::zeros(),
                PoseLaw::Uniform { max_offset } => {
                    theta = rotation::random_rotation_vector(&mut rng);
                    if *max_offset > 0.0 {
                        offset = [rng.random_range(-max_offset..*max_offset), rng.random_range(-max_offset..*max_offset)];
                    }
                }
            }
            let contrast = match &cfg.contrast {
                ContrastLaw::Fixed(a) => *a,
                ContrastLaw::Gaussian { mean, std, floor } => {
                    let d = Normal::new(*mean, *std).map_err(|e| Error::Config(e.to_string()))?;
                    loop {
                        let a: f64 = d.sample(&mut rng);
                        if a > *floor {
                            break a;
                        }
                    }
                }
            };
            let ctf = match &cfg.ctf {
                CtfLaw::Identity => CtfParams::identity(),
                CtfLaw::Defocus { min, max } => CtfParams::typical(rng.random_range(*min..=*max)),
            };
            let pose = Pose::new(theta, offset, contrast);
            let plan = projector.plan(&pose, false)?;
            let filter = projector.filter(&pose, &ctf);
            let mut samples = projector.sample(&plan, &mean);
            for (zj, comp) in z.iter().zip(&comps) {
                if *zj != 0.0 {
                    for (s, c) in samples.iter_mut().zip(projector.sample(&plan, comp)) {
                        *s += c * zj;
                    }
                }
            }
            for (s, f) in samples.iter_mut().zip(&filter) {
                *s *= f;
            }
            Ok(Draw { pose, ctf, z, label, clean: samples })
        })
        .collect::<Result<_>>()?;

    let signal: f64 = draws.iter().map(|d| d.clean.iter().map(|c| c.norm_sqr()).sum::<f64>()).sum::<f64>()
        / cfg.n_images as f64;
    let sigma = match cfg.noise {
        NoiseLevel::Sigma(s) => s,
        NoiseLevel::Snr(snr) => {
            if !(snr > 0.0) || signal == 0.0 {
                return Err(Error::Config("SNR must be positive and the signal nonzero".into()));
            }
            (signal / (snr * (n * n) as f64)).sqrt()
        }
    };
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise level must be non-negative, got {sigma}")));
    }

    let images: Vec<FourierImage> = draws
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let mut img = projector.scatter(&d.clean);
            if sigma > 0.0 {
                let mut rng = image_rng(cfg.seed, 2 * i as u64 + 1);
                let real: Vec<f64> = (0..n * n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                let noise = grid::forward_fft_2d(n, &real).expect("square image");
                for (a, b) in img.data_mut().iter_mut().zip(noise.data()) {
                    *a += b;
                }
            }
            img
        })
        .collect();

    let poses: Vec<Pose> = draws.iter().map(|d| d.pose).collect();
    let ctfs: Vec<CtfParams> = draws.iter().map(|d| d.ctf).collect();
    let labels = matches!(cfg.latents, LatentLaw::Discrete { .. }).then(|| draws.iter().map(|d| d.label.unwrap_or(0)).collect());
    let truth = GroundTruth {
        mean: volumes.mean.clone(),
        components: volumes.components.clone(),
        latents: draws.iter().map(|d| d.z.clone()).collect(),
        labels,
        poses: poses.clone(),
        ctfs: ctfs.clone(),
        sigma,
    };
    // the estimator needs a positive variance even for noiseless data
    let sigma2 = if sigma > 0.0 { sigma * sigma } else { 1e-12 * signal.max(1e-300) / (n * n) as f64 };
    let stack = ParticleStack { n, voxel_size: voxel, images, ctfs, poses, sigma2 };
    Ok((stack, truth))
}

/// Compose each rotation with an isotropic random rotation whose mean angle
/// is `rotation_error_deg`, and jitter offsets uniformly in
/// `[-offset_error_px, offset_error_px]`.
pub fn perturb_poses(poses: &[Pose], rotation_error_deg: f64, offset_error_px: f64, seed: u64) -> Result<Vec<Pose>> {
    if rotation_error_deg < 0.0 || offset_error_px < 0.0 {
        return Err(Error::Config("perturbation magnitudes must be non-negative".into()));
    }
    // |w| for w ~ N(0, s^2 I_3) has mean 2 s sqrt(2 / pi)
    let s = rotation_error_deg.to_radians() / (2.0 * (2.0 / std::f64::consts::PI).sqrt());
    Ok(poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = image_rng(seed, i as u64);
            let mut out = *p;
            if s > 0.0 {
                let w = Vector3::new(
                    s * rng.sample::<f64, _>(StandardNormal),
                    s * rng.sample::<f64, _>(StandardNormal),
                    s * rng.sample::<f64, _>(StandardNormal),
                );
                let r = p.rotation() * rotation::rotation_matrix(&w);
                out.theta = rotation::rotation_vector(&r);
            }
            if offset_error_px > 0.0 {
                out.offset[0] += rng.random_range(-offset_error_px..=offset_error_px);
                out.offset[1] += rng.random_range(-offset_error_px..=offset_error_px);
            }
            out
        })
        .collect())
}

/// Simulate the dataset described by `settings`. The returned stack carries
/// the starting poses an estimator sees: the true poses perturbed by the
/// configured errors, with contrast 1 whenever contrast varies.
pub fn simulate_settings(settings: &SimulateSettings) -> Result<(ParticleStack, GroundTruth, SimulationConfig)> {
    settings.validate()?;
    let volumes = synthesize_volumes(&Phantom::standard(settings.grid, settings.rank))?;
    let scale = settings.heterogeneity * volumes.mean.norm();
    let latents = if settings.discrete {
        LatentLaw::Discrete { scale }
    } else {
        LatentLaw::Gaussian { std: (0..settings.rank).map(|j| scale * 0.7f64.powi(j as i32)).collect() }
    };
    let mut cfg = SimulationConfig::new(settings.images, NoiseLevel::Snr(settings.snr), latents, settings.seed);
    cfg.poses = PoseLaw::Uniform { max_offset: settings.max_offset };
    if settings.contrast_std > 0.0 {
        cfg.contrast = ContrastLaw::Gaussian { mean: 1.0, std: settings.contrast_std, floor: 0.05 };
    }
    if let Some([min, max]) = settings.defocus {
        cfg.ctf = CtfLaw::Defocus { min, max };
    }
    let (mut stack, truth) = simulate_stack(&volumes, &cfg)?;
    let mut start = perturb_poses(&truth.poses, settings.rotation_error_deg, settings.offset_error_px, settings.seed.wrapping_add(1))?;
    if settings.contrast_std > 0.0 {
        start.iter_mut().for_each(|p| p.contrast = 1.0);
    }
    stack.poses = start;
    Ok((stack, truth, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project;

    #[test]
    fn static_phantom_is_homogeneous() {
        let mut p = Phantom::standard(8, 0);
        p.motions.clear();
        let v = synthesize_volumes(&p).unwrap();
        assert!(v.components.is_empty());
        assert!(v.mean.hermitian_defect() < 1e-12);
    }

    #[test]
    fn translating_blob_component_is_its_derivative() {
        let n = 12;
        let phantom = Phantom {
            n,
            voxel_size: 1.0,
            blobs: vec![Blob { center: [0.1, -0.1, 0.0], width: 1.5, amplitude: 1.0 }],
            motions: vec![Motion { blobs: vec![0], direction: [1.0, 0.0, 0.0] }],
        };
        let v = synthesize_volumes(&phantom).unwrap();
        assert_eq!(v.components.len(), 1);
        assert!((v.components[0].norm() - 1.0).abs() < 1e-12);
        // analytic derivative of the Gaussian with respect to its x center
        let half = n as f64 / 2.0;
        let c = [0.1 * half, -0.1 * half, 0.0];
        let mut deriv = vec![0.0; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d = [grid::freq(x, n) as f64 - c[0], grid::freq(y, n) as f64 - c[1], grid::freq(z, n) as f64 - c[2]];
                    let g = (-(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (2.0 * 2.25)).exp();
                    deriv[(z * n + y) * n + x] = g * d[0] / 2.25 * half;
                }
            }
        }
        let mut oracle = grid::forward_fft_3d(&RealVolume::new(n, deriv).unwrap());
        oracle.scale(1.0 / oracle.norm());
        let overlap = oracle.inner(&v.components[0]).norm();
        assert!(overlap > 1.0 - 1e-6, "overlap {overlap}");
    }

    #[test]
    fn two_motions_are_orthonormal() {
        let v = synthesize_volumes(&Phantom::standard(10, 2)).unwrap();
        assert_eq!(v.components.len(), 2);
        assert!(v.components[0].inner(&v.components[1]).norm() < 1e-8);
        for c in &v.components {
            assert!((c.norm() - 1.0).abs() < 1e-12);
            assert!(c.hermitian_defect() < 1e-10);
        }
    }

    #[test]
    fn degenerate_motions_rejected() {
        let mut p = Phantom::standard(8, 1);
        p.motions.push(p.motions[0].clone());
        assert!(synthesize_volumes(&p).is_err());
    }

    #[test]
    fn noiseless_identity_stack_is_central_slice() {
        let v = synthesize_volumes(&Phantom::standard(8, 1)).unwrap();
        let mut cfg = SimulationConfig::new(3, NoiseLevel::Sigma(0.0), LatentLaw::Gaussian { std: vec![0.0] }, 1);
        cfg.poses = PoseLaw::Identity;
        let (stack, _) = simulate_stack(&v, &cfg).unwrap();
        let slice = project(&v.mean, &Pose::identity(), &CtfParams::identity(), cfg.scheme).unwrap();
        for img in &stack.images {
            for (a, b) in img.data().iter().zip(slice.data()) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn pure_noise_has_requested_variance() {
        let n = 8;
        let v = Volumes { mean: FourierVolume::zeros(n, 1.0), components: vec![] };
        let cfg = SimulationConfig::new(1000, NoiseLevel::Sigma(0.7), LatentLaw::Gaussian { std: vec![] }, 3);
        let (stack, truth) = simulate_stack(&v, &cfg).unwrap();
        let total: f64 = stack.images.iter().map(|im| im.norm_sqr()).sum();
        let var = total / (1000.0 * (n * n) as f64);
        assert!((var / 0.49 - 1.0).abs() < 0.05, "variance {var}");
        assert!((stack.sigma2 - 0.49).abs() < 1e-12);
        assert_eq!(truth.sigma, 0.7);
        assert!(stack.images[0].hermitian_defect() < 1e-12);
    }

    #[test]
    fn contrast_law_spread() {
        let n = 4;
        let v = Volumes { mean: FourierVolume::zeros(n, 1.0), components: vec![] };
        let mut cfg = SimulationConfig::new(10_000, NoiseLevel::Sigma(1.0), LatentLaw::Gaussian { std: vec![] }, 4);
        cfg.contrast = ContrastLaw::benchmark();
        cfg.scheme = InterpolationScheme::nearest();
        let (_, truth) = simulate_stack(&v, &cfg).unwrap();
        let a: Vec<f64> = truth.poses.iter().map(|p| p.contrast).collect();
        let m = a.iter().sum::<f64>() / a.len() as f64;
        let sd = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (a.len() - 1) as f64).sqrt();
        assert!((sd - 0.2).abs() < 0.02, "std {sd}");
        assert!((m - 1.0).abs() < 0.01);
    }

    #[test]
    fn snr_definition_is_respected() {
        let v = synthesize_volumes(&Phantom::standard(8, 1)).unwrap();
        let cfg = SimulationConfig::new(200, NoiseLevel::Snr(2.0), LatentLaw::Gaussian { std: vec![1.0] }, 5);
        let (stack, truth) = simulate_stack(&v, &cfg).unwrap();
        let noisefree = {
            let mut c = cfg.clone();
            c.noise = NoiseLevel::Sigma(0.0);
            simulate_stack(&v, &c).unwrap().0
        };
        let signal: f64 = noisefree.images.iter().map(|im| im.norm_sqr()).sum::<f64>() / 200.0;
        assert!((signal / (truth.sigma.powi(2) * 64.0) - 2.0).abs() < 1e-9);
        assert_eq!(stack.len(), 200);
    }

    #[test]
    fn perturbation_statistics_and_determinism() {
        let poses: Vec<Pose> = (0..10_000)
            .map(|i| {
                let mut rng = image_rng(99, i);
                Pose::new(rotation::random_rotation_vector(&mut rng), [0.0, 0.0], 1.0)
            })
            .collect();
        let same = perturb_poses(&poses, 0.0, 0.0, 1).unwrap();
        assert_eq!(same, poses);
        let a = perturb_poses(&poses, 5.0, 2.0, 7).unwrap();
        let b = perturb_poses(&poses, 5.0, 2.0, 7).unwrap();
        assert_eq!(a, b);
        let mean_err = a
            .iter()
            .zip(&poses)
            .map(|(x, y)| rotation::geodesic_distance(&x.rotation(), &y.rotation()).to_degrees())
            .sum::<f64>()
            / poses.len() as f64;
        assert!((mean_err - 5.0).abs() < 0.5, "mean error {mean_err}");
        assert!(a.iter().all(|p| p.offset[0].abs() <= 2.0 && p.offset[1].abs() <= 2.0));
    }
}
