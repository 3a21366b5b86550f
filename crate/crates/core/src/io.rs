//! File formats.
//!
//! A stack file holds a fixed 40-byte little-endian header
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..4 | magic `LRHS` |
//! | 4..8 | version (u32, currently 1) |
//! | 8..16 | image count (u64) |
//! | 16..20 | image side `N` (u32) |
//! | 20..24 | flags (u32, bit 0: some image has a non-identity CTF) |
//! | 24..32 | noise variance (f64) |
//! | 32..40 | voxel size (f64) |
//!
//! followed by the images as row-major f32 real-space pixels. Per-image
//! metadata lives in a JSON sidecar next to it (`<stem>.json`).
//!
//! Volume files use the same scheme with magic `LRHV`: version, count (u64),
//! `N` (u32), reserved (u32), voxel size (f64), then real-space f32 volumes.
//!
//! CSV tables have a header row and fixed column order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctf::CtfParams;
use crate::error::{Error, Result};
use crate::grid::{self, FourierImage, FourierVolume, RealVolume};
use crate::metrics::MetricsReport;
use crate::objectives::LowRankModel;
use crate::optimizer::FitResult;
use crate::projection::Pose;
use crate::simulator::{GroundTruth, ParticleStack, SimulationConfig};

pub const STACK_MAGIC: &[u8; 4] = b"LRHS";
pub const VOLUME_MAGIC: &[u8; 4] = b"LRHV";
pub const FORMAT_VERSION: u32 = 1;
pub const FLAG_CTF: u32 = 1;
const HEADER_LEN: usize = 40;

/// How a stack was made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Definition of the signal-to-noise ratio used by the generator.
    pub snr_definition: String,
    pub offset_unit: String,
    pub simulation: Option<SimulationConfig>,
}

impl Provenance {
    pub fn simulated(cfg: &SimulationConfig) -> Self {
        Self {
            seed: cfg.seed,
            snr_definition: "mean over images of |P_i X_i|^2 / (sigma^2 N^2)".into(),
            offset_unit: "pixels".into(),
            simulation: Some(cfg.clone()),
        }
    }
}

/// Sidecar document of a stack file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackMetadata {
    pub version: u32,
    pub poses: Vec<Pose>,
    pub ctfs: Vec<CtfParams>,
    pub provenance: Option<Provenance>,
}

/// `<path without extension>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn header(magic: &[u8; 4], count: u64, n: u32, flags: u32, sigma2: f64, voxel: f64) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(magic);
    h[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h[8..16].copy_from_slice(&count.to_le_bytes());
    h[16..20].copy_from_slice(&n.to_le_bytes());
    h[20..24].copy_from_slice(&flags.to_le_bytes());
    h[24..32].copy_from_slice(&sigma2.to_le_bytes());
    h[32..40].copy_from_slice(&voxel.to_le_bytes());
    h
}

struct Header {
    count: usize,
    n: usize,
    flags: u32,
    sigma2: f64,
    voxel: f64,
}

fn parse_header(bytes: &[u8], magic: &[u8; 4], dims: u32) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("file shorter than its header".into()));
    }
    if &bytes[0..4] != magic {
        return Err(Error::Format(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n = u32_at(16) as usize;
    let per = (n as u64).checked_pow(dims).ok_or_else(|| Error::Format("image size overflows".into()))?;
    let expected = count
        .checked_mul(per)
        .and_then(|p| p.checked_mul(4))
        .and_then(|p| p.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if expected != bytes.len() as u64 {
        return Err(Error::Format(format!("header describes {expected} bytes, file has {}", bytes.len())));
    }
    Ok(Header { count: count as usize, n, flags: u32_at(20), sigma2: f64_at(24), voxel: f64_at(32) })
}

fn f32_payload(bytes: &[u8]) -> impl Iterator<Item = f64> + '_ {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Write `stack` to `path` and its sidecar next to it.
pub fn write_stack(path: &Path, stack: &ParticleStack, provenance: Option<Provenance>) -> Result<()> {
    stack.validate()?;
    let flags = if stack.ctfs.iter().any(|c| !c.identity) { FLAG_CTF } else { 0 };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header(STACK_MAGIC, stack.len() as u64, stack.n as u32, flags, stack.sigma2, stack.voxel_size))?;
    for img in &stack.images {
        for c in grid::inverse_fft_2d(img) {
            w.write_all(&(c.re as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    let meta = StackMetadata { version: FORMAT_VERSION, poses: stack.poses.clone(), ctfs: stack.ctfs.clone(), provenance };
    write_json(&sidecar_path(path), &meta)
}

/// Read a stack and its sidecar. Images are transformed to the Fourier
/// domain on load.
pub fn read_stack(path: &Path) -> Result<(ParticleStack, StackMetadata)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let h = parse_header(&bytes, STACK_MAGIC, 2)?;
    let meta: StackMetadata = read_json(&sidecar_path(path))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported sidecar version {}", meta.version)));
    }
    if meta.poses.len() != h.count || meta.ctfs.len() != h.count {
        return Err(Error::Format("sidecar and stack disagree on the image count".into()));
    }
    let n = h.n;
    let images = bytes[HEADER_LEN..]
        .chunks_exact(4 * n * n)
        .map(|chunk| grid::forward_fft_2d(n, &f32_payload(chunk).collect::<Vec<_>>()))
        .collect::<Result<Vec<FourierImage>>>()?;
    let _ = h.flags;
    let stack = ParticleStack { n, voxel_size: h.voxel, images, ctfs: meta.ctfs.clone(), poses: meta.poses.clone(), sigma2: h.sigma2 };
    Ok((stack, meta))
}

/// Real-space f32 pixels of each stored image, as read from disk.
pub fn read_stack_pixels(path: &Path) -> Result<Vec<Vec<f32>>> {
    let bytes = fs::read(path)?;
    let h = parse_header(&bytes, STACK_MAGIC, 2)?;
    Ok(bytes[HEADER_LEN..]
        .chunks_exact(4 * h.n * h.n)
        .map(|c| c.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
        .collect())
}

/// Write volumes (real part of the inverse transform) as f32.
pub fn write_volumes(path: &Path, volumes: &[FourierVolume]) -> Result<()> {
    let first = volumes.first().ok_or_else(|| Error::Config("no volumes to write".into()))?;
    if volumes.iter().any(|v| v.n() != first.n()) {
        return Err(Error::Shape("volumes of mixed size".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header(VOLUME_MAGIC, volumes.len() as u64, first.n() as u32, 0, 0.0, first.voxel_size()))?;
    for v in volumes {
        for x in grid::inverse_fft_3d_real(v).data() {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_volumes(path: &Path) -> Result<Vec<FourierVolume>> {
    let bytes = fs::read(path)?;
    let h = parse_header(&bytes, VOLUME_MAGIC, 3)?;
    let n = h.n;
    bytes[HEADER_LEN..]
        .chunks_exact(4 * n * n * n)
        .map(|c| {
            let v = grid::forward_fft_3d(&RealVolume::new(n, f32_payload(c).collect())?);
            FourierVolume::from_data(n, h.voxel, v.into_data())
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TruthDocument {
    sigma: f64,
    latents: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
    poses: Vec<Pose>,
    ctfs: Vec<CtfParams>,
}

/// Ground truth as `truth_volumes.lrhv` (mean, then components) and
/// `truth.json` in `dir`.
pub fn write_truth(dir: &Path, truth: &GroundTruth) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut vols = vec![truth.mean.clone()];
    vols.extend(truth.components.iter().cloned());
    write_volumes(&dir.join("truth_volumes.lrhv"), &vols)?;
    let doc = TruthDocument {
        sigma: truth.sigma,
        latents: truth.latents.clone(),
        labels: truth.labels.clone(),
        poses: truth.poses.clone(),
        ctfs: truth.ctfs.clone(),
    };
    write_json(&dir.join("truth.json"), &doc)
}

pub fn read_truth(dir: &Path) -> Result<GroundTruth> {
    let mut vols = read_volumes(&dir.join("truth_volumes.lrhv"))?.into_iter();
    let mean = vols.next().ok_or_else(|| Error::Format("truth bundle has no mean".into()))?;
    let doc: TruthDocument = read_json(&dir.join("truth.json"))?;
    Ok(GroundTruth {
        mean,
        components: vols.collect(),
        latents: doc.latents,
        labels: doc.labels,
        poses: doc.poses,
        ctfs: doc.ctfs,
        sigma: doc.sigma,
    })
}

#[derive(Serialize, Deserialize)]
struct FitDocument {
    singular_values: Vec<f64>,
    poses: Vec<Pose>,
    latents: Vec<Vec<f64>>,
    objective_trace: Vec<f64>,
    pose_error_trace: Vec<f64>,
    cutoffs: Vec<f64>,
}

/// Fit result as `model.lrhv` (mean, then orthonormal components),
/// `fit.json` and `timing.csv` (epoch,seconds) in `dir`. Everything except
/// the timing file is a deterministic function of the inputs.
pub fn write_fit(dir: &Path, fit: &FitResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut vols = vec![fit.model.mean.clone()];
    vols.extend(fit.model.components.iter().cloned());
    write_volumes(&dir.join("model.lrhv"), &vols)?;
    let doc = FitDocument {
        singular_values: fit.singular_values.clone(),
        poses: fit.poses.clone(),
        latents: fit.latents.clone(),
        objective_trace: fit.objective_trace.clone(),
        pose_error_trace: fit.pose_error_trace.clone(),
        cutoffs: fit.cutoffs.clone(),
    };
    write_json(&dir.join("fit.json"), &doc)?;
    let mut t = String::from("epoch,seconds\n");
    for (e, v) in fit.epoch_seconds.iter().enumerate() {
        t += &format!("{e},{v:e}\n");
    }
    fs::write(dir.join("timing.csv"), t)?;
    Ok(())
}

pub fn read_fit(dir: &Path) -> Result<FitResult> {
    let mut vols = read_volumes(&dir.join("model.lrhv"))?.into_iter();
    let mean = vols.next().ok_or_else(|| Error::Format("fit bundle has no mean".into()))?;
    let doc: FitDocument = read_json(&dir.join("fit.json"))?;
    let timing = dir.join("timing.csv");
    let epoch_seconds = if timing.exists() { read_column(&timing, 1)? } else { Vec::new() };
    Ok(FitResult {
        model: LowRankModel::new(mean, vols.collect())?,
        singular_values: doc.singular_values,
        poses: doc.poses,
        latents: doc.latents,
        objective_trace: doc.objective_trace,
        pose_error_trace: doc.pose_error_trace,
        epoch_seconds,
        cutoffs: doc.cutoffs,
    })
}

/// Columns `image,z0,z1,...`.
pub fn write_latents_csv(path: &Path, latents: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let r = latents.first().map_or(0, Vec::len);
    let head: Vec<String> = std::iter::once("image".to_string()).chain((0..r).map(|j| format!("z{j}"))).collect();
    writeln!(w, "{}", head.join(","))?;
    for (i, z) in latents.iter().enumerate() {
        let row: Vec<String> = std::iter::once(i.to_string()).chain(z.iter().map(|x| format!("{x:e}"))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_latents_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .skip(1)
                .map(|x| x.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad latent value {x:?}: {e}"))))
                .collect()
        })
        .collect()
}

/// Column `k` of a CSV table with a header row.
fn read_column(path: &Path, k: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let x = l.split(',').nth(k).ok_or_else(|| Error::Format(format!("short row in {}", path.display())))?;
            x.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad value {x:?}: {e}")))
        })
        .collect()
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| format!("{v:e}"))
}

/// `report.json` plus the tables `objective.csv` (epoch,objective,seconds),
/// `angles.csv` (index,degrees), `fsc.csv` (shell,fsc) and `poses.csv`
/// (stage,rotation_mean_deg,rotation_median_deg,out_of_plane_deg,in_plane_deg,offset_px,contrast_corr).
pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    let mut t = String::from("epoch,objective,seconds\n");
    for (e, v) in report.objective_trace.iter().enumerate() {
        let s = report.epoch_seconds.get(e).copied();
        t += &format!("{e},{v:e},{}\n", opt(s));
    }
    fs::write(dir.join("objective.csv"), t)?;
    let mut t = String::from("index,degrees\n");
    for (k, a) in report.principal_angles_deg.iter().enumerate() {
        t += &format!("{k},{a}\n");
    }
    fs::write(dir.join("angles.csv"), t)?;
    let mut t = String::from("shell,fsc\n");
    for (k, f) in report.mean_fsc.iter().enumerate() {
        t += &format!("{k},{}\n", opt(*f));
    }
    fs::write(dir.join("fsc.csv"), t)?;
    let mut t = String::from("stage,rotation_mean_deg,rotation_median_deg,out_of_plane_deg,in_plane_deg,offset_px,contrast_corr\n");
    for (name, p) in [("initial", &report.initial), ("refined", &report.refined)] {
        if let Some(p) = p {
            t += &format!(
                "{name},{},{},{},{},{},{}\n",
                p.rotation_mean_deg,
                p.rotation_median_deg,
                p.out_of_plane_mean_deg,
                p.in_plane_mean_deg,
                p.offset_mean_px,
                opt(p.contrast_correlation)
            );
        }
    }
    if let Some(imp) = report.improvements() {
        t += &format!("improvement_pct,{},,{},{},{},\n", imp[0], imp[1], imp[2], imp[3]);
    }
    fs::write(dir.join("poses.csv"), t)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack(n: usize, count: usize) -> ParticleStack {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let images = (0..count)
            .map(|_| {
                let real: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
                grid::forward_fft_2d(n, &real).unwrap()
            })
            .collect();
        let poses = (0..count).map(|i| Pose::new(nalgebra::Vector3::new(0.1 * i as f64, 1.0 / 3.0, -0.2), [0.25, -1.5], 1.1)).collect();
        let mut ctfs = vec![CtfParams::identity(); count];
        ctfs[0] = CtfParams::typical(15000.0 + 1.0 / 7.0);
        ParticleStack { n, voxel_size: 1.5, images, ctfs, poses, sigma2: 0.3 }
    }

    #[test]
    fn header_is_forty_bytes_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.lrhs");
        let s = stack(6, 3);
        write_stack(&p, &s, None).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 3 * 36 * 4);
        assert_eq!(&bytes[0..4], b"LRHS");
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), FLAG_CTF);
        let mut bad = bytes.clone();
        bad[4] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_stack(&p), Err(Error::Format(_))));
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_stack(&p), Err(Error::Format(_))));
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.lrhs");
        let q = dir.path().join("t.lrhs");
        let s = stack(8, 4);
        write_stack(&p, &s, None).unwrap();
        let (back, meta) = read_stack(&p).unwrap();
        assert_eq!(meta.poses, s.poses);
        assert_eq!(meta.ctfs, s.ctfs);
        assert_eq!(back.sigma2, s.sigma2);
        assert_eq!(back.voxel_size, s.voxel_size);
        write_stack(&q, &back, None).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        for (a, b) in back.images.iter().zip(&s.images) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn latent_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.csv");
        let z = vec![vec![1.0 / 3.0, -2e-300], vec![f64::MAX, 0.0]];
        write_latents_csv(&p, &z).unwrap();
        assert_eq!(read_latents_csv(&p).unwrap(), z);
    }
}
