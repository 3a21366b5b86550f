//! Acceptance harness: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each. Exits nonzero if any criterion fails.
//!
//! ```text
//! cargo test --release --test acceptance
//! ```

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lrh::config::OptimConfig;
use lrh::grid::build_shells;
use lrh::metrics::{cluster_accuracy, pose_errors, subspace_angles};
use lrh::objectives::{ls_gradient, ls_image, ls_objective, ml_gradient, ml_objective, Batch, PreparedModel};
use lrh::optimizer::{fit, refine_offsets, FitInputs};
use lrh::projection::{backproject, project};
use lrh::regularization::covar_fsc;
use lrh::simulator::{perturb_poses, simulate_stack, synthesize_volumes, ContrastLaw, LatentLaw, NoiseLevel, Phantom, PoseLaw, SimulationConfig};
use lrh::{CtfParams, FourierVolume, InterpolationScheme, LowRankModel, ObjectiveKind, Projector, ShellRegularizer};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn schemes() -> [InterpolationScheme; 2] {
    [InterpolationScheme::trilinear(2), InterpolationScheme::nearest()]
}

fn dense_objective(ml: bool) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let (stack, model) = random_instance(6, 32, 2, if ml { 100 } else { 0 } + seed);
        let scheme = schemes()[seed as usize % 2];
        let batch = Batch::full(&stack);
        let (fast, dense) = if ml {
            (ml_objective(&batch, &model, stack.sigma2, None, scheme).unwrap(), dense_ml(&stack, &model, scheme))
        } else {
            (ls_objective(&batch, &model, stack.sigma2, None, scheme).unwrap(), dense_ls(&stack, &model, scheme))
        };
        worst = worst.max(relative_error(fast, dense));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-8 && (ml || secs < 10.0);
    check(ok, format!("20 instances, max relative error {worst:.1e}, {secs:.1} s"))
}

fn random_regularizer(n: usize, rng: &mut ChaCha8Rng) -> ShellRegularizer {
    let len = n * n * n;
    let rvecs = (0..2).map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut reg = ShellRegularizer::from_rvecs(rvecs, len);
    reg.rv = (0..len).map(|_| rng.random_range(0.0..2.0)).collect();
    reg
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for rank in [1, 3] {
        for seed in 0..20u64 {
            let (stack, model) = random_instance(6, 8, rank, 200 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let reg = (seed % 2 == 1).then(|| random_regularizer(6, &mut rng));
            let scheme = InterpolationScheme::trilinear(2);
            let batch = Batch::full(&stack);
            let dir: Vec<FourierVolume> = (0..rank).map(|_| random_volume(6, &mut rng, 1.0)).collect();
            let gl = ls_gradient(&batch, &model, stack.sigma2, reg.as_ref(), scheme).unwrap();
            let fl = |m: &LowRankModel| ls_objective(&batch, m, stack.sigma2, reg.as_ref(), scheme).unwrap();
            worst = worst.max(relative_error(directional_from_gradient(&gl, &dir), directional_fd(fl, &model, &dir, 1e-4)));
            let gm = ml_gradient(&batch, &model, stack.sigma2, reg.as_ref(), scheme).unwrap();
            let fm = |m: &LowRankModel| ml_objective(&batch, m, stack.sigma2, reg.as_ref(), scheme).unwrap();
            worst = worst.max(relative_error(directional_from_gradient(&gm, &dir), directional_fd(fm, &model, &dir, 1e-4)));
        }
    }
    check(worst < 1e-5, format!("LS and ML, r in {{1, 3}}, 20 instances each, max relative error {worst:.1e}"))
}

fn adjoint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 2];
    for draw in 0..100 {
        let n = rng.random_range(4..11);
        for (k, scheme) in [InterpolationScheme::trilinear(rng.random_range(1..3)), InterpolationScheme::nearest()].into_iter().enumerate() {
            let x = random_volume(n, &mut rng, 1.0);
            let y = random_image(n, &mut rng, 1.0);
            let pose = random_pose(&mut rng);
            let ctf = if draw % 2 == 0 { CtfParams::identity() } else { CtfParams::typical(rng.random_range(5000.0..30000.0)) };
            let lhs = project(&x, &pose, &ctf, scheme).unwrap().inner(&y);
            let rhs = x.inner(&backproject(&y, &pose, &ctf, scheme, 1.0).unwrap());
            worst[k] = worst[k].max((lhs - rhs).norm() / lhs.norm().max(rhs.norm()));
        }
    }
    check(worst.iter().all(|&w| w < 1e-10), format!("100 draws, max relative defect trilinear {:.1e}, nearest {:.1e}", worst[0], worst[1]))
}

fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = [0.0f64; 3];
    for n in [4usize, 6, 8] {
        let d = n * n;
        let z = DMatrix::from_fn(d, 3, |_, _| complex_normal(&mut rng));
        let y = nalgebra::DVector::from_fn(d, |_, _| complex_normal(&mut rng));
        let extra: f64 = rng.random_range(0.0..3.0);
        let yfull = y.clone().insert_row(d, num_complex::Complex64::new(extra.sqrt(), 0.0));
        let zfull = z.clone().insert_row(d, num_complex::Complex64::new(0.0, 0.0));
        let e = &yfull * yfull.adjoint() - &zfull * zfull.adjoint() - DMatrix::<num_complex::Complex64>::identity(d + 1, d + 1) * num_complex::Complex64::from(0.7);
        worst[0] = worst[0].max(relative_error(ls_image(&y, extra, &z, 0.7, d + 1, false).value, e.norm_squared()));
    }
    for n in [4usize, 6] {
        let len = n * n * n;
        let model = LowRankModel::new(random_volume(n, &mut rng, 1.0), (0..2).map(|_| random_volume(n, &mut rng, 1.0)).collect()).unwrap();
        let reg = random_regularizer(n, &mut rng);
        let sigma = dense_covariance(&model);
        let mut dense = 0.0;
        for a in 0..len {
            for b in 0..len {
                dense += sigma[(a, b)].norm_sqr() * reg.rvecs.iter().map(|r| r[a] * r[b]).sum::<f64>();
            }
        }
        worst[1] = worst[1].max(relative_error(reg.covariance_penalty(&model.components).unwrap(), dense));
    }
    for n in [4usize, 6, 8] {
        let shells = build_shells(n).unwrap();
        let a: Vec<FourierVolume> = (0..2).map(|_| random_volume(n, &mut rng, 1.0)).collect();
        let b: Vec<FourierVolume> = (0..3).map(|_| random_volume(n, &mut rng, 1.0)).collect();
        let sa = dense_covariance(&LowRankModel::new(a[0].clone(), a.clone()).unwrap());
        let sb = dense_covariance(&LowRankModel::new(b[0].clone(), b.clone()).unwrap());
        let fast = covar_fsc(&a, &b, &shells).unwrap();
        let members = shells.members();
        for i in 0..shells.count() {
            for j in 0..shells.count() {
                let (mut c, mut na, mut nb) = (0.0, 0.0, 0.0);
                for &k in &members[i] {
                    for &l in &members[j] {
                        c += (sa[(k, l)].conj() * sb[(k, l)]).re;
                        na += sa[(k, l)].norm_sqr();
                        nb += sb[(k, l)].norm_sqr();
                    }
                }
                let dense = (c / (na * nb).sqrt()).clamp(-1.0, 1.0);
                worst[2] = worst[2].max((fast.get(i, j).unwrap() - dense).abs());
            }
        }
    }
    check(
        worst.iter().all(|&w| w < 1e-8),
        format!("frobenius {:.1e}, regularizer {:.1e}, covariance FSC {:.1e}", worst[0], worst[1], worst[2]),
    )
}

fn subspace_fit(snr: f64) -> (f64, f64) {
    let truth = synthesize_volumes(&Phantom::standard(16, 2)).unwrap();
    let scale = truth.mean.norm();
    let latents = LatentLaw::Gaussian { std: vec![scale, 0.7 * scale] };
    let (stack, _) = simulate_stack(&truth, &SimulationConfig::new(2000, NoiseLevel::Snr(snr), latents, 11)).unwrap();
    let config = OptimConfig { objective: ObjectiveKind::Ml, rank: 2, epochs: 160, batch_size: 100, learning_rate: 3e-2, ..OptimConfig::default() };
    let start = Instant::now();
    let result = fit(&stack, &config, FitInputs::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let angles = subspace_angles(&result.model.components, &truth.components).unwrap();
    (*angles.last().unwrap(), secs)
}

fn subspace() -> Outcome {
    let (angle, secs) = subspace_fit(30.0);
    check(angle < 5.0 && secs < 300.0, format!("N = 16, n = 2000, SNR 30: largest principal angle {angle:.2} deg in {secs:.0} s"))
}

fn pose_refinement() -> Outcome {
    let truth = synthesize_volumes(&Phantom::standard(16, 2)).unwrap();
    let scale = truth.mean.norm();
    let latents = LatentLaw::Gaussian { std: vec![0.1 * scale, 0.07 * scale] };
    let mut sim = SimulationConfig::new(2000, NoiseLevel::Snr(300.0), latents, 21);
    sim.poses = PoseLaw::Uniform { max_offset: 1.0 };
    sim.contrast = ContrastLaw::benchmark();
    let (mut stack, gt) = simulate_stack(&truth, &sim).unwrap();
    let mut start = perturb_poses(&gt.poses, 5.0, 2.0, 22).unwrap();
    start.iter_mut().for_each(|p| p.contrast = 1.0);
    stack.poses = start.clone();
    let config = OptimConfig {
        objective: ObjectiveKind::Ml,
        rank: 2,
        epochs: 80,
        batch_size: 100,
        learning_rate: 3e-2,
        cutoff_period: 20,
        rotation_lr: 2e-3,
        pose_opt: true,
        ..OptimConfig::default()
    };
    let result = fit(&stack, &config, FitInputs::default()).unwrap();
    let (a, b) = (pose_errors(&start, &gt.poses).unwrap(), pose_errors(&result.poses, &gt.poses).unwrap());
    let rot = 100.0 * (1.0 - b.rotation_mean_deg / a.rotation_mean_deg);
    let off = 100.0 * (1.0 - b.offset_mean_px / a.offset_mean_px);
    let corr = b.contrast_correlation.unwrap_or(f64::NAN);
    check(
        rot >= 30.0 && off >= 50.0 && corr >= 0.9,
        format!(
            "rotation {:.2} -> {:.2} deg ({rot:.0}%), offset {:.2} -> {:.2} px ({off:.0}%), contrast correlation {corr:.3}",
            a.rotation_mean_deg, b.rotation_mean_deg, a.offset_mean_px, b.offset_mean_px
        ),
    )
}

fn newton() -> Outcome {
    let truth = synthesize_volumes(&Phantom::standard(16, 2)).unwrap();
    let scale = truth.mean.norm();
    let mut sim = SimulationConfig::new(100, NoiseLevel::Snr(1.0), LatentLaw::Gaussian { std: vec![0.3 * scale, 0.2 * scale] }, 3);
    sim.poses = PoseLaw::Uniform { max_offset: 1.0 };
    let (stack, gt) = simulate_stack(&truth, &sim).unwrap();
    let mut poses = perturb_poses(&gt.poses, 0.0, 2.0, 4).unwrap();
    let comps = truth.components.iter().map(|v| v.scaled(0.3 * scale)).collect();
    let model = LowRankModel::new(truth.mean.clone(), comps).unwrap();
    let projector = Projector::new(16, 1.0, InterpolationScheme::default()).unwrap();
    let prepared = PreparedModel::new(&projector, &model).unwrap();
    let idx: Vec<usize> = (0..100).collect();
    let traces = refine_offsets(&projector, &prepared, &stack, &mut poses, &idx, stack.sigma2, 10).unwrap();
    let bad = traces.iter().filter(|t| t.len() != 11 || t.windows(2).any(|w| w[1] > w[0])).count();
    check(bad == 0 && traces.len() == 100, format!("100 images x 10 iterations, {bad} traces increase"))
}

fn epoch_time(n: usize, epochs: usize, objective: ObjectiveKind) -> f64 {
    let truth = synthesize_volumes(&Phantom::standard(n, 2)).unwrap();
    let scale = truth.mean.norm();
    let latents = LatentLaw::Gaussian { std: vec![0.3 * scale, 0.2 * scale] };
    let (stack, _) = simulate_stack(&truth, &SimulationConfig::new(400, NoiseLevel::Snr(1.0), latents, 41)).unwrap();
    let config = OptimConfig { objective, rank: 10, epochs, batch_size: 100, learning_rate: 3e-2, ..OptimConfig::default() };
    let result = fit(&stack, &config, FitInputs::default()).unwrap();
    result.epoch_seconds[1..].iter().copied().fold(f64::INFINITY, f64::min)
}

fn runtime() -> Outcome {
    let t32 = epoch_time(32, 6, ObjectiveKind::Ml);
    let t64 = epoch_time(64, 3, ObjectiveKind::Ml);
    let ls = epoch_time(32, 6, ObjectiveKind::Ls);
    let ratio = t64 / t32;
    let diff = (t32 - ls).abs() / ls;
    check(
        (4.0..=16.0).contains(&ratio) && diff < 0.25,
        format!("N = 32 {t32:.2} s, N = 64 {t64:.2} s per epoch, ratio {ratio:.2}; r = 10 ML vs LS differ by {:.1}%", 100.0 * diff),
    )
}

fn clustering() -> Outcome {
    let truth = synthesize_volumes(&Phantom::standard(16, 3)).unwrap();
    let latents = LatentLaw::Discrete { scale: 0.5 * truth.mean.norm() };
    let (stack, gt) = simulate_stack(&truth, &SimulationConfig::new(2000, NoiseLevel::Snr(1.0), latents, 31)).unwrap();
    let config = OptimConfig { objective: ObjectiveKind::Ml, rank: 2, epochs: 80, batch_size: 100, learning_rate: 3e-2, ..OptimConfig::default() };
    let result = fit(&stack, &config, FitInputs::default()).unwrap();
    let accuracy = cluster_accuracy(&result.latents, gt.labels.as_ref().unwrap(), 3, 0).unwrap();
    check(accuracy >= 0.95, format!("3 states, SNR 1, separation 0.5: accuracy {accuracy:.4}"))
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names.iter().filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok()).map(|f| f.to_string()).collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[simulate]\nimages = 300\ngrid = 12\nseed = 9\n\n[estimate]\nepochs = 6\nbatch_size = 50\ncutoff_period = 2\n").unwrap();
    let run = |args: &[&Path], sub: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_lrh"));
        cmd.arg(sub).arg("--config").arg(&cfg).env("LRH_THREADS", "1").env("RUST_LOG", "warn");
        if let [stack, out] = args {
            cmd.arg("--stack").arg(stack).arg("--out").arg(out);
        } else {
            cmd.arg("--out").arg(args[0]);
        }
        cmd.status().unwrap().success()
    };
    let sims = [dir.path().join("s1"), dir.path().join("s2")];
    let fits = [dir.path().join("f1"), dir.path().join("f2")];
    let mut ok = sims.iter().all(|s| run(&[s], "simulate"));
    let stack = sims[0].join("stack.lrhs");
    ok &= fits.iter().all(|f| run(&[&stack, f], "estimate"));
    if !ok {
        return Err("a subcommand failed".into());
    }
    let mut diff = same_files(&sims[0], &sims[1], &["stack.lrhs", "stack.json", "truth/truth_volumes.lrhv", "truth/truth.json"]);
    diff.extend(same_files(&fits[0], &fits[1], &["model.lrhv", "fit.json"]));
    check(diff.is_empty(), if diff.is_empty() { "simulate and single-worker estimate outputs identical".into() } else { format!("differing files {diff:?}") })
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 dense LS objective", || dense_objective(false)),
        ("2 dense ML objective", || dense_objective(true)),
        ("3 gradients vs finite differences", gradients),
        ("4 projection adjoint", adjoint),
        ("5 identity suite", identities),
        ("6 subspace recovery", subspace),
        ("7 pose refinement", pose_refinement),
        ("8 offset Newton monotonicity", newton),
        ("9 runtime scaling", runtime),
        ("10 discrete-state clustering", clustering),
        ("11 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.0} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.0} s]");
            }
        }
        if name.starts_with("6 ") {
            let (angle, secs) = subspace_fit(1.0);
            println!("info  6 at SNR 1: largest principal angle {angle:.2} deg in {secs:.0} s");
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
