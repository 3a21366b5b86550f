//! Joint refinement of rotations, offsets and contrasts from perturbed
//! initial poses.
//!
//! ```text
//! cargo run --release --example pose_refinement -- [n_images] [snr] [heterogeneity] [epochs] [rotation_lr]
//! ```

use lrh::config::OptimConfig;
use lrh::metrics::{pose_errors, MetricsReport};
use lrh::optimizer::{fit, FitInputs};
use lrh::simulator::{perturb_poses, simulate_stack, synthesize_volumes, ContrastLaw, LatentLaw, NoiseLevel, Phantom, PoseLaw, SimulationConfig};
use lrh::ObjectiveKind;

fn main() -> lrh::Result<()> {
    lrh::init_thread_pool();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |k: usize, d: f64| args.get(k).and_then(|s| s.parse().ok()).unwrap_or(d);
    let n_images = arg(0, 2000.0) as usize;
    let h = arg(2, 0.1);

    let truth = synthesize_volumes(&Phantom::standard(16, 2))?;
    let scale = truth.mean.norm();
    let latents = LatentLaw::Gaussian { std: vec![h * scale, 0.7 * h * scale] };
    let mut sim = SimulationConfig::new(n_images, NoiseLevel::Snr(arg(1, 300.0)), latents, 21);
    sim.poses = PoseLaw::Uniform { max_offset: 1.0 };
    sim.contrast = ContrastLaw::benchmark();
    let (mut stack, gt) = simulate_stack(&truth, &sim)?;

    // 5 degrees mean rotation error, offsets off by up to 2 pixels, unknown contrast
    let mut start = perturb_poses(&gt.poses, 5.0, 2.0, 22)?;
    start.iter_mut().for_each(|p| p.contrast = 1.0);
    stack.poses = start.clone();

    let config = OptimConfig {
        objective: ObjectiveKind::Ml,
        rank: 2,
        epochs: arg(3, 80.0) as usize,
        batch_size: 100,
        learning_rate: 3e-2,
        cutoff_period: 20,
        rotation_lr: arg(4, 2e-3),
        pose_opt: true,
        ..OptimConfig::default()
    };
    let result = fit(&stack, &config, FitInputs { reference_poses: Some(&gt.poses), ..FitInputs::default() })?;
    let report = MetricsReport {
        initial: Some(pose_errors(&start, &gt.poses)?),
        refined: Some(pose_errors(&result.poses, &gt.poses)?),
        ..MetricsReport::default()
    };
    let (a, b) = (report.initial.as_ref().unwrap(), report.refined.as_ref().unwrap());
    println!("                 initial   refined");
    println!("rotation (deg)   {:7.3}   {:7.3}", a.rotation_mean_deg, b.rotation_mean_deg);
    println!("out-of-plane     {:7.3}   {:7.3}", a.out_of_plane_mean_deg, b.out_of_plane_mean_deg);
    println!("in-plane         {:7.3}   {:7.3}", a.in_plane_mean_deg, b.in_plane_mean_deg);
    println!("offset (px)      {:7.3}   {:7.3}", a.offset_mean_px, b.offset_mean_px);
    println!("contrast corr    {:>7}   {:7.3}", "-", b.contrast_correlation.unwrap_or(f64::NAN));
    if let Some(imp) = report.improvements() {
        println!("improvement (%)  rotation {:.0}, out-of-plane {:.0}, in-plane {:.0}, offset {:.0}", imp[0], imp[1], imp[2], imp[3]);
    }
    println!("rotation error by epoch {:.2?}", result.pose_error_trace);
    Ok(())
}
