//! Per-epoch wall time against grid size and objective.
//!
//! ```text
//! cargo run --release --example runtime_scaling -- [n_images] [rank] [epochs]
//! ```

use lrh::config::OptimConfig;
use lrh::optimizer::{fit, FitInputs};
use lrh::simulator::{simulate_stack, synthesize_volumes, LatentLaw, NoiseLevel, Phantom, SimulationConfig};
use lrh::ObjectiveKind;

fn epoch_time(n: usize, n_images: usize, rank: usize, epochs: usize, objective: ObjectiveKind) -> lrh::Result<f64> {
    let truth = synthesize_volumes(&Phantom::standard(n, 2))?;
    let scale = truth.mean.norm();
    let latents = LatentLaw::Gaussian { std: vec![0.3 * scale, 0.2 * scale] };
    let (stack, _) = simulate_stack(&truth, &SimulationConfig::new(n_images, NoiseLevel::Snr(1.0), latents, 41))?;
    let config = OptimConfig { objective, rank, epochs, batch_size: 100, learning_rate: 3e-2, ..OptimConfig::default() };
    let result = fit(&stack, &config, FitInputs::default())?;
    // fastest epoch after the first, which includes one-off allocations
    let t = &result.epoch_seconds[1.min(result.epoch_seconds.len() - 1)..];
    Ok(t.iter().copied().fold(f64::INFINITY, f64::min))
}

fn main() -> lrh::Result<()> {
    lrh::init_thread_pool();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |k: usize, d: usize| args.get(k).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (n_images, rank, epochs) = (arg(0, 400), arg(1, 10), arg(2, 5));

    let t32 = epoch_time(32, n_images, rank, epochs, ObjectiveKind::Ml)?;
    let t64 = epoch_time(64, n_images, rank, epochs, ObjectiveKind::Ml)?;
    println!("ML, r = {rank}: N = 32 {t32:.3} s/epoch, N = 64 {t64:.3} s/epoch, ratio {:.2}", t64 / t32);
    let ls = epoch_time(32, n_images, rank, epochs, ObjectiveKind::Ls)?;
    println!("N = 32, r = {rank}: LS {ls:.3} s/epoch, ML {t32:.3} s/epoch, relative difference {:.1}%", 100.0 * (t32 - ls).abs() / ls);
    Ok(())
}
