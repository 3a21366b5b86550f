//! Recover a two-dimensional heterogeneity subspace from simulated images
//! with known poses.
//!
//! ```text
//! cargo run --release --example estimate_subspace -- [n_images] [snr] [epochs] [lr]
//! ```

use lrh::config::OptimConfig;
use lrh::metrics::subspace_angles;
use lrh::optimizer::{fit, FitInputs};
use lrh::simulator::{simulate_stack, synthesize_volumes, LatentLaw, NoiseLevel, Phantom, SimulationConfig};
use lrh::ObjectiveKind;

fn main() -> lrh::Result<()> {
    lrh::init_thread_pool();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |k: usize, d: f64| args.get(k).and_then(|s| s.parse().ok()).unwrap_or(d);
    let n_images = arg(0, 2000.0) as usize;

    let truth = synthesize_volumes(&Phantom::standard(16, 2))?;
    let scale = truth.mean.norm();
    let latents = LatentLaw::Gaussian { std: vec![scale, 0.7 * scale] };
    let (stack, _) = simulate_stack(&truth, &SimulationConfig::new(n_images, NoiseLevel::Snr(arg(1, 30.0)), latents, 11))?;
    println!("{} images, N = {}, sigma^2 = {:.3e}", stack.len(), stack.n, stack.sigma2);

    let config = OptimConfig {
        objective: ObjectiveKind::Ml,
        rank: 2,
        epochs: arg(2, 160.0) as usize,
        batch_size: 100,
        learning_rate: arg(3, 3e-2),
        ..OptimConfig::default()
    };
    let result = fit(&stack, &config, FitInputs::default())?;
    for (e, v) in result.objective_trace.iter().enumerate().step_by(10) {
        println!("epoch {e:4}  objective {v:.6e}");
    }
    let angles = subspace_angles(&result.model.components, &truth.components)?;
    let seconds: f64 = result.epoch_seconds.iter().sum();
    println!("singular values {:?}", result.singular_values);
    println!("principal angles (deg) {angles:.2?}");
    println!("fit time {seconds:.1} s");
    Ok(())
}
