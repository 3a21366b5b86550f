//! Cluster images drawn from three discrete conformations by their latent
//! coordinates in an estimated two-dimensional subspace.
//!
//! ```text
//! cargo run --release --example discrete_states -- [n_images] [snr] [separation] [epochs]
//! ```

use lrh::config::OptimConfig;
use lrh::metrics::cluster_accuracy;
use lrh::optimizer::{fit, FitInputs};
use lrh::simulator::{simulate_stack, synthesize_volumes, LatentLaw, NoiseLevel, Phantom, SimulationConfig};
use lrh::ObjectiveKind;

fn main() -> lrh::Result<()> {
    lrh::init_thread_pool();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |k: usize, d: f64| args.get(k).and_then(|s| s.parse().ok()).unwrap_or(d);
    let n_images = arg(0, 2000.0) as usize;

    // three orthonormal displacements, one per state
    let truth = synthesize_volumes(&Phantom::standard(16, 3))?;
    let latents = LatentLaw::Discrete { scale: arg(2, 1.0) * truth.mean.norm() };
    let (stack, gt) = simulate_stack(&truth, &SimulationConfig::new(n_images, NoiseLevel::Snr(arg(1, 1.0)), latents, 31))?;

    let config = OptimConfig {
        objective: ObjectiveKind::Ml,
        rank: 2,
        epochs: arg(3, 80.0) as usize,
        batch_size: 100,
        learning_rate: 3e-2,
        ..OptimConfig::default()
    };
    let result = fit(&stack, &config, FitInputs::default())?;
    let labels = gt.labels.expect("discrete law records labels");
    let accuracy = cluster_accuracy(&result.latents, &labels, 3, 0)?;
    let mut centroids = vec![vec![0.0; 2]; 3];
    let mut counts = [0usize; 3];
    for (z, &l) in result.latents.iter().zip(&labels) {
        counts[l] += 1;
        centroids[l].iter_mut().zip(z).for_each(|(c, x)| *c += x);
    }
    for (c, k) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|x| *x /= k.max(1) as f64);
    }
    println!("state sizes {counts:?}");
    println!("latent centroids per state {centroids:.3?}");
    println!("cluster accuracy {accuracy:.4}");
    Ok(())
}
