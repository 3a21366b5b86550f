//! Build the frequency-shell priors from two noisy half-set estimates of a
//! known covariance and compare penalties.
//!
//! ```text
//! cargo run --release --example shell_regularizer -- [n_images] [noise]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use lrh::grid::build_shells;
use lrh::regularization::{covar_fsc, shell_weights};
use lrh::simulator::{simulate_stack, synthesize_volumes, LatentLaw, NoiseLevel, Phantom, SimulationConfig};
use lrh::{FourierVolume, ShellRegularizer};

/// Truth plus white noise whose level grows linearly with frequency.
fn noisy(v: &FourierVolume, level: f64, rng: &mut ChaCha8Rng) -> FourierVolume {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = v.clone();
    let scale = level * v.norm() / (v.len() as f64).sqrt();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let f = v.frequency(i);
        let r = ((f[0] * f[0] + f[1] * f[1] + f[2] * f[2]) as f64).sqrt();
        *x += num_complex::Complex64::new(normal.sample(rng), normal.sample(rng)) * (scale * r);
    }
    out
}

fn main() -> lrh::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_images = args.first().and_then(|s| s.parse().ok()).unwrap_or(500);
    let level = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let truth = synthesize_volumes(&Phantom::standard(16, 2))?;
    let scale = truth.mean.norm();
    let latents = LatentLaw::Gaussian { std: vec![0.3 * scale, 0.2 * scale] };
    let (stack, _) = simulate_stack(&truth, &SimulationConfig::new(n_images, NoiseLevel::Snr(1.0), latents, 5))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let half = |rng: &mut ChaCha8Rng| truth.components.iter().map(|v| noisy(&v.scaled(0.3 * scale), level, rng)).collect::<Vec<_>>();
    let (a, b) = (half(&mut rng), half(&mut rng));

    let shells = build_shells(stack.n)?;
    let fsc = covar_fsc(&a, &b, &shells)?;
    let idx: Vec<usize> = (0..stack.len()).collect();
    let weights = shell_weights(&stack, &stack.poses, &idx, &shells)?;
    let reg = ShellRegularizer::build(&fsc, &weights, &shells, lrh::regularization::DEFAULT_RANK)?;

    println!("covariance FSC on the shell diagonal:");
    for (s, c) in fsc.diagonal().iter().enumerate() {
        println!("  shell {s:2}  {}", c.map_or("-".into(), |c| format!("{c:.3}")));
    }
    let clean: Vec<FourierVolume> = truth.components.iter().map(|v| v.scaled(0.3 * scale)).collect();
    println!("covariance penalty: truth {:.3e}, half estimate {:.3e}", reg.covariance_penalty(&clean)?, reg.covariance_penalty(&a)?);
    println!("component penalty:  truth {:.3e}, half estimate {:.3e}", reg.component_penalty(&clean)?, reg.component_penalty(&a)?);
    Ok(())
}
