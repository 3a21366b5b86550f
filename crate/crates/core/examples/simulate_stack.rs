//! Simulate a particle stack, write it with its ground truth, and read it
//! back.
//!
//! ```text
//! cargo run --release --example simulate_stack -- [out_dir] [n_images] [snr]
//! ```

use lrh::config::SimulateSettings;
use lrh::io::{self, Provenance};
use lrh::simulator::simulate_settings;

fn main() -> lrh::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = std::path::PathBuf::from(args.first().map_or("sim_out", String::as_str));
    let settings = SimulateSettings {
        images: args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500),
        snr: args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0),
        max_offset: 1.0,
        contrast_std: 0.2,
        defocus: Some([8000.0, 20000.0]),
        rotation_error_deg: 5.0,
        offset_error_px: 2.0,
        ..SimulateSettings::default()
    };
    let (stack, truth, sim) = simulate_settings(&settings)?;

    let signal: f64 = stack.images.iter().map(|y| y.norm_sqr()).sum::<f64>() / stack.len() as f64;
    let pixels = (stack.n * stack.n) as f64;
    println!("{} images of {}x{} pixels", stack.len(), stack.n, stack.n);
    println!("noise variance {:.3e}, mean image energy {:.3e} ({:.3e} from noise)", stack.sigma2, signal, stack.sigma2 * pixels);
    println!("component norms {:?}", truth.components.iter().map(|v| v.norm()).collect::<Vec<_>>());

    std::fs::create_dir_all(&out)?;
    let path = out.join("stack.lrhs");
    io::write_stack(&path, &stack, Some(Provenance::simulated(&sim)))?;
    io::write_truth(&out.join("truth"), &truth)?;

    let (back, meta) = io::read_stack(&path)?;
    let worst = stack
        .images
        .iter()
        .zip(&back.images)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    println!("wrote {}; largest change after the f32 round trip {worst:.2e}", path.display());
    println!("stored poses are perturbed: first rotation {:?}, true {:?}", meta.poses[0].theta, truth.poses[0].theta);
    Ok(())
}
