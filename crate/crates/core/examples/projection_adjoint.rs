//! Project a phantom through both interpolation schemes and check that
//! backprojection is the adjoint of projection.
//!
//! ```text
//! cargo run --release --example projection_adjoint -- [grid] [oversample]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lrh::projection::{backproject, project};
use lrh::rotation::random_rotation_vector;
use lrh::simulator::{synthesize_volumes, Phantom};
use lrh::{CtfParams, InterpolationScheme, Pose};

fn main() -> lrh::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n = args.first().and_then(|s| s.parse().ok()).unwrap_or(32);
    let os = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let vols = synthesize_volumes(&Phantom::standard(n, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ctf = CtfParams::typical(15000.0);

    for k in 0..4 {
        let pose = Pose::new(random_rotation_vector(&mut rng), [0.5, -0.25], 1.0);
        let tri = project(&vols.mean, &pose, &ctf, InterpolationScheme::trilinear(os))?;
        let near = project(&vols.mean, &pose, &ctf, InterpolationScheme::nearest())?;
        let diff: f64 = tri.data().iter().zip(near.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
        let mut defects = Vec::new();
        for scheme in [InterpolationScheme::trilinear(os), InterpolationScheme::nearest()] {
            let y = project(&vols.components[0], &pose, &ctf, scheme)?;
            let lhs = project(&vols.mean, &pose, &ctf, scheme)?.inner(&y);
            let rhs = vols.mean.inner(&backproject(&y, &pose, &ctf, scheme, 1.0)?);
            defects.push((lhs - rhs).norm() / lhs.norm());
        }
        println!(
            "pose {k}: |trilinear - nearest| / |trilinear| = {:.3}, adjoint defect trilinear {:.1e}, nearest {:.1e}",
            (diff / tri.norm_sqr()).sqrt(),
            defects[0],
            defects[1]
        );
    }
    Ok(())
}
