//! Forward-noise a grid latent and recover it from the true noise.

use gridedit::diffusion::{forward_noise, reconstruct_x0, NoiseSchedule};
use gridedit::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> gridedit::Result<()> {
    let sched = NoiseSchedule::cosine(50)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = Tensor::uniform(&[3, 8, 8], 0.5, &mut rng);
    let eps = Tensor::randn(&[3, 8, 8], &mut rng);
    for t in [1, 10, 25, 49] {
        let x_t = forward_noise(&x0, t, &eps, &sched)?;
        let back = reconstruct_x0(&x_t, &eps, t, &sched)?;
        let err = back.zip_map(&x0, |a, b| (a - b).abs()).data().iter().cloned().fold(0.0, f64::max);
        println!("t={t:2} alpha={:.5} max reconstruction error {err:.2e}", sched.alpha(t)?);
    }
    println!("t=50 reconstruction: {}", reconstruct_x0(&x0, &eps, 50, &sched).unwrap_err());
    Ok(())
}
