//! Four-direction scans and the zero-initialised condition encoder.

use gridedit::diffusion::{Denoiser, DenoiserConfig};
use gridedit::ssm::{cross_merge, cross_scan, linear_scan};
use gridedit::Tensor;

fn main() -> gridedit::Result<()> {
    let map: Vec<f64> = (0..6).map(f64::from).collect();
    let seqs = cross_scan(&map, 2, 3)?;
    for s in &seqs {
        println!("{s:?}");
    }
    println!("merged: {:?}", cross_merge(&seqs, 2, 3)?);
    println!("scan of 1,1,1 with a=0.5: {:?}", linear_scan(&[1.0, 1.0, 1.0], &[0.5], &[1.0], &[1.0]));

    let model = Denoiser::new(DenoiserConfig::default(), 0)?;
    let cond = Tensor::full(&[3, 16, 16], 0.7);
    let x = Tensor::zeros(&[3, 16, 16]);
    let text = vec![0.0; model.config().text_dim];
    let with = model.predict_noise_latent(&x, 10, &text, Some(&cond))?;
    let without = model.predict_noise_latent(&x, 10, &text, None)?;
    println!("condition has no effect at construction: {}", with == without);
    Ok(())
}
