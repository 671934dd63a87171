//! Edit a query image from one example pair with an untrained model.

use gridedit::diffusion::{Denoiser, DenoiserConfig, SampleOptions};
use gridedit::evaluator::{GridEditor, ModelEditor};
use gridedit::providers::Providers;
use gridedit::{compose, mask_query, Image};

fn main() -> gridedit::Result<()> {
    let p = Providers::mock();
    let model = Denoiser::new(DenoiserConfig::default(), 0)?;
    let red = Image::solid(16, 16, &[0.9, 0.15, 0.15]);
    let green = Image::solid(16, 16, &[0.2, 0.75, 0.25]);
    let grid = compose(&red, &green, &red, &Image::filled(16, 16, 3, 0.0))?;
    let cond = mask_query(&grid, 0.5)?;
    let editor = ModelEditor {
        model: &model,
        embedder: p.embedder.as_ref(),
        unifier: p.unifier.as_ref(),
        options: SampleOptions { steps: 10, ..SampleOptions::default() },
    };
    let out = editor.edit(&cond, "Make the square green.", 1)?;
    let path = std::env::temp_dir().join("gridedit_edit.png");
    out.quadrant(3).save_png(&path)?;
    println!("known quadrants kept: {}", out.quadrant(0) == red);
    println!("wrote {}", path.display());
    Ok(())
}
