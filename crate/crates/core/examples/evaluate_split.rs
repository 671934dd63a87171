//! Score a freshly initialised model on the held-out split.

use gridedit::dataset::{build_default_dataset, DatasetConfig, Split};
use gridedit::diffusion::{Denoiser, DenoiserConfig, SampleOptions};
use gridedit::evaluator::{evaluate_split, ModelEditor, SplitKind};
use gridedit::providers::Providers;

fn main() -> gridedit::Result<()> {
    let p = Providers::mock();
    let dir = std::env::temp_dir().join("gridedit_eval");
    let m = build_default_dataset(&DatasetConfig { groups: 10, image_size: 16, ..DatasetConfig::default() }, &dir, &p)?;
    let model = Denoiser::new(DenoiserConfig::default(), 0)?;
    let editor = ModelEditor {
        model: &model,
        embedder: p.embedder.as_ref(),
        unifier: p.unifier.as_ref(),
        options: SampleOptions { steps: 5, ..SampleOptions::default() },
    };
    let training = m.group_ids(Split::Train);
    let report = evaluate_split(&editor, &m, Split::Test, SplitKind::Ood, &training, p.embedder.as_ref(), 0)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    match evaluate_split(&editor, &m, Split::Train, SplitKind::Ood, &training, p.embedder.as_ref(), 0) {
        Err(e) => println!("training records as out-of-domain: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    Ok(())
}
