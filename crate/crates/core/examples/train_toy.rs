//! Train on a toy dataset and print the loss trajectory.

use std::sync::Arc;

use gridedit::dataset::{build_default_dataset, DatasetConfig};
use gridedit::providers::{Embedder, Providers};
use gridedit::trainer::{train, TrainConfig, TrainOutput};

fn main() -> gridedit::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let root = std::env::temp_dir().join("gridedit_train_toy");
    let p = Providers::mock();
    let m = build_default_dataset(&DatasetConfig { groups: 20, image_size: 16, ..DatasetConfig::default() }, &root.join("data"), &p)?;
    let cfg = TrainConfig { steps, learning_rate: 3e-3, checkpoint_every: 0, ..TrainConfig::default() };
    let emb: Arc<dyn Embedder> = p.embedder.clone();
    let (_, report) = train(&m, &cfg, &emb, p.unifier.as_ref(), None, Some(TrainOutput { dir: &root.join("run") }))?;
    for r in report.steps.iter().step_by((steps / 10).max(1)) {
        println!("step {:4} total {:.4} diffusion {:.4} shift {:.4} selective {:.5}", r.step, r.total, r.diffusion, r.shift, r.selective);
    }
    println!("checkpoints: {:?}", report.checkpoints);
    Ok(())
}
