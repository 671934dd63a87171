//! Generate a small paired-edit dataset and print its manifest summary.

use gridedit::dataset::{build_default_dataset, DatasetConfig, Split};
use gridedit::providers::Providers;

fn main() -> gridedit::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("gridedit_dataset"));
    let cfg = DatasetConfig { groups: 12, ..DatasetConfig::default() };
    let m = build_default_dataset(&cfg, &out, &Providers::mock())?;
    for g in m.groups.iter().take(4) {
        println!("{} {:?} ({} pairs) -> {:?}", g.id, g.instruction, g.pairs.len(), g.unified);
    }
    println!(
        "{} groups kept, {} train / {} test records in {}",
        m.groups.len(),
        m.records(Split::Train).len(),
        m.records(Split::Test).len(),
        out.display()
    );
    Ok(())
}
