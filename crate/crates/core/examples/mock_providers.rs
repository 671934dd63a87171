//! Embed, segment and unify with the deterministic mock providers.

use gridedit::providers::{paraphrase_classes, Providers};
use gridedit::Image;

fn main() -> gridedit::Result<()> {
    let p = Providers::mock();
    let red = Image::solid(8, 8, &[0.9, 0.15, 0.15]);
    let e = p.embedder.embed_image(&red)?;
    println!("image embedding ({} dims): {:?}", e.len(), &e[..6]);
    println!("text embedding of `red`: {:?}", &p.embedder.embed_text("red")[..6]);
    let seg = p.segmenter.segment(&red)?;
    let label = seg.label_map[0];
    println!("segmenter says {}", seg.class_name(label).unwrap_or("?"));
    for class in paraphrase_classes() {
        for v in &class.variants {
            println!("{v:?} -> {:?}", p.unifier.unify(v)?);
        }
    }
    Ok(())
}
