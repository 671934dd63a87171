//! Unify part of a training batch and every inference instruction.

use gridedit::instruction::{augment_batch, inference_unification_count, unify_for_inference, InstructionRecord};
use gridedit::providers::MockUnifier;

fn main() -> gridedit::Result<()> {
    let uni = MockUnifier::new();
    let batch: Vec<InstructionRecord> = ["Make the circle red", "Paint the square blue.", "Turn the dog into a cat", "please make the diamond bigger"]
        .into_iter()
        .map(InstructionRecord::new)
        .collect();
    for r in augment_batch(&batch, &uni, 0.5, 7)? {
        println!("{:32} trains on {:?}", format!("{:?}", r.raw), r.text());
    }
    println!("{:?}", unify_for_inference("Could you colour the background blue?", &uni)?);
    println!("inference unifications so far: {}", inference_unification_count());
    Ok(())
}
