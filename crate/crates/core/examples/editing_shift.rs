//! Editing shift of a grid and the cosine loss between two shifts.

use gridedit::editing_shift::{editing_shift, editing_shift_loss};
use gridedit::providers::MockEmbedder;
use gridedit::Image;

fn main() -> gridedit::Result<()> {
    let emb = MockEmbedder::new();
    let blue_bg = |fg: [f64; 3]| {
        let mut img = Image::solid(8, 8, &[0.15, 0.3, 0.9]);
        for y in 2..6 {
            for x in 2..6 {
                for c in 0..3 {
                    img.set(y, x, c, fg[c]);
                }
            }
        }
        img
    };
    let (red, green) = (blue_bg([0.9, 0.15, 0.15]), blue_bg([0.2, 0.75, 0.25]));
    let truth = editing_shift(&[red.clone(), green.clone(), red.clone(), green.clone()], &emb)?;
    let swapped = editing_shift(&[green.clone(), red.clone(), green.clone(), red.clone()], &emb)?;
    let none = editing_shift(&[red.clone(), green.clone(), red.clone(), red.clone()], &emb)?;
    println!("same edit: {:.4}", editing_shift_loss(&truth, &truth)?);
    println!("reversed edit: {:.4}", editing_shift_loss(&swapped, &truth)?);
    println!("query left unedited: {:.4}", editing_shift_loss(&none, &truth)?);
    Ok(())
}
