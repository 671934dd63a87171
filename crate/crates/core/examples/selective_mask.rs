//! Build a living-class mask for a grid and score a pseudo output with it.

use gridedit::providers::{default_selected_classes, MockSegmenter, MockUnifier};
use gridedit::selective::{build_mask, selective_area_loss};
use gridedit::{compose, Image};

fn main() -> gridedit::Result<()> {
    let person = Image::solid(4, 4, &[0.9, 0.15, 0.15]);
    let sky = Image::solid(4, 4, &[0.15, 0.3, 0.9]);
    let truth = compose(&person, &sky, &person, &sky)?;
    let mask = build_mask(&truth, &MockSegmenter::new(), &MockUnifier::new(), &default_selected_classes())?;
    println!("mask keeps {:?} over {} of 64 pixels", mask.source_classes, mask.count());
    let pseudo = compose(&sky, &sky, &sky, &sky)?;
    println!("loss / N: {:.5}", selective_area_loss(&pseudo, &truth, &mask, false)?);
    println!("loss / mask: {:.5}", selective_area_loss(&pseudo, &truth, &mask, true)?);
    Ok(())
}
