//! Compose four images into a 2x2 grid, mask the query, and split it back.

use gridedit::{compose, decompose, mask_query, Image};

fn main() -> gridedit::Result<()> {
    let quads = [
        Image::solid(8, 8, &[0.9, 0.1, 0.1]),
        Image::solid(8, 8, &[0.1, 0.9, 0.1]),
        Image::solid(8, 8, &[0.1, 0.1, 0.9]),
        Image::solid(8, 8, &[0.9, 0.9, 0.1]),
    ];
    let grid = compose(&quads[0], &quads[1], &quads[2], &quads[3])?;
    println!("grid is {:?}", grid.image().dims());
    let back = decompose(&grid)?;
    println!("roundtrip exact: {}", back == quads);
    let cond = mask_query(&grid, 0.5)?;
    println!("masked query mean: {}", cond.quadrant(3).mean());
    println!("masking twice changes nothing: {}", mask_query(&cond, 0.5)? == cond);
    Ok(())
}
