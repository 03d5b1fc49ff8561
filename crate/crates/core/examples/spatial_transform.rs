//! Samples a zoomed, shifted window from a feature map and shows where it
//! lands in image pixels.

use rma::transform::{build_matrix, region_box, st};
use rma::{Tensor, TransformParams};

fn main() -> rma::Result<()> {
    // One channel, 6x6, value = column index.
    let data: Vec<f32> = (0..36).map(|i| (i % 6) as f32).collect();
    let feature = Tensor::new(&[1, 6, 6], data)?;

    let identity = st(&feature, TransformParams::IDENTITY, 6, 6)?;
    println!("identity reproduces the map: max diff {}", identity.max_abs_diff(&feature));

    let right_half = TransformParams::new(0.5, 1.0, 0.5, 0.0);
    println!("matrix {:?}", build_matrix(right_half));
    let region = st(&feature, right_half, 3, 4)?;
    for row in region.data().chunks(4) {
        println!("  {row:?}");
    }
    println!("on a 64x64 image the region covers {:?}", region_box(right_half, 64.0, 64.0));
    Ok(())
}
