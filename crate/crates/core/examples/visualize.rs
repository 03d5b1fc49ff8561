//! Renders the regions of an untrained model and of a hand-made episode as SVG.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rma::data::{generate, DataConfig};
use rma::model::{Model, ModelConfig};
use rma::viz::{render_svg, transforms_csv};
use rma::TransformParams;

fn main() -> rma::Result<()> {
    let sample = generate(&DataConfig { n: 1, ..DataConfig::default() }, 0)?.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::<f32>::init(ModelConfig::default(), &mut rng)?;
    let pred = model.predict(&sample.image)?;
    // Untrained: every region is the whole image.
    print!("{}", transforms_csv(pred.trace.region_transforms()));

    let spread = [
        TransformParams::new(0.5, 0.5, 0.0, 0.0),
        TransformParams::new(0.4, 0.4, 0.5, 0.5),
        TransformParams::new(0.4, 0.4, -0.5, 0.5),
        TransformParams::new(0.4, 0.4, -0.5, -0.5),
        TransformParams::new(0.4, 0.4, 0.5, -0.5),
    ];
    let out = std::env::temp_dir().join("rma-example-regions.svg");
    std::fs::write(&out, render_svg(&sample.image, &spread, 8)?).expect("writable temp dir");
    println!("wrote {}", out.display());
    Ok(())
}
