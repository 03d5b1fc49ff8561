//! Saves a model with optimizer state and loads it back bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rma::checkpoint::{read_tensors, Checkpoint};
use rma::model::{Model, ModelConfig};
use rma::optim::{AdamConfig, AdamState};

fn main() -> rma::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::<f32>::init(ModelConfig::default(), &mut rng)?;
    let adam = AdamState::new(AdamConfig::default(), &model.tensors());
    let ckpt = Checkpoint { model, adam: Some(adam) };

    let path = std::env::temp_dir().join("rma-example.rma");
    ckpt.save(&path)?;
    let back = Checkpoint::load(&path)?;
    assert_eq!(back, ckpt);
    let tensors = read_tensors(&path)?;
    println!("{} tensors, {} parameters", tensors.len(), back.model.parameter_count());
    for (name, t) in tensors.iter().take(6) {
        println!("  {name} {:?}", t.shape());
    }
    Ok(())
}
