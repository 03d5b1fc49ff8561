//! Runs one K-region attention episode with random weights and prints the
//! transforms, per-region scores and fused scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rma::attention::{fuse_scores, run_episode, AttentionConfig, AttentionWeights, CellOutput};
use rma::Tensor;

fn main() -> rma::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = AttentionConfig {
        feature_channels: 8,
        region_h: 3,
        region_w: 3,
        embed: 16,
        hidden: 16,
        head: 16,
        classes: 4,
        cell: CellOutput::Linear,
    };
    let mut weights = AttentionWeights::<f32>::init(config, &mut rng)?;
    // Fresh weights keep every region at the whole map; perturb the loc head to see movement.
    let shape = weights.loc_head.weight.shape().to_vec();
    weights.loc_head.weight = Tensor::uniform(&shape, -0.2, 0.2, &mut rng);

    let feature = Tensor::<f32>::uniform(&[8, 5, 5], 0.0, 1.0, &mut rng);
    let trace = run_episode(&feature, &weights, 5)?;
    for (k, m) in trace.transforms.iter().enumerate() {
        let score = if k == 0 { "-".to_string() } else { format!("{:.3?}", trace.scores[k - 1].data()) };
        println!("M_{k} = ({:.3}, {:.3}, {:.3}, {:.3})  s_{k} = {score}", m.s_x, m.s_y, m.t_x, m.t_y);
    }
    println!("fused = {:.3?}", fuse_scores(&trace.scores)?.data());
    Ok(())
}
