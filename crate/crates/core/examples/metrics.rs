//! Label assignment, overall and per-class metrics, and AP on a tiny set.

use rma::eval::{aggregate_metrics, assign_labels, average_precision, random_baseline_map};
use rma::objective::LabelVector;

fn main() -> rma::Result<()> {
    let probs = [[0.55, 0.30, 0.15], [0.20, 0.45, 0.35], [0.10, 0.20, 0.70], [0.52, 0.08, 0.40]];
    let truth = [vec![0], vec![1, 2], vec![2], vec![0, 2]];
    let labels: Vec<LabelVector> = truth
        .iter()
        .map(|t| LabelVector::from_indices(t, 3))
        .collect::<rma::Result<_>>()?;

    let pairs: Vec<_> = probs
        .iter()
        .zip(&labels)
        .map(|(p, y)| (assign_labels(p, 3, 0.5), y.clone()))
        .collect();
    for (i, (pred, y)) in pairs.iter().enumerate() {
        println!("image {i}: predicted {pred:?}, truth {:?}", y.indices());
    }
    let m = aggregate_metrics(&pairs)?;
    println!("OP {:.3} OR {:.3} OF1 {:.3} | CP {:.3} CR {:.3} CF1 {:.3}", m.op, m.or, m.of1, m.cp, m.cr, m.cf1);

    for c in 0..3 {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|y| y.contains(c)).collect();
        println!("AP[{c}] = {:?}", average_precision(&scores, &pos));
    }
    let refs: Vec<&LabelVector> = labels.iter().collect();
    println!("random-predictor mAP {:.3}", random_baseline_map(&refs));
    Ok(())
}
