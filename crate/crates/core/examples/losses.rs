//! Evaluates each training loss term on hand-picked transforms.

use rma::objective::{
    anchor_loss, cls_loss, ground_truth_prob, loc_loss, make_anchors, positive_loss, scale_loss, total_loss,
    Constraints, LabelVector, LossWeights,
};
use rma::{Tensor, TransformParams};

fn main() -> rma::Result<()> {
    let w = LossWeights::default();
    let labels = LabelVector::from_indices(&[0, 2], 3)?;
    println!("target distribution {:?}", ground_truth_prob(&labels)?);
    let fused = Tensor::<f64>::from_vec(vec![2.0, -1.0, 1.5]);
    let cls = cls_loss(&fused, &labels)?;

    let anchors = make_anchors(5)?;
    println!("anchors for K = 5: {:?}", anchors.points);
    let regions = [
        TransformParams::new(0.6, 0.5, 0.0, 0.0),
        TransformParams::new(0.4, 0.4, 0.5, 0.5),
        TransformParams::new(0.05, 0.4, -0.3, 0.4),
        TransformParams::new(0.4, -0.2, -0.5, -0.5),
        TransformParams::new(0.45, 0.45, 0.2, -0.6),
    ];
    println!("scale    {:.4}", scale_loss(&regions, w.alpha));
    println!("anchor   {:.4}", anchor_loss(&regions, &anchors)?);
    println!("positive {:.4}", positive_loss(&regions, w.beta));
    let loc = loc_loss(&regions, &anchors, &w, Constraints::ALL)?;
    println!("cls {cls:.4}  loc {loc:.4}  total {:.4}", total_loss(cls, loc, &w));
    Ok(())
}
