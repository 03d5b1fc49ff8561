//! Label assignment, overall/per-class precision-recall-F1, average precision
//! and multi-view evaluation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attention;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::LabelVector;
use crate::ops;
use crate::tensor::Tensor;

/// Top-`k` classes by probability (lower index wins ties), then those with
/// probability at least `threshold`. Returned in rank order.
pub fn assign_labels(probs: &[f64], k: usize, threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.retain(|&c| probs[c] >= threshold);
    order
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OverallMetrics {
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn f1(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

/// Overall and per-class precision, recall and F1 over `(predicted, truth)`
/// pairs. Ratios with a zero denominator count as 0.
pub fn aggregate_metrics(pairs: &[(Vec<usize>, LabelVector)]) -> Result<OverallMetrics> {
    let Some(first) = pairs.first() else {
        return Err(Error::Protocol("cannot compute metrics over zero images".into()));
    };
    let classes = first.1.len();
    let mut correct = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut truth = vec![0usize; classes];
    for (pred, gt) in pairs {
        if gt.len() != classes {
            return Err(Error::dim(format!("label vectors have {} and {} classes", classes, gt.len())));
        }
        for c in gt.indices() {
            truth[c] += 1;
        }
        for &c in pred {
            if c >= classes {
                return Err(Error::dim(format!("predicted class {c} out of range for {classes} classes")));
            }
            predicted[c] += 1;
            if gt.contains(c) {
                correct[c] += 1;
            }
        }
    }
    let sum = |v: &[usize]| v.iter().sum::<usize>() as f64;
    let op = ratio(sum(&correct), sum(&predicted));
    let or = ratio(sum(&correct), sum(&truth));
    let cp = (0..classes).map(|c| ratio(correct[c] as f64, predicted[c] as f64)).sum::<f64>() / classes as f64;
    let cr = (0..classes).map(|c| ratio(correct[c] as f64, truth[c] as f64)).sum::<f64>() / classes as f64;
    Ok(OverallMetrics {
        op,
        or,
        of1: f1(op, or),
        cp,
        cr,
        cf1: f1(cp, cr),
    })
}

/// All-points average precision: mean over positives of the precision at
/// their rank, ranking by descending score with lower index first on ties.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 || scores.len() != positive.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Expected AP of a uniformly random ranking of `n` images with `p` positives.
pub fn random_ap(n: usize, p: usize) -> f64 {
    if p == 0 || n == 0 {
        return 0.0;
    }
    let h: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    if n == 1 {
        return 1.0;
    }
    let nf = n as f64;
    ((p as f64 - 1.0) / (nf - 1.0) * (nf - h) + h) / nf
}

/// mAP a random predictor would expect on these labels, over classes that
/// have at least one positive.
pub fn random_baseline_map(labels: &[&LabelVector]) -> f64 {
    let Some(first) = labels.first() else { return 0.0 };
    let n = labels.len();
    let aps: Vec<f64> = (0..first.len())
        .map(|c| labels.iter().filter(|y| y.contains(c)).count())
        .filter(|&p| p > 0)
        .map(|p| random_ap(n, p))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub overall: OverallMetrics,
    /// Per-class AP; `None` for classes without positives.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
}

impl MetricsReport {
    pub fn new(predictions: &[ImagePrediction]) -> Result<Self> {
        let pairs: Vec<(Vec<usize>, LabelVector)> =
            predictions.iter().map(|p| (p.assigned.clone(), p.truth.clone())).collect();
        let overall = aggregate_metrics(&pairs)?;
        let classes = predictions[0].truth.len();
        let ap: Vec<Option<f64>> = (0..classes)
            .map(|c| {
                let scores: Vec<f64> = predictions.iter().map(|p| p.probs[c]).collect();
                let pos: Vec<bool> = predictions.iter().map(|p| p.truth.contains(c)).collect();
                average_precision(&scores, &pos)
            })
            .collect();
        let defined: Vec<f64> = ap.iter().flatten().copied().collect();
        let map = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Ok(Self { overall, ap, map })
    }

    /// `metric,value` rows followed by `ap_<class>` rows; classes without
    /// positives are written as `nan`.
    pub fn to_csv(&self) -> String {
        let o = &self.overall;
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("OP", o.op),
            ("OR", o.or),
            ("OF1", o.of1),
            ("CP", o.cp),
            ("CR", o.cr),
            ("CF1", o.cf1),
            ("mAP", self.map),
        ] {
            let _ = writeln!(s, "{k},{v:.6}");
        }
        for (c, ap) in self.ap.iter().enumerate() {
            match ap {
                Some(v) => {
                    let _ = writeln!(s, "ap_{c},{v:.6}");
                }
                None => {
                    let _ = writeln!(s, "ap_{c},nan");
                }
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let o = &self.overall;
        let mut s = String::new();
        let _ = writeln!(s, "  OP {:.4}  OR {:.4}  OF1 {:.4}", o.op, o.or, o.of1);
        let _ = writeln!(s, "  CP {:.4}  CR {:.4}  CF1 {:.4}", o.cp, o.cr, o.cf1);
        let _ = writeln!(s, "  mAP {:.4}", self.map);
        for (c, ap) in self.ap.iter().enumerate() {
            match ap {
                Some(v) => {
                    let _ = writeln!(s, "  AP[{c}] {v:.4}");
                }
                None => {
                    let _ = writeln!(s, "  AP[{c}] n/a (no positives)");
                }
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropAnchor {
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl CropAnchor {
    pub const ALL: [CropAnchor; 5] = [
        CropAnchor::Center,
        CropAnchor::TopLeft,
        CropAnchor::TopRight,
        CropAnchor::BottomLeft,
        CropAnchor::BottomRight,
    ];

    /// Top-left corner of an `h×w` crop in an `full_h×full_w` map. The center
    /// crop rounds its offset down.
    pub fn origin(self, full_h: usize, full_w: usize, h: usize, w: usize) -> (usize, usize) {
        let (dy, dx) = (full_h - h, full_w - w);
        match self {
            CropAnchor::Center => (dy / 2, dx / 2),
            CropAnchor::TopLeft => (0, 0),
            CropAnchor::TopRight => (0, dx),
            CropAnchor::BottomLeft => (dy, 0),
            CropAnchor::BottomRight => (dy, dx),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub anchor: CropAnchor,
    pub flip: bool,
}

/// Center and four corners, each with and without a horizontal flip.
pub fn ten_views() -> Vec<View> {
    [false, true]
        .into_iter()
        .flat_map(|flip| CropAnchor::ALL.into_iter().map(move |anchor| View { anchor, flip }))
        .collect()
}

/// Size of the feature-map crop each view takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropSize {
    /// The whole map.
    Full,
    /// One cell smaller than the map in each direction.
    ShrinkByOne,
    Exact(usize, usize),
}

impl CropSize {
    fn resolve(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            CropSize::Full => (h, w),
            CropSize::ShrinkByOne => (h.saturating_sub(1).max(1), w.saturating_sub(1).max(1)),
            CropSize::Exact(ch, cw) => (ch, cw),
        }
    }
}

/// Views over the feature map and the crop size they share.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSet {
    pub views: Vec<View>,
    pub crop: CropSize,
}

impl ViewSet {
    /// The plain single view: whole map, no flip.
    pub fn single() -> Self {
        Self {
            views: vec![View {
                anchor: CropAnchor::Center,
                flip: false,
            }],
            crop: CropSize::Full,
        }
    }

    /// Ten views with crops one cell smaller than the map on each side.
    pub fn ten() -> Self {
        Self {
            views: ten_views(),
            crop: CropSize::ShrinkByOne,
        }
    }
}

/// Probabilities for one feature map averaged across views; each view fuses
/// its own episode scores by category-wise max.
pub fn multi_view_eval(model: &Model<f32>, feature: &Tensor<f32>, views: &ViewSet) -> Result<Vec<f64>> {
    if views.views.is_empty() {
        return Err(Error::config("at least one view is required"));
    }
    let (_, h, w) = feature.chw()?;
    let (ch, cw) = views.crop.resolve(h, w);
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::config(format!("crop {ch}×{cw} does not fit the {h}×{w} feature map")));
    }
    let mut mean = vec![0.0; model.config.classes];
    for view in &views.views {
        let mut f = if (ch, cw) == (h, w) {
            feature.clone()
        } else {
            let (y0, x0) = view.anchor.origin(h, w, ch, cw);
            feature.crop_hw(y0, x0, ch, cw)?
        };
        if view.flip {
            f = f.flip_horizontal()?;
        }
        let trace = attention::run_episode(&f, &model.attention, model.config.steps)?;
        let fused = attention::fuse_scores(&trace.scores)?;
        let p = ops::softmax(&fused.cast::<f64>());
        for (m, &v) in mean.iter_mut().zip(p.data()) {
            *m += v;
        }
    }
    let n = views.views.len() as f64;
    Ok(mean.into_iter().map(|v| v / n).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePrediction {
    pub name: String,
    pub probs: Vec<f64>,
    pub assigned: Vec<usize>,
    pub truth: LabelVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub top_k: usize,
    pub threshold: f64,
    pub views: ViewSet,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            top_k: 3,
            threshold: 0.5,
            views: ViewSet::single(),
        }
    }
}

/// Predicts every image of `data` and scores the predictions.
pub fn evaluate(model: &Model<f32>, data: &Dataset, opts: &EvalOptions) -> Result<(MetricsReport, Vec<ImagePrediction>)> {
    if data.classes != model.config.classes {
        return Err(Error::Incompatible(format!(
            "model predicts {} classes, dataset has {}",
            model.config.classes, data.classes
        )));
    }
    if opts.top_k == 0 {
        return Err(Error::config("top-k must be at least 1"));
    }
    let preds = data
        .samples
        .par_iter()
        .map(|s| {
            let feature = model.features(&s.image)?;
            let probs = multi_view_eval(model, &feature, &opts.views)?;
            Ok(ImagePrediction {
                name: s.name.clone(),
                assigned: assign_labels(&probs, opts.top_k, opts.threshold),
                probs,
                truth: s.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::new(&preds)?, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lv(idx: &[usize], c: usize) -> LabelVector {
        LabelVector::from_indices(idx, c).unwrap()
    }

    #[test]
    fn assignment_examples() {
        assert_eq!(assign_labels(&[0.7, 0.2, 0.1], 3, 0.5), vec![0]);
        assert_eq!(assign_labels(&[0.6, 0.6, 0.1], 1, 0.5), vec![0]);
        assert_eq!(assign_labels(&[0.1, 0.5, 0.3, 0.1], 3, 0.0), vec![1, 2, 0]);
    }

    #[test]
    fn worked_example() {
        let pairs = vec![(vec![0], lv(&[0], 2)), (vec![0], lv(&[1], 2))];
        let m = aggregate_metrics(&pairs).unwrap();
        assert_eq!((m.op, m.or, m.of1), (0.5, 0.5, 0.5));
        assert_eq!((m.cp, m.cr), (0.25, 0.5));
        assert!((m.cf1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(aggregate_metrics(&[]).is_err());
    }

    #[test]
    fn perfect_predictor() {
        let pairs = vec![(vec![0, 2], lv(&[0, 2], 3)), (vec![1], lv(&[1], 3))];
        let m = aggregate_metrics(&pairs).unwrap();
        assert_eq!([m.op, m.or, m.of1, m.cp, m.cr, m.cf1], [1.0; 6]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]), Some(0.5));
        // Ties go to the lower index.
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, false]), None);
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn random_ap_matches_enumeration() {
        for n in 1..=6 {
            for p in 1..=n {
                let positive: Vec<bool> = (0..n).map(|i| i < p).collect();
                let perms = permutations(n);
                let mean: f64 = perms
                    .iter()
                    .map(|perm| {
                        let scores: Vec<f64> = perm.iter().map(|&r| -(r as f64)).collect();
                        average_precision(&scores, &positive).unwrap()
                    })
                    .sum::<f64>()
                    / perms.len() as f64;
                assert!((mean - random_ap(n, p)).abs() < 1e-12, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn ap_invariant_under_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(2..15);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let pos: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.4)).collect();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + 1.0).collect();
            assert_eq!(average_precision(&s, &pos), average_precision(&t, &pos));
        }
    }

    #[test]
    fn view_origins() {
        assert_eq!(CropAnchor::Center.origin(4, 4, 3, 3), (0, 0));
        assert_eq!(CropAnchor::BottomRight.origin(4, 4, 3, 3), (1, 1));
        assert_eq!(CropAnchor::TopRight.origin(5, 6, 3, 3), (0, 3));
        assert_eq!(ten_views().len(), 10);
    }

    fn tiny_model() -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = ModelConfig {
            hidden: 6,
            embed: 6,
            head: 6,
            classes: 3,
            steps: 2,
            ..ModelConfig::default()
        };
        Model::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn single_view_is_plain_prediction() {
        let m = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Tensor::uniform(&[32, 4, 4], 0.0, 1.0, &mut rng);
        let plain = m.predict_features(&f).unwrap().probs;
        assert_eq!(multi_view_eval(&m, &f, &ViewSet::single()).unwrap(), plain);
    }

    #[test]
    fn ten_views_sum_to_one_and_bad_crop_rejected() {
        let m = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = Tensor::uniform(&[32, 4, 4], 0.0, 1.0, &mut rng);
        let p = multi_view_eval(&m, &f, &ViewSet::ten()).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let bad = ViewSet {
            views: ten_views(),
            crop: CropSize::Exact(5, 5),
        };
        assert!(matches!(multi_view_eval(&m, &f, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn symmetric_input_flip_equals_plain() {
        let m = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let half = Tensor::<f32>::uniform(&[32, 4, 2], 0.0, 1.0, &mut rng);
        // Mirror each row so the map is left-right symmetric.
        let mut data = Vec::new();
        for row in half.data().chunks(2) {
            data.extend_from_slice(&[row[0], row[1], row[1], row[0]]);
        }
        let f = Tensor::new(&[32, 4, 4], data).unwrap();
        let flipped = ViewSet {
            views: vec![View {
                anchor: CropAnchor::Center,
                flip: true,
            }],
            crop: CropSize::Full,
        };
        assert_eq!(
            multi_view_eval(&m, &f, &flipped).unwrap(),
            multi_view_eval(&m, &f, &ViewSet::single()).unwrap()
        );
    }
}
