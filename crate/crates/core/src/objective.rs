//! Training objective: squared-error classification loss on the softmax of
//! the fused scores, plus the anchor, scale and positive constraints on the
//! region transforms.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::transform::TransformParams;

/// Binary class-membership vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelVector(Vec<bool>);

impl LabelVector {
    pub fn new(present: Vec<bool>) -> Self {
        Self(present)
    }

    /// Builds a vector of `classes` entries with the given indices set.
    pub fn from_indices(indices: &[usize], classes: usize) -> Result<Self> {
        let mut v = vec![false; classes];
        for &i in indices {
            if i >= classes {
                return Err(Error::InvalidSample(format!("label {i} is out of range for {classes} classes")));
            }
            v[i] = true;
        }
        Ok(Self(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.get(class).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i]).collect()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Scale hinge threshold.
    pub alpha: f64,
    /// Positive-scale threshold.
    pub beta: f64,
    pub lambda_anchor: f64,
    pub lambda_positive: f64,
    /// Weight of the localization loss in the total.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.1,
            lambda_anchor: 0.01,
            lambda_positive: 0.1,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_anchor", self.lambda_anchor),
            ("lambda_positive", self.lambda_positive),
            ("gamma", self.gamma),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which localization constraints are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Constraints {
    pub anchor: bool,
    pub scale: bool,
    pub positive: bool,
}

impl Constraints {
    pub const ALL: Self = Self {
        anchor: true,
        scale: true,
        positive: true,
    };
    pub const NONE: Self = Self {
        anchor: false,
        scale: false,
        positive: false,
    };

    pub fn any(&self) -> bool {
        self.anchor || self.scale || self.positive
    }
}

impl Default for Constraints {
    fn default() -> Self {
        Self::ALL
    }
}

/// `ŷ = y / ‖y‖₁`.
pub fn ground_truth_prob(y: &LabelVector) -> Result<Vec<f64>> {
    let n = y.count();
    if n == 0 {
        return Err(Error::InvalidSample("label vector has no positive entry".into()));
    }
    Ok(y.as_slice().iter().map(|&b| if b { 1.0 / n as f64 } else { 0.0 }).collect())
}

/// Records `Σ_c (softmax(fused)_c − ŷ_c)²`.
pub fn cls_loss_graph<T: Real>(g: &mut Graph<T>, fused: Var, y: &LabelVector) -> Result<Var> {
    let c = g.value(fused).len();
    if c != y.len() {
        return Err(Error::dim(format!("fused scores have {c} classes, labels have {}", y.len())));
    }
    let target = Tensor::from_f64(&[c], &ground_truth_prob(y)?)?;
    let target = g.constant(target);
    let p = g.softmax(fused);
    let diff = g.sub(p, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum(sq))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub points: Vec<(f64, f64)>,
}

impl AnchorSet {
    /// No constrained regions, as for `K = 1`.
    pub fn empty() -> Self {
        Self { points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Anchors for an episode with `steps` scored regions; empty when `steps == 1`.
    pub fn for_steps(steps: usize) -> Result<Self> {
        if steps == 1 {
            Ok(Self::empty())
        } else {
            make_anchors(steps)
        }
    }
}

pub const ANCHOR_RADIUS: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// `K − 1` points evenly spaced on the circle of radius `√2/2`, starting at
/// 45° and proceeding counter-clockwise.
pub fn make_anchors(steps: usize) -> Result<AnchorSet> {
    if steps < 2 {
        return Err(Error::config(format!("anchors need K ≥ 2, got {steps}")));
    }
    let n = steps - 1;
    let snap = |v: f64| {
        for exact in [0.0, 0.5, -0.5, ANCHOR_RADIUS, -ANCHOR_RADIUS] {
            if (v - exact).abs() < 1e-12 {
                return exact;
            }
        }
        v
    };
    let points = (0..n)
        .map(|i| {
            let theta = std::f64::consts::FRAC_PI_4 + std::f64::consts::TAU * i as f64 / n as f64;
            (snap(ANCHOR_RADIUS * theta.cos()), snap(ANCHOR_RADIUS * theta.sin()))
        })
        .collect();
    Ok(AnchorSet { points })
}

/// Records `Σ_{k=2..K} ½‖(t_x, t_y)_k − anchor_{k−1}‖²` over the scored
/// region transforms `M_1 … M_K`; region 1 is exempt.
pub fn anchor_loss_graph<T: Real>(g: &mut Graph<T>, transforms: &[Var], anchors: &AnchorSet) -> Result<Option<Var>> {
    if transforms.is_empty() || anchors.len() != transforms.len() - 1 {
        return Err(Error::config(format!(
            "{} regions need {} anchors, got {}",
            transforms.len(),
            transforms.len().saturating_sub(1),
            anchors.len()
        )));
    }
    let mut total = None;
    for (&m, &(cx, cy)) in transforms[1..].iter().zip(&anchors.points) {
        let t = g.slice(m, 2, 2)?;
        let anchor = g.constant(Tensor::from_f64(&[2], &[cx, cy])?);
        let d = g.sub(t, anchor)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        let term = g.scale(s, 0.5);
        total = Some(accumulate(g, total, term)?);
    }
    Ok(total)
}

/// Records `Σ_k (max(|s_x| − α, 0))² + (max(|s_y| − α, 0))²`.
pub fn scale_loss_graph<T: Real>(g: &mut Graph<T>, transforms: &[Var], alpha: f64) -> Result<Option<Var>> {
    let mut total = None;
    for &m in transforms {
        let s = g.slice(m, 0, 2)?;
        let a = g.abs(s);
        let shifted = g.add_scalar(a, -alpha);
        let hinge = g.relu(shifted);
        let sq = g.mul(hinge, hinge)?;
        let term = g.sum(sq);
        total = Some(accumulate(g, total, term)?);
    }
    Ok(total)
}

/// Records `Σ_k max(0, β − s_x) + max(0, β − s_y)`.
pub fn positive_loss_graph<T: Real>(g: &mut Graph<T>, transforms: &[Var], beta: f64) -> Result<Option<Var>> {
    let mut total = None;
    for &m in transforms {
        let s = g.slice(m, 0, 2)?;
        let neg = g.scale(s, -1.0);
        let shifted = g.add_scalar(neg, beta);
        let hinge = g.relu(shifted);
        let term = g.sum(hinge);
        total = Some(accumulate(g, total, term)?);
    }
    Ok(total)
}

fn accumulate<T: Real>(g: &mut Graph<T>, total: Option<Var>, term: Var) -> Result<Var> {
    match total {
        Some(t) => g.add(t, term),
        None => Ok(term),
    }
}

/// Records `ℓ_S + λ₁ ℓ_A + λ₂ ℓ_P` with disabled terms left out. Returns
/// `None` when no term is active, which the caller treats as zero.
pub fn loc_loss_graph<T: Real>(
    g: &mut Graph<T>,
    transforms: &[Var],
    anchors: &AnchorSet,
    weights: &LossWeights,
    constraints: Constraints,
) -> Result<Option<Var>> {
    let mut total = None;
    if constraints.scale {
        if let Some(s) = scale_loss_graph(g, transforms, weights.alpha)? {
            total = Some(accumulate(g, total, s)?);
        }
    }
    if constraints.anchor {
        if let Some(a) = anchor_loss_graph(g, transforms, anchors)? {
            let a = g.scale(a, weights.lambda_anchor);
            total = Some(accumulate(g, total, a)?);
        }
    }
    if constraints.positive {
        if let Some(p) = positive_loss_graph(g, transforms, weights.beta)? {
            let p = g.scale(p, weights.lambda_positive);
            total = Some(accumulate(g, total, p)?);
        }
    }
    Ok(total)
}

/// `cls + γ · loc`.
pub fn total_loss(cls: f64, loc: f64, weights: &LossWeights) -> f64 {
    cls + weights.gamma * loc
}

fn params_graph(g: &mut Graph<f64>, transforms: &[TransformParams]) -> Vec<Var> {
    transforms.iter().map(|p| g.constant(p.to_tensor())).collect()
}

fn scalar_or_zero(g: &Graph<f64>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).data()[0])
}

pub fn cls_loss<T: Real>(fused: &Tensor<T>, y: &LabelVector) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let f = g.constant(fused.cast());
    let l = cls_loss_graph(&mut g, f, y)?;
    Ok(g.value(l).data()[0])
}

pub fn anchor_loss(transforms: &[TransformParams], anchors: &AnchorSet) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params_graph(&mut g, transforms);
    let l = anchor_loss_graph(&mut g, &vars, anchors)?;
    Ok(scalar_or_zero(&g, l))
}

pub fn scale_loss(transforms: &[TransformParams], alpha: f64) -> f64 {
    let mut g = Graph::new();
    let vars = params_graph(&mut g, transforms);
    let l = scale_loss_graph(&mut g, &vars, alpha).expect("transform tensors have four entries");
    scalar_or_zero(&g, l)
}

pub fn positive_loss(transforms: &[TransformParams], beta: f64) -> f64 {
    let mut g = Graph::new();
    let vars = params_graph(&mut g, transforms);
    let l = positive_loss_graph(&mut g, &vars, beta).expect("transform tensors have four entries");
    scalar_or_zero(&g, l)
}

pub fn loc_loss(
    transforms: &[TransformParams],
    anchors: &AnchorSet,
    weights: &LossWeights,
    constraints: Constraints,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params_graph(&mut g, transforms);
    let l = loc_loss_graph(&mut g, &vars, anchors, weights, constraints)?;
    Ok(scalar_or_zero(&g, l))
}

/// Mean distance from the centers of regions `2..=K` to their anchors.
pub fn mean_anchor_distance(transforms: &[TransformParams], anchors: &AnchorSet) -> Result<f64> {
    if transforms.len() < 2 || anchors.len() != transforms.len() - 1 {
        return Err(Error::config(format!(
            "{} regions need {} anchors, got {}",
            transforms.len(),
            transforms.len().saturating_sub(1),
            anchors.len()
        )));
    }
    let sum: f64 = transforms[1..]
        .iter()
        .zip(&anchors.points)
        .map(|(p, &(cx, cy))| ((p.t_x - cx).powi(2) + (p.t_y - cy).powi(2)).sqrt())
        .sum();
    Ok(sum / anchors.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(s_x: f64, s_y: f64, t_x: f64, t_y: f64) -> TransformParams {
        TransformParams::new(s_x, s_y, t_x, t_y)
    }

    #[test]
    fn ground_truth_normalization() {
        let y = LabelVector::new(vec![true, false, true]);
        assert_eq!(ground_truth_prob(&y).unwrap(), vec![0.5, 0.0, 0.5]);
        let y = LabelVector::new(vec![true; 4]);
        assert_eq!(ground_truth_prob(&y).unwrap(), vec![0.25; 4]);
        let err = ground_truth_prob(&LabelVector::new(vec![false; 3])).unwrap_err();
        assert!(matches!(err, Error::InvalidSample(_)));
    }

    #[test]
    fn cls_loss_closed_forms() {
        let y = LabelVector::new(vec![true, false]);
        let l = cls_loss(&Tensor::<f64>::zeros(&[2]), &y).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        let all = LabelVector::new(vec![true; 3]);
        assert!(cls_loss(&Tensor::<f64>::full(&[3], 1.7), &all).unwrap().abs() < 1e-15);
    }

    #[test]
    fn anchors_k5_k9() {
        let a = make_anchors(5).unwrap();
        assert_eq!(a.points, vec![(0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)]);
        let a = make_anchors(9).unwrap();
        let r = ANCHOR_RADIUS;
        assert_eq!(
            a.points,
            vec![(0.5, 0.5), (0.0, r), (-0.5, 0.5), (-r, 0.0), (-0.5, -0.5), (0.0, -r), (0.5, -0.5), (r, 0.0)]
        );
        for k in 2..12 {
            for (x, y) in make_anchors(k).unwrap().points {
                assert!(((x * x + y * y).sqrt() - r).abs() < 1e-12);
            }
        }
        assert!(matches!(make_anchors(1), Err(Error::Config(_))));
    }

    #[test]
    fn anchor_loss_closed_forms() {
        let anchors = make_anchors(2).unwrap();
        let l = anchor_loss(&[at(1.0, 1.0, 0.9, -0.3), at(1.0, 1.0, 0.0, 0.0)], &anchors).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
        let l2 = anchor_loss(&[at(1.0, 1.0, -0.2, 0.6), at(1.0, 1.0, 0.0, 0.0)], &anchors).unwrap();
        assert_eq!(l, l2);
        let anchors = make_anchors(5).unwrap();
        let mut ts = vec![at(1.0, 1.0, 0.0, 0.0)];
        ts.extend(anchors.points.iter().map(|&(x, y)| at(0.5, 0.5, x, y)));
        assert_eq!(anchor_loss(&ts, &anchors).unwrap(), 0.0);
        assert!(matches!(anchor_loss(&ts[..3], &anchors), Err(Error::Config(_))));
    }

    #[test]
    fn hinge_closed_forms() {
        assert_eq!(scale_loss(&[at(0.5, 0.5, 0.0, 0.0)], 0.5), 0.0);
        assert!((scale_loss(&[at(0.6, 0.4, 0.0, 0.0)], 0.5) - 0.01).abs() < 1e-12);
        assert!((scale_loss(&[at(-0.7, 0.0, 0.0, 0.0)], 0.5) - 0.04).abs() < 1e-12);
        assert_eq!(positive_loss(&[at(0.5, 0.5, 0.0, 0.0)], 0.1), 0.0);
        assert!((positive_loss(&[at(0.05, 0.2, 0.0, 0.0)], 0.1) - 0.05).abs() < 1e-12);
        assert!((positive_loss(&[at(-0.3, 0.5, 0.0, 0.0)], 0.1) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn loc_and_total_weighting() {
        let w = LossWeights::default();
        let anchors = make_anchors(2).unwrap();
        let ts = [at(0.6, 0.05, 0.0, 0.0), at(0.5, 0.5, 0.0, 0.0)];
        let l_s = 0.01;
        let l_a = 0.25;
        let l_p = 0.05;
        let want = l_s + 0.01 * l_a + 0.1 * l_p;
        let got = loc_loss(&ts, &anchors, &w, Constraints::ALL).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert_eq!(loc_loss(&ts, &anchors, &w, Constraints::NONE).unwrap(), 0.0);
        assert_eq!(total_loss(1.0, 0.0, &w), 1.0);
        assert!((total_loss(0.0, 2.0, &w) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn identity_regions_at_anchors() {
        let w = LossWeights::default();
        let anchors = make_anchors(5).unwrap();
        let mut ts = vec![TransformParams::IDENTITY];
        ts.extend(anchors.points.iter().map(|&(x, y)| at(1.0, 1.0, x, y)));
        // Every region pays (1 − 0.5)² per axis.
        let want = 5.0 * 2.0 * 0.25;
        assert!((loc_loss(&ts, &anchors, &w, Constraints::ALL).unwrap() - want).abs() < 1e-12);
        assert_eq!(mean_anchor_distance(&ts, &anchors).unwrap(), 0.0);
    }
}
