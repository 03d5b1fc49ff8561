//! The full classifier: backbone, attention episode and score fusion, plus
//! the per-sample loss and gradient used by the trainer.

use rand::Rng;

use crate::attention::{self, AttentionConfig, AttentionWeights, CellOutput, EpisodeTrace};
use crate::backbone::{self, BackboneArch, BackboneWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::objective::{self, AnchorSet, Constraints, LabelVector, LossWeights};
use crate::ops;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneArch,
    pub region_h: usize,
    pub region_w: usize,
    pub embed: usize,
    pub hidden: usize,
    pub head: usize,
    pub classes: usize,
    /// Number of scored regions `K`.
    pub steps: usize,
    pub cell: CellOutput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneArch::default(),
            region_h: 4,
            region_w: 4,
            embed: 64,
            hidden: 64,
            head: 64,
            classes: 4,
            steps: 5,
            cell: CellOutput::Linear,
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            feature_channels: self.backbone.feature_channels(),
            region_h: self.region_h,
            region_w: self.region_w,
            embed: self.embed,
            hidden: self.hidden,
            head: self.head,
            classes: self.classes,
            cell: self.cell,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention().validate()?;
        if self.steps == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        AnchorSet::for_steps(self.steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub backbone: BackboneWeights<T>,
    pub attention: AttentionWeights<T>,
}

/// Output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T: Real = f32> {
    /// Category-wise max over the region scores.
    pub fused: Tensor<T>,
    /// `softmax(fused)`.
    pub probs: Vec<f64>,
    pub trace: EpisodeTrace<T>,
}

/// Loss terms and parameter gradients for one sample.
#[derive(Clone, Debug)]
pub struct SampleGradients<T: Real = f32> {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    /// In [`Model::tensors`] order.
    pub grads: Vec<Tensor<T>>,
}

/// Loss settings shared by every sample of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub constraints: Constraints,
    pub anchors: AnchorSet,
}

impl Objective {
    pub fn new(config: &ModelConfig, weights: LossWeights, constraints: Constraints) -> Result<Self> {
        weights.validate()?;
        Ok(Self {
            weights,
            constraints,
            anchors: config.anchors()?,
        })
    }
}

impl<T: Real> Model<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneWeights::init(config.backbone.clone(), rng)?;
        let attention = AttentionWeights::init(config.attention(), rng)?;
        Ok(Self {
            config,
            backbone,
            attention,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.backbone.arch != self.config.backbone || self.attention.config != self.config.attention() {
            return Err(Error::config("model parts disagree with the model configuration"));
        }
        self.backbone.validate()?;
        self.attention.validate()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = self.backbone.names();
        names.extend(self.attention.names());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut t = self.backbone.tensors();
        t.extend(self.attention.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut t = self.backbone.tensors_mut();
        t.extend(self.attention.tensors_mut());
        t
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            attention: self.attention.cast(),
        }
    }

    /// Whole-image feature map.
    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.backbone.encode(image)
    }

    /// Runs an episode on a precomputed feature map.
    pub fn predict_features(&self, feature: &Tensor<T>) -> Result<Prediction<T>> {
        let trace = attention::run_episode(feature, &self.attention, self.config.steps)?;
        let fused = attention::fuse_scores(&trace.scores)?;
        let probs = ops::softmax(&fused.cast::<f64>()).into_data();
        Ok(Prediction { fused, probs, trace })
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        self.predict_features(&self.features(image)?)
    }

    /// Forward and backward pass of the per-sample objective.
    pub fn sample_gradients(&self, image: &Tensor<T>, labels: &LabelVector, objective: &Objective) -> Result<SampleGradients<T>> {
        if labels.len() != self.config.classes {
            return Err(Error::InvalidSample(format!(
                "label vector has {} classes, model has {}",
                labels.len(),
                self.config.classes
            )));
        }
        let mut g = Graph::new();
        let bb = self.backbone.bind(&mut g, true);
        let at = self.attention.bind(&mut g, true);
        let x = g.constant(image.clone());
        let (cls, loc, total) = record_loss(&mut g, x, &bb, &at, &self.config, labels, objective)?;
        let scalar = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
        let (cls_v, loc_v, total_v) = (scalar(Some(cls)), scalar(loc), scalar(Some(total)));
        let mut grads = g.backward(total, None)?;
        let vars: Vec<Var> = bb.vars().into_iter().chain(at.vars()).collect();
        let grads = vars
            .iter()
            .zip(self.tensors())
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect();
        Ok(SampleGradients {
            total: total_v,
            cls: cls_v,
            loc: loc_v,
            grads,
        })
    }
}

/// Records image → features → episode → fused scores → losses on `g`.
/// Returns `(cls, loc, total)`; `loc` is `None` when every constraint is off.
pub fn record_loss<T: Real>(
    g: &mut Graph<T>,
    image: Var,
    bb: &backbone::BackboneVars,
    at: &attention::AttentionVars,
    config: &ModelConfig,
    labels: &LabelVector,
    objective: &Objective,
) -> Result<(Var, Option<Var>, Var)> {
    let feature = backbone::encode_graph(g, image, bb, &config.backbone)?;
    let episode = attention::episode_graph(g, feature, at, config.steps)?;
    let fused = attention::fuse_graph(g, &episode.scores)?;
    let cls = objective::cls_loss_graph(g, fused, labels)?;
    let loc = objective::loc_loss_graph(
        g,
        episode.region_transforms(),
        &objective.anchors,
        &objective.weights,
        objective.constraints,
    )?;
    let total = match loc {
        Some(l) => {
            let weighted = g.scale(l, objective.weights.gamma);
            g.add(cls, weighted)?
        }
        None => cls,
    };
    Ok((cls, loc, total))
}
