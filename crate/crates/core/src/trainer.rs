//! Mini-batch Adam training of the whole model.
//!
//! Samples in a batch are processed in parallel, but their gradients are
//! summed in sample order, so a run is a pure function of its seed and
//! configuration.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Objective, SampleGradients};
use crate::objective::{Constraints, LossWeights};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// The learning rate is divided by `lr_decay_factor` once this many
    /// epochs have completed.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub constraints: Constraints,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 16,
            epochs: 40,
            adam: AdamConfig::default(),
            lr_decay_epoch: Some(30),
            lr_decay_factor: 10.0,
            seed: 1,
            loss: LossWeights::default(),
            constraints: Constraints::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        let a = &self.adam;
        if !(a.lr.is_finite() && a.lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be finite and nonnegative, got {}", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("adam needs betas in [0, 1) and a positive epsilon"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::config("lr decay factor must be positive"));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(e) if epoch > e => self.adam.lr / self.lr_decay_factor,
            _ => self.adam.lr,
        }
    }
}

/// Mean losses over one epoch's samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
}

pub const LOG_HEADER: &str = "epoch,total_loss,cls_loss,loc_loss";

/// Training log as CSV. Values use the shortest exact decimal form.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.total, e.cls, e.loc);
    }
    s
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub log: Vec<EpochLog>,
}

fn check_dataset(data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidSample("training set is empty".into()));
    }
    if data.classes != cfg.model.classes {
        return Err(Error::Incompatible(format!(
            "dataset has {} classes, model is configured for {}",
            data.classes, cfg.model.classes
        )));
    }
    for (i, s) in data.samples.iter().enumerate() {
        if s.labels.count() == 0 {
            return Err(Error::InvalidSample(format!("sample {i} ({}) has no labels", s.name)));
        }
        let shape = s.image.shape();
        if shape.len() != 3 || shape[0] != cfg.model.backbone.channels[0] {
            return Err(Error::InvalidSample(format!("sample {i} ({}) has image shape {shape:?}", s.name)));
        }
        cfg.model
            .backbone
            .output_shape(shape[1], shape[2])
            .map_err(|e| Error::InvalidSample(format!("sample {i} ({}): {e}", s.name)))?;
    }
    Ok(())
}

fn divergence_report(model: &Model<f32>, epoch: usize, batch: usize, names: &[&str], results: &[SampleGradients<f32>]) -> String {
    let mut s = format!("non-finite loss or gradient in epoch {epoch}, batch {batch}\n");
    for (name, r) in names.iter().zip(results) {
        let finite = r.grads.iter().all(Tensor::is_finite);
        let _ = writeln!(
            s,
            "  sample {name}: total {} cls {} loc {} gradients finite: {finite}",
            r.total, r.cls, r.loc
        );
    }
    s.push_str("parameter norms:\n");
    for (name, t) in model.names().iter().zip(model.tensors()) {
        let norm = t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let _ = writeln!(s, "  {name}: {norm}");
    }
    s
}

/// Trains a fresh model. `on_epoch` sees each epoch's log line as it
/// completes.
pub fn train(data: &Dataset, cfg: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(data, cfg)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::init(cfg.model.clone(), &mut init_rng)?;
    train_from(model, None, data, cfg, on_epoch)
}

/// Continues training `model`, optionally with existing optimizer state.
pub fn train_from(
    mut model: Model<f32>,
    adam: Option<AdamState<f32>>,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(data, cfg)?;
    if model.config != cfg.model {
        return Err(Error::Incompatible("model does not match the training configuration".into()));
    }
    let objective = Objective::new(&cfg.model, cfg.loss, cfg.constraints)?;
    let mut adam = adam.unwrap_or_else(|| AdamState::new(cfg.adam, &model.tensors()));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = cfg.lr_at(epoch);
        let (mut total, mut cls, mut loc) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    model.sample_gradients(&s.image, &s.labels, &objective)
                })
                .collect::<Result<Vec<_>>>()?;
            let finite = results
                .iter()
                .all(|r| r.total.is_finite() && r.grads.iter().all(Tensor::is_finite));
            if !finite {
                let names: Vec<&str> = batch.iter().map(|&i| data.samples[i].name.as_str()).collect();
                return Err(Error::Divergence(divergence_report(&model, epoch, b, &names, &results)));
            }
            let mut grads = results[0].grads.clone();
            for r in &results[1..] {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.add_assign(g);
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.scale_in_place(inv);
            }
            for r in &results {
                total += r.total;
                cls += r.cls;
                loc += r.loc;
            }
            adam_step(&mut model.tensors_mut(), &grads, &mut adam, lr)?;
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch,
            total: total / n,
            cls: cls / n,
            loc: loc / n,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, adam, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneArch;
    use crate::data::{self, DataConfig, Sample};

    fn tiny_data() -> Dataset {
        let cfg = DataConfig {
            n: 8,
            size: 16,
            classes: 3,
            ..DataConfig::default()
        };
        let samples = data::generate(&cfg, 0)
            .unwrap()
            .into_iter()
            .map(|s| Sample {
                name: s.name,
                image: s.image,
                labels: s.labels,
            })
            .collect();
        Dataset {
            root: "mem".into(),
            classes: 3,
            samples,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                backbone: BackboneArch {
                    channels: vec![3, 4, 4],
                    kernel: 3,
                    pool: 2,
                },
                region_h: 2,
                region_w: 2,
                embed: 8,
                hidden: 8,
                head: 8,
                classes: 3,
                steps: 2,
                ..ModelConfig::default()
            },
            batch_size: 3,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.adam.lr = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = Model::<f32>::init(cfg.model.clone(), &mut rng).unwrap();
        let out = train(&data, &cfg, &mut |_| {}).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn same_seed_same_log() {
        let data = tiny_data();
        let cfg = tiny_cfg();
        let a = train(&data, &cfg, &mut |_| {}).unwrap();
        let b = train(&data, &cfg, &mut |_| {}).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.model, b.model);
        assert!(log_csv(&a.log).starts_with("epoch,total_loss,cls_loss,loc_loss\n"));
    }

    #[test]
    fn constraints_off_gives_zero_loc() {
        let data = tiny_data();
        let mut cfg = tiny_cfg();
        cfg.constraints = Constraints::NONE;
        let out = train(&data, &cfg, &mut |_| {}).unwrap();
        assert!(out.log.iter().all(|e| e.loc == 0.0 && e.total == e.cls));
    }

    #[test]
    fn nan_input_reports_divergence() {
        let mut data = tiny_data();
        data.samples[0].image.data_mut()[0] = f32::NAN;
        let err = train(&data, &tiny_cfg(), &mut |_| {}).map(|_| ()).unwrap_err();
        match err {
            Error::Divergence(msg) => assert!(msg.contains("00000.ppm") && msg.contains("parameter norms")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(30), 1e-3);
        assert_eq!(cfg.lr_at(31), 1e-4);
        let none = TrainConfig {
            lr_decay_epoch: None,
            ..cfg
        };
        assert_eq!(none.lr_at(100), 1e-3);
    }

    #[test]
    fn rejects_empty_label_rows() {
        let mut data = tiny_data();
        data.samples[2].labels = crate::objective::LabelVector::new(vec![false; 3]);
        assert!(matches!(train(&data, &tiny_cfg(), &mut |_| {}), Err(Error::InvalidSample(_))));
    }
}
