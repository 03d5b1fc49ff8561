//! Trains a small model on synthetic shapes and reports test metrics.
//!
//! `cargo run --release --example train_toy [epochs]`

use rma::data::{generate, Dataset, DataConfig, Sample, SyntheticSample};
use rma::eval::{evaluate, random_baseline_map, EvalOptions};
use rma::trainer::{train, TrainConfig};

fn dataset(samples: Vec<SyntheticSample>, classes: usize) -> Dataset {
    Dataset {
        root: "memory".into(),
        classes,
        samples: samples
            .into_iter()
            .map(|s| Sample {
                name: s.name,
                image: s.image,
                labels: s.labels,
            })
            .collect(),
    }
}

fn main() -> rma::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(8), |a| a.parse()).expect("epochs must be a number");
    let cfg = DataConfig {
        n: 300,
        ..DataConfig::default()
    };
    let train_set = dataset(generate(&cfg, 0)?, cfg.classes);
    let test_set = dataset(generate(&DataConfig { n: 100, ..cfg.clone() }, 1)?, cfg.classes);

    let tc = TrainConfig {
        epochs,
        lr_decay_epoch: Some(epochs * 3 / 4),
        ..TrainConfig::default()
    };
    let out = train(&train_set, &tc, &mut |e| {
        println!("epoch {:>2}  total {:.4}  cls {:.4}  loc {:.4}", e.epoch, e.total, e.cls, e.loc);
    })?;
    let (report, _) = evaluate(&out.model, &test_set, &EvalOptions::default())?;
    print!("{}", report.to_table());
    let labels: Vec<_> = test_set.samples.iter().map(|s| &s.labels).collect();
    println!("  random-predictor mAP {:.4}", random_baseline_map(&labels));
    Ok(())
}
