//! Generates a small synthetic dataset, writes it to disk and loads it back.

use rma::data::{generate_splits, label_marginals, load, test_dir, train_dir, DataConfig};

fn main() -> rma::Result<()> {
    let out = std::env::temp_dir().join("rma-example-data");
    let cfg = DataConfig {
        n: 50,
        ..DataConfig::default()
    };
    let (train, test) = generate_splits(&out, &cfg, 10)?;
    let first = &train[0];
    println!("{}: labels {:?}", first.name, first.labels.indices());
    for (class, rect) in &first.boxes {
        println!("  class {class} at {rect:?}");
    }
    let labels: Vec<_> = train.iter().map(|s| &s.labels).collect();
    println!("label marginals {:.3?}", label_marginals(&labels, cfg.classes));

    let loaded = load(&train_dir(&out), None)?;
    let loaded_test = load(&test_dir(&out), None)?;
    println!(
        "loaded {} train / {} test images of size {:?} from {}",
        loaded.len(),
        loaded_test.len(),
        loaded.image_size(),
        out.display()
    );
    assert_eq!(loaded.samples[0].image, train[0].image);
    assert_eq!(loaded_test.len(), test.len());
    Ok(())
}
