//! Command-line front end: `gen-data`, `train`, `eval`, `viz`, `grad-check`.
//!
//! Settings resolve as key-table defaults, then `--config`, then `--set`,
//! then dedicated flags. The full config is validated before anything is
//! written, and the effective settings are echoed to `<out>/effective.cfg`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::CellOutput;
use crate::backbone::BackboneArch;
use crate::checkpoint::Checkpoint;
use crate::checks::{self, SuiteOptions};
use crate::config::{Key, Settings};
use crate::data::{self, DataConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, ViewSet};
use crate::model::ModelConfig;
use crate::objective::{Constraints, LossWeights};
use crate::optim::AdamConfig;
use crate::trainer::{self, TrainConfig};
use crate::viz;

pub const EFFECTIVE_CONFIG: &str = "effective.cfg";
pub const CHECKPOINT_FILE: &str = "model.rma";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const DIVERGENCE_FILE: &str = "divergence.txt";

#[derive(Parser, Debug)]
#[command(name = "rma", version, about = "Recurrent attention for multi-label image classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shapes dataset with train and test splits.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Draw attended regions over input images as SVG.
    Viz(VizArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training images.
    #[arg(long)]
    pub n: Option<usize>,
    /// Test images; 0 writes a single split.
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConstraintArg {
    Anchor,
    Scale,
    Positive,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; its `train/` split is used when present.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Scored regions per image.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Drop a constraint term; repeatable.
    #[arg(long = "no-constraint", value_enum)]
    pub no_constraint: Vec<ConstraintArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ViewsArg {
    Single,
    Ten,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory; its `test/` split is used when present.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub views: Option<ViewsArg>,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory to draw the first `--count` test images from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// PPM images to draw instead of dataset images; repeatable.
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corrupt one item's gradient to exercise the failure path.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

pub const GEN_DATA_KEYS: &[Key] = &[
    key("seed", "1", "generator seed"),
    key("out", "data", "output directory"),
    key("n", "600", "training images"),
    key("test", "200", "test images, 0 for a single split"),
    key("classes", "4", "number of shape classes, 2 to 8"),
    key("size", "32", "image side in pixels"),
    key("noise", "0.1", "background noise amplitude"),
    key("max_shapes", "4", "upper bound on shapes per image"),
];

pub const TRAIN_KEYS: &[Key] = &[
    key("seed", "1", "initialization and shuffle seed"),
    key("out", "run", "output directory"),
    key("data", "data", "dataset directory"),
    key("epochs", "40", ""),
    key("batch_size", "16", ""),
    key("lr", "0.001", "Adam step size"),
    key("lr_decay_epoch", "30", "divide the step size after this epoch, or none"),
    key("lr_decay_factor", "10", ""),
    key("adam_beta1", "0.9", ""),
    key("adam_beta2", "0.999", ""),
    key("adam_eps", "1e-8", ""),
    key("k", "5", "scored regions per image"),
    key("channels", "3,16,32,32", "backbone channels, input first"),
    key("kernel", "3", "backbone kernel size"),
    key("pool", "2", "backbone pooling window"),
    key("region_h", "4", "sampled region height"),
    key("region_w", "4", "sampled region width"),
    key("embed", "64", "region embedding width"),
    key("hidden", "64", "LSTM state width"),
    key("head", "64", "shared head width"),
    key("cell", "linear", "LSTM readout, linear or tanh"),
    key("alpha", "0.5", "scale constraint threshold"),
    key("beta", "0.1", "positive constraint threshold"),
    key("lambda_anchor", "0.01", "anchor weight in the localization loss"),
    key("lambda_positive", "0.1", "positive weight in the localization loss"),
    key("gamma", "0.1", "localization weight in the total loss"),
    key("constraints", "anchor,scale,positive", "active constraint terms, or none"),
];

pub const EVAL_KEYS: &[Key] = &[
    key("seed", "1", "unused; evaluation is deterministic"),
    key("out", "eval", "output directory"),
    key("checkpoint", "run/model.rma", ""),
    key("data", "data", "dataset directory"),
    key("views", "single", "single or ten"),
    key("top_k", "3", "labels considered per image"),
    key("threshold", "0.5", "minimum probability for an assigned label"),
];

pub const VIZ_KEYS: &[Key] = &[
    key("seed", "1", "unused; visualization is deterministic"),
    key("out", "viz", "output directory"),
    key("checkpoint", "run/model.rma", ""),
    key("data", "data", "dataset directory"),
    key("images", "", "comma-separated PPM paths; overrides data"),
    key("count", "4", "dataset images to draw"),
    key("scale", "8", "SVG units per pixel"),
];

pub const GRAD_CHECK_KEYS: &[Key] = &[
    key("seed", "1", "sample point seed"),
    key("out", "", "directory for the report, or empty to only print"),
];

fn settings(keys: &'static [Key], common: &Common) -> Result<Settings> {
    let mut s = Settings::new(keys);
    if let Some(path) = &common.config {
        s.apply_file(path)?;
    }
    s.apply_pairs(&common.set)?;
    if let Some(seed) = common.seed {
        s.set("seed", seed.to_string())?;
    }
    if let Some(out) = &common.out {
        s.set("out", out.display().to_string())?;
    }
    Ok(s)
}

fn set_opt<T: ToString>(s: &mut Settings, name: &str, v: Option<T>) -> Result<()> {
    match v {
        Some(v) => s.set(name, v.to_string()),
        None => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn prepare_out(s: &Settings) -> Result<PathBuf> {
    let out = PathBuf::from(s.raw("out"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_file(&out.join(EFFECTIVE_CONFIG), s.render())?;
    Ok(out)
}

pub fn data_config(s: &Settings) -> Result<DataConfig> {
    let cfg = DataConfig {
        seed: s.get("seed")?,
        n: s.get("n")?,
        size: s.get("size")?,
        classes: s.get("classes")?,
        noise: s.get("noise")?,
        max_shapes: s.get("max_shapes")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_constraints(v: &str) -> Result<Constraints> {
    let mut c = Constraints::NONE;
    if v.trim() == "none" {
        return Ok(c);
    }
    for name in v.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        match name {
            "anchor" => c.anchor = true,
            "scale" => c.scale = true,
            "positive" => c.positive = true,
            "all" => c = Constraints::ALL,
            other => return Err(Error::config(format!("unknown constraint {other:?}"))),
        }
    }
    Ok(c)
}

/// Training configuration for a dataset with `classes` labels.
pub fn train_config(s: &Settings, classes: usize) -> Result<TrainConfig> {
    let cell = match s.raw("cell") {
        "linear" => CellOutput::Linear,
        "tanh" => CellOutput::Tanh,
        other => return Err(Error::config(format!("cell must be linear or tanh, got {other:?}"))),
    };
    let cfg = TrainConfig {
        model: ModelConfig {
            backbone: BackboneArch {
                channels: s.get_list("channels")?,
                kernel: s.get("kernel")?,
                pool: s.get("pool")?,
            },
            region_h: s.get("region_h")?,
            region_w: s.get("region_w")?,
            embed: s.get("embed")?,
            hidden: s.get("hidden")?,
            head: s.get("head")?,
            classes,
            steps: s.get("k")?,
            cell,
        },
        batch_size: s.get("batch_size")?,
        epochs: s.get("epochs")?,
        adam: AdamConfig {
            lr: s.get("lr")?,
            beta1: s.get("adam_beta1")?,
            beta2: s.get("adam_beta2")?,
            eps: s.get("adam_eps")?,
        },
        lr_decay_epoch: s.get_opt("lr_decay_epoch")?,
        lr_decay_factor: s.get("lr_decay_factor")?,
        seed: s.get("seed")?,
        loss: LossWeights {
            alpha: s.get("alpha")?,
            beta: s.get("beta")?,
            lambda_anchor: s.get("lambda_anchor")?,
            lambda_positive: s.get("lambda_positive")?,
            gamma: s.get("gamma")?,
        },
        constraints: parse_constraints(s.raw("constraints"))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut s = settings(GEN_DATA_KEYS, &a.common)?;
    set_opt(&mut s, "n", a.n)?;
    set_opt(&mut s, "test", a.test)?;
    set_opt(&mut s, "classes", a.classes)?;
    set_opt(&mut s, "size", a.size)?;
    let cfg = data_config(&s)?;
    let test: usize = s.get("test")?;
    let out = prepare_out(&s)?;
    let (train, test_split) = data::generate_splits(&out, &cfg, test)?;
    let labels: Vec<_> = train.iter().map(|x| &x.labels).collect();
    let marginals = data::label_marginals(&labels, cfg.classes);
    println!(
        "wrote {} training and {} test images ({}x{}, {} classes) to {}",
        train.len(),
        test_split.len(),
        cfg.size,
        cfg.size,
        cfg.classes,
        out.display()
    );
    let m: Vec<String> = marginals.iter().map(|p| format!("{p:.3}")).collect();
    println!("label marginals: {}", m.join(" "));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut s = settings(TRAIN_KEYS, &a.common)?;
    if let Some(d) = &a.data {
        s.set("data", d.display().to_string())?;
    }
    set_opt(&mut s, "k", a.k)?;
    set_opt(&mut s, "epochs", a.epochs)?;
    if !a.no_constraint.is_empty() {
        let mut c = parse_constraints(s.raw("constraints"))?;
        for n in &a.no_constraint {
            match n {
                ConstraintArg::Anchor => c.anchor = false,
                ConstraintArg::Scale => c.scale = false,
                ConstraintArg::Positive => c.positive = false,
                ConstraintArg::All => c = Constraints::NONE,
            }
        }
        let names: Vec<&str> = [(c.anchor, "anchor"), (c.scale, "scale"), (c.positive, "positive")]
            .iter()
            .filter(|x| x.0)
            .map(|x| x.1)
            .collect();
        s.set("constraints", if names.is_empty() { "none".into() } else { names.join(",") })?;
    }
    // Check the settings alone first so config mistakes surface before data errors.
    train_config(&s, 2)?;
    let root = data::train_dir(Path::new(s.raw("data")));
    let dataset = data::load(&root, None)?;
    let cfg = train_config(&s, dataset.classes)?;
    let out = prepare_out(&s)?;
    eprintln!(
        "training on {} images from {} ({} classes, K = {})",
        dataset.len(),
        root.display(),
        dataset.classes,
        cfg.model.steps
    );
    let mut log = Vec::new();
    let result = trainer::train(&dataset, &cfg, &mut |e| {
        eprintln!(
            "epoch {:>3}  total {:.5}  cls {:.5}  loc {:.5}",
            e.epoch, e.total, e.cls, e.loc
        );
        log.push(*e);
    });
    write_file(&out.join(TRAIN_LOG), trainer::log_csv(&log))?;
    let outcome = match result {
        Ok(o) => o,
        Err(Error::Divergence(report)) => {
            write_file(&out.join(DIVERGENCE_FILE), &report)?;
            return Err(Error::Divergence(format!(
                "diagnostics written to {}",
                out.join(DIVERGENCE_FILE).display()
            )));
        }
        Err(e) => return Err(e),
    };
    let ckpt = Checkpoint {
        model: outcome.model,
        adam: Some(outcome.adam),
    };
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    println!("checkpoint: {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn predictions_csv(preds: &[eval::ImagePrediction]) -> String {
    let classes = preds.first().map_or(0, |p| p.probs.len());
    let mut s = String::from("image");
    for c in 0..classes {
        let _ = write!(s, ",p_{c}");
    }
    s.push_str(",assigned,truth\n");
    for p in preds {
        s.push_str(&p.name);
        for v in &p.probs {
            let _ = write!(s, ",{v:.6}");
        }
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        let _ = writeln!(s, ",{},{}", join(&p.assigned), join(&p.truth.indices()));
    }
    s
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut s = settings(EVAL_KEYS, &a.common)?;
    if let Some(c) = &a.checkpoint {
        s.set("checkpoint", c.display().to_string())?;
    }
    if let Some(d) = &a.data {
        s.set("data", d.display().to_string())?;
    }
    if let Some(v) = a.views {
        s.set("views", if v == ViewsArg::Ten { "ten" } else { "single" })?;
    }
    let views = match s.raw("views") {
        "single" => ViewSet::single(),
        "ten" => ViewSet::ten(),
        other => return Err(Error::config(format!("views must be single or ten, got {other:?}"))),
    };
    let opts = EvalOptions {
        top_k: s.get("top_k")?,
        threshold: s.get("threshold")?,
        views,
    };
    if opts.top_k == 0 {
        return Err(Error::config("top_k must be at least 1"));
    }
    let ckpt = Checkpoint::load(Path::new(s.raw("checkpoint")))?;
    let root = data::test_dir(Path::new(s.raw("data")));
    let dataset = data::load(&root, None)?;
    let (report, preds) = eval::evaluate(&ckpt.model, &dataset, &opts)?;
    let out = prepare_out(&s)?;
    write_file(&out.join("report.csv"), report.to_csv())?;
    write_file(&out.join("report.txt"), report.to_table())?;
    write_file(&out.join("predictions.csv"), predictions_csv(&preds))?;
    let labels: Vec<_> = dataset.samples.iter().map(|x| &x.labels).collect();
    println!(
        "{} images from {}, {} view(s) per image",
        dataset.len(),
        root.display(),
        opts.views.views.len()
    );
    print!("{}", report.to_table());
    println!("  random-predictor mAP {:.4}", eval::random_baseline_map(&labels));
    Ok(())
}

fn viz_cmd(a: VizArgs) -> Result<()> {
    let mut s = settings(VIZ_KEYS, &a.common)?;
    if let Some(c) = &a.checkpoint {
        s.set("checkpoint", c.display().to_string())?;
    }
    if let Some(d) = &a.data {
        s.set("data", d.display().to_string())?;
    }
    if !a.images.is_empty() {
        let list: Vec<String> = a.images.iter().map(|p| p.display().to_string()).collect();
        s.set("images", list.join(","))?;
    }
    set_opt(&mut s, "count", a.count)?;
    let scale: usize = s.get("scale")?;
    if scale == 0 {
        return Err(Error::config("scale must be at least 1"));
    }
    let count: usize = s.get("count")?;
    let paths: Vec<String> = s.get_list("images")?;
    let ckpt = Checkpoint::load(Path::new(s.raw("checkpoint")))?;

    let mut images = Vec::new();
    if paths.is_empty() {
        let root = data::test_dir(Path::new(s.raw("data")));
        let dataset = data::load(&root, Some(ckpt.model.config.classes))?;
        for sample in dataset.samples.into_iter().take(count) {
            images.push((sample.name, sample.image));
        }
    } else {
        for p in &paths {
            let path = Path::new(p);
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let image = data::decode_ppm(&bytes).map_err(|m| Error::Load {
                path: path.to_path_buf(),
                line: 0,
                message: m,
            })?;
            let name = path.file_name().map_or(p.clone(), |n| n.to_string_lossy().into_owned());
            images.push((name, image));
        }
    }
    let out = prepare_out(&s)?;
    for (name, image) in &images {
        let pred = ckpt.model.predict(image)?;
        let transforms = pred.trace.region_transforms();
        let stem = name.strip_suffix(".ppm").unwrap_or(name);
        write_file(&out.join(format!("{stem}.svg")), viz::render_svg(image, transforms, scale)?)?;
        write_file(&out.join(format!("{stem}_regions.csv")), viz::transforms_csv(transforms))?;
    }
    println!("wrote {} overlays to {}", images.len(), out.display());
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let s = settings(GRAD_CHECK_KEYS, &a.common)?;
    let opts = SuiteOptions {
        seed: s.get("seed")?,
        inject_fault: a.inject_fault,
    };
    let items = checks::run_suite(opts)?;
    let report = checks::format_report(&items);
    print!("{report}");
    if !s.raw("out").is_empty() {
        let out = prepare_out(&s)?;
        write_file(&out.join("grad_check.txt"), &report)?;
    }
    let failed: Vec<&str> = items.iter().filter(|i| !i.passed()).map(|i| i.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Viz(a) => viz_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

/// 2 for configuration mistakes, 3 for numerical divergence, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
