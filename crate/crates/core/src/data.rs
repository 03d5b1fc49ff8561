//! Seeded synthetic multi-label shapes dataset and its on-disk format.
//!
//! Layout of a dataset root:
//!
//! ```text
//! <root>/images/00000.ppm   binary PPM (P6, 8-bit)
//! <root>/manifest.csv       `filename,label;label` with 0-based labels
//! <root>/boxes.csv          `filename,class,x0,y0,x1,y1`, diagnostics only
//! <root>/dataset.cfg        `key = value` generation settings
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneArch;
use crate::error::{Error, Result};
use crate::objective::LabelVector;
use crate::tensor::Tensor;
use crate::transform::PixelRect;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Bar,
    XMark,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Cross,
        Shape::Diamond,
        Shape::Ring,
        Shape::Bar,
        Shape::XMark,
    ];

    pub const MAX_CLASSES: usize = Self::ALL.len();

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
            Shape::XMark => "x-mark",
        }
    }

    /// Whether `(u, v)`, in units of the shape radius around its center,
    /// is covered. `v` grows downwards.
    pub fn covers(self, u: f64, v: f64) -> bool {
        let (au, av) = (u.abs(), v.abs());
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => au <= 0.8 && av <= 0.8,
            Shape::Triangle => (-0.9..=0.8).contains(&v) && au <= 0.9 * (v + 0.9) / 1.7,
            Shape::Cross => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
            Shape::Diamond => au + av <= 1.0,
            Shape::Ring => (0.3025..=1.0).contains(&(u * u + v * v)),
            Shape::Bar => au <= 1.0 && av <= 0.35,
            Shape::XMark => au <= 1.0 && av <= 1.0 && ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    /// Background noise amplitude.
    pub noise: f64,
    pub max_shapes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n: 600,
            size: 32,
            classes: 4,
            noise: 0.1,
            max_shapes: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=Shape::MAX_CLASSES).contains(&self.classes) {
            return Err(Error::config(format!(
                "classes must be between 2 and {}, got {}",
                Shape::MAX_CLASSES,
                self.classes
            )));
        }
        if self.n == 0 {
            return Err(Error::config("n must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise must be in [0, 1], got {}", self.noise)));
        }
        if self.max_shapes == 0 {
            return Err(Error::config("max_shapes must be positive"));
        }
        BackboneArch::default().output_shape(self.size, self.size)?;
        Ok(())
    }

    fn to_cfg(&self) -> String {
        format!(
            "seed = {}\nn = {}\nsize = {}\nclasses = {}\nnoise = {}\nmax_shapes = {}\n",
            self.seed, self.n, self.size, self.classes, self.noise, self.max_shapes
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub name: String,
    /// `3×H×W`, values in `[0, 1]` on the 8-bit grid.
    pub image: Tensor<f32>,
    pub labels: LabelVector,
    /// Diagnostics only.
    pub boxes: Vec<(usize, PixelRect)>,
}

/// Smallest fraction of a shape's pixels that must stay visible after later
/// shapes are painted over it.
const MIN_VISIBLE: f64 = 0.3;

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

fn draw_sample<R: Rng>(cfg: &DataConfig, rng: &mut R) -> (Tensor<f32>, LabelVector, Vec<(usize, PixelRect)>) {
    let s = cfg.size;
    let plane = s * s;
    loop {
        let mut px: Vec<f64> = (0..3 * plane).map(|_| rng.gen_range(0.0..=cfg.noise)).collect();
        let count = rng.gen_range(1..=cfg.max_shapes.min(cfg.classes));
        let mut classes: Vec<usize> = (0..cfg.classes).collect();
        classes.shuffle(rng);
        classes.truncate(count);
        // Owner of every pixel and each shape's painted area.
        let mut owner = vec![usize::MAX; plane];
        let mut area = vec![0usize; count];
        let mut boxes = Vec::with_capacity(count);
        for (i, &class) in classes.iter().enumerate() {
            let r = rng.gen_range(0.15..=0.25) * s as f64;
            let cx = rng.gen_range(r..=s as f64 - r);
            let cy = rng.gen_range(r..=s as f64 - r);
            let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.4..=1.0));
            let shape = Shape::ALL[class];
            for y in 0..s {
                for x in 0..s {
                    let (u, v) = ((x as f64 + 0.5 - cx) / r, (y as f64 + 0.5 - cy) / r);
                    if shape.covers(u, v) {
                        let p = y * s + x;
                        for (c, &col) in color.iter().enumerate() {
                            px[c * plane + p] = col;
                        }
                        owner[p] = i;
                        area[i] += 1;
                    }
                }
            }
            boxes.push((
                class,
                PixelRect {
                    x0: (cx - r).max(0.0),
                    y0: (cy - r).max(0.0),
                    x1: (cx + r).min(s as f64),
                    y1: (cy + r).min(s as f64),
                },
            ));
        }
        let mut visible = vec![0usize; count];
        owner.iter().filter(|&&o| o != usize::MAX).for_each(|&o| visible[o] += 1);
        let occluded = (0..count).any(|i| area[i] == 0 || (visible[i] as f64) < MIN_VISIBLE * area[i] as f64);
        if occluded {
            continue;
        }
        let image = Tensor::new(&[3, s, s], px.into_iter().map(quantize).collect()).expect("3×s×s pixels");
        let labels = LabelVector::from_indices(&classes, cfg.classes).expect("classes drawn below C");
        return (image, labels, boxes);
    }
}

/// Generates `cfg.n` samples on RNG stream `stream` of `cfg.seed`.
pub fn generate(cfg: &DataConfig, stream: u64) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    Ok((0..cfg.n)
        .map(|i| {
            let (image, labels, boxes) = draw_sample(cfg, &mut rng);
            SyntheticSample {
                name: format!("{i:05}.ppm"),
                image,
                labels,
                boxes,
            }
        })
        .collect())
}

/// Fraction of samples carrying each class.
pub fn label_marginals(labels: &[&LabelVector], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for y in labels {
        for c in y.indices() {
            counts[c] += 1;
        }
    }
    let n = labels.len().max(1) as f64;
    counts.into_iter().map(|k| k as f64 / n).collect()
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::dim(format!("PPM needs 3 channels, got {:?}", image.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Parses a binary 8-bit PPM into a `3×H×W` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6) file".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad PPM {what} {t:?}"))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(format!("only 8-bit PPM is supported, maxval is {max}"));
    }
    if w == 0 || h == 0 {
        return Err(format!("PPM has empty size {w}×{h}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let plane = w * h;
    if body.len() != 3 * plane {
        return Err(format!("PPM raster has {} bytes, expected {}", body.len(), 3 * plane));
    }
    let mut data = vec![0f32; 3 * plane];
    for (p, rgb) in body.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = rgb[ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| e.to_string())
}

/// Writes samples under `root`, replacing any previous manifest.
pub fn write_dataset(root: &Path, cfg: &DataConfig, samples: &[SyntheticSample]) -> Result<()> {
    let images = root.join("images");
    io(&images, fs::create_dir_all(&images))?;
    let mut manifest = String::new();
    let mut boxes = String::from("filename,class,x0,y0,x1,y1\n");
    for s in samples {
        let path = images.join(&s.name);
        io(&path, fs::write(&path, encode_ppm(&s.image)?))?;
        let labels: Vec<String> = s.labels.indices().iter().map(usize::to_string).collect();
        let _ = writeln!(manifest, "{},{}", s.name, labels.join(";"));
        for (class, b) in &s.boxes {
            let _ = writeln!(boxes, "{},{class},{},{},{},{}", s.name, b.x0, b.y0, b.x1, b.y1);
        }
    }
    for (name, text) in [("manifest.csv", manifest), ("boxes.csv", boxes), ("dataset.cfg", cfg.to_cfg())] {
        let path = root.join(name);
        io(&path, fs::write(&path, text))?;
    }
    Ok(())
}

/// A loaded sample; diagnostic boxes are not part of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor<f32>,
    pub labels: LabelVector,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(H, W)` shared by every image.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.shape()[1], s.image.shape()[2]))
    }

    pub fn marginals(&self) -> Vec<f64> {
        let labels: Vec<&LabelVector> = self.samples.iter().map(|s| &s.labels).collect();
        label_marginals(&labels, self.classes)
    }
}

/// Reads `classes` from `<root>/dataset.cfg`, if present.
pub fn recorded_classes(root: &Path) -> Result<Option<usize>> {
    let path = root.join("dataset.cfg");
    if !path.exists() {
        return Ok(None);
    }
    let text = io(&path, fs::read_to_string(&path))?;
    for (i, line) in text.lines().enumerate() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "classes" {
                return v.trim().parse().map(Some).map_err(|_| Error::Load {
                    path: path.clone(),
                    line: i + 1,
                    message: format!("bad class count {:?}", v.trim()),
                });
            }
        }
    }
    Ok(None)
}

/// Loads `<root>/manifest.csv` and its images. `classes` defaults to the
/// count recorded in `dataset.cfg`; labels must be below it.
pub fn load(root: &Path, classes: Option<usize>) -> Result<Dataset> {
    let recorded = recorded_classes(root)?;
    let classes = match (classes, recorded) {
        (Some(c), Some(r)) if c != r => {
            return Err(Error::Incompatible(format!(
                "dataset at {} has {r} classes, expected {c}",
                root.display()
            )))
        }
        (Some(c), _) | (None, Some(c)) => c,
        (None, None) => {
            return Err(Error::config(format!(
                "{} has no dataset.cfg; pass the class count explicitly",
                root.display()
            )))
        }
    };
    let manifest = root.join("manifest.csv");
    let text = io(&manifest, fs::read_to_string(&manifest))?;
    let bad = |line: usize, message: String| Error::Load {
        path: manifest.clone(),
        line,
        message,
    };
    let mut samples = Vec::new();
    let mut size = None;
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (file, labels) = line
            .split_once(',')
            .ok_or_else(|| bad(no, "expected `filename,label;label`".into()))?;
        let file = file.trim();
        if file.is_empty() || file.contains(['/', '\\']) {
            return Err(bad(no, format!("bad image file name {file:?}")));
        }
        if labels.trim().is_empty() {
            return Err(bad(no, "empty label field".into()));
        }
        let mut idx = Vec::new();
        for tok in labels.split(';') {
            let c: usize = tok
                .trim()
                .parse()
                .map_err(|_| bad(no, format!("bad label {:?}", tok.trim())))?;
            if c >= classes {
                return Err(bad(no, format!("label {c} is out of range for {classes} classes")));
            }
            idx.push(c);
        }
        let path = root.join("images").join(file);
        let bytes = io(&path, fs::read(&path))?;
        let image = decode_ppm(&bytes).map_err(|m| bad(no, format!("{}: {m}", path.display())))?;
        let shape = (image.shape()[1], image.shape()[2]);
        if *size.get_or_insert(shape) != shape {
            return Err(bad(no, format!("image is {shape:?}, earlier images are {:?}", size.unwrap())));
        }
        samples.push(Sample {
            name: file.to_string(),
            image,
            labels: LabelVector::from_indices(&idx, classes).map_err(|e| bad(no, e.to_string()))?,
        });
    }
    if samples.is_empty() {
        return Err(bad(0, "manifest lists no samples".into()));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        classes,
        samples,
    })
}

/// Diagnostic boxes from `<root>/boxes.csv`, as `(filename, class, rect)`.
pub fn load_boxes(root: &Path) -> Result<Vec<(String, usize, PixelRect)>> {
    let path = root.join("boxes.csv");
    let text = io(&path, fs::read_to_string(&path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parsed = (|| {
            let [name, class, x0, y0, x1, y1] = f[..] else { return None };
            Some((
                name.to_string(),
                class.parse().ok()?,
                PixelRect {
                    x0: x0.parse().ok()?,
                    y0: y0.parse().ok()?,
                    x1: x1.parse().ok()?,
                    y1: y1.parse().ok()?,
                },
            ))
        })();
        out.push(parsed.ok_or_else(|| Error::Load {
            path: path.clone(),
            line: i + 1,
            message: format!("malformed box row {line:?}"),
        })?);
    }
    Ok(out)
}

/// Training split of a dataset directory: `<root>/train` when it exists.
pub fn train_dir(root: &Path) -> PathBuf {
    let sub = root.join("train");
    if sub.join("manifest.csv").exists() {
        sub
    } else {
        root.to_path_buf()
    }
}

/// Test split of a dataset directory: `<root>/test` when it exists.
pub fn test_dir(root: &Path) -> PathBuf {
    let sub = root.join("test");
    if sub.join("manifest.csv").exists() {
        sub
    } else {
        root.to_path_buf()
    }
}

/// Generates a train split of `cfg.n` samples and, when `test > 0`, a test
/// split on an independent RNG stream, under `<out>/train` and `<out>/test`.
/// With `test == 0` the single split is written directly to `out`.
pub fn generate_splits(out: &Path, cfg: &DataConfig, test: usize) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let train = generate(cfg, 0)?;
    if test == 0 {
        write_dataset(out, cfg, &train)?;
        return Ok((train, Vec::new()));
    }
    let test_cfg = DataConfig { n: test, ..cfg.clone() };
    let test = generate(&test_cfg, 1)?;
    write_dataset(&out.join("train"), cfg, &train)?;
    write_dataset(&out.join("test"), &test_cfg, &test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, classes: usize) -> DataConfig {
        DataConfig {
            n,
            classes,
            size: 16,
            ..DataConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = small(40, 3);
        let a = generate(&cfg, 0).unwrap();
        assert_eq!(a, generate(&cfg, 0).unwrap());
        assert_ne!(a, generate(&cfg, 1).unwrap());
        for s in &a {
            let k = s.labels.count();
            assert!((1..=3).contains(&k));
            assert_eq!(s.boxes.len(), k);
            for (c, b) in &s.boxes {
                assert!(s.labels.contains(*c));
                assert!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 16.0 && b.y1 <= 16.0);
            }
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn marginals_in_range() {
        let cfg = DataConfig {
            n: 500,
            ..DataConfig::default()
        };
        let samples = generate(&cfg, 0).unwrap();
        let labels: Vec<&LabelVector> = samples.iter().map(|s| &s.labels).collect();
        for m in label_marginals(&labels, 4) {
            assert!((0.15..=0.85).contains(&m), "{m}");
        }
    }

    #[test]
    fn ppm_roundtrip() {
        let cfg = small(3, 2);
        let s = &generate(&cfg, 0).unwrap()[0];
        let back = decode_ppm(&encode_ppm(&s.image).unwrap()).unwrap();
        assert!(back.max_abs_diff(&s.image) <= 1.0 / 255.0);
        let mut with_comment = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        with_comment.extend([255, 0, 51]);
        assert_eq!(decode_ppm(&with_comment).unwrap().data(), &[1.0, 0.0, 0.2]);
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(12, 3);
        let samples = generate(&cfg, 0).unwrap();
        write_dataset(dir.path(), &cfg, &samples).unwrap();
        let ds = load(dir.path(), None).unwrap();
        assert_eq!(ds.classes, 3);
        assert_eq!(ds.len(), 12);
        for (a, b) in samples.iter().zip(&ds.samples) {
            assert_eq!(a.labels, b.labels);
            assert!(a.image.max_abs_diff(&b.image) <= 1.0 / 255.0);
        }
        assert_eq!(load_boxes(dir.path()).unwrap().len(), samples.iter().map(|s| s.boxes.len()).sum::<usize>());
    }

    #[test]
    fn malformed_manifest_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(2, 2);
        let samples = generate(&cfg, 0).unwrap();
        write_dataset(dir.path(), &cfg, &samples).unwrap();
        let manifest = dir.path().join("manifest.csv");
        for (text, line) in [
            ("00000.ppm,0\n00001.ppm,\n", 2),
            ("00000.ppm,5\n", 1),
            ("00000.ppm\n", 1),
            ("00000.ppm,0\n00001.ppm,x\n", 2),
            ("missing.ppm,0\n", 0),
        ] {
            fs::write(&manifest, text).unwrap();
            match load(dir.path(), None) {
                Err(Error::Load { line: l, .. }) => assert_eq!(l, line, "{text}"),
                Err(Error::Io { .. }) => assert_eq!(line, 0),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn shuffled_manifest_same_multiset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(5, 3);
        write_dataset(dir.path(), &cfg, &generate(&cfg, 0).unwrap()).unwrap();
        let manifest = dir.path().join("manifest.csv");
        let a = load(dir.path(), None).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.reverse();
        fs::write(&manifest, lines.join("\n")).unwrap();
        let b = load(dir.path(), None).unwrap();
        let key = |d: &Dataset| {
            let mut v: Vec<_> = d.samples.iter().map(|s| (s.name.clone(), s.labels.indices())).collect();
            v.sort();
            v
        };
        assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&small(5, 1), 0).is_err());
        assert!(generate(&small(5, 9), 0).is_err());
        assert!(generate(&DataConfig { size: 30, ..small(5, 2) }, 0).is_err());
    }
}
