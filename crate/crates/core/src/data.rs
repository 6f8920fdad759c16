//! Datasets: directory ingestion, split protocols, label stripping,
//! preprocessing, the procedural shapes corpus and the split manifest.
//!
//! Class indices are 0-based (`0..k`) and follow the lexicographic order of
//! class directory names.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `C×H×W`, values in `[−1, 1]`.
    pub image: Tensor<f32>,
    /// Visible label; `None` for unlabeled training samples.
    pub label: Option<usize>,
    /// Ground-truth class from the directory layout. Recorded in the
    /// manifest; training only ever reads `label`.
    pub class: usize,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub image_shape: [usize; 3],
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Files skipped during loading, one message each.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labeled_train(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().filter(|s| s.label.is_some())
    }

    fn pool(&self) -> Vec<Sample> {
        let mut all: Vec<Sample> = self.train.iter().chain(&self.test).cloned().collect();
        all.sort_by(|a, b| a.source_id.cmp(&b.source_id));
        all
    }

    fn by_class(samples: Vec<Sample>, k: usize) -> Vec<Vec<Sample>> {
        let mut groups = vec![Vec::new(); k];
        for s in samples {
            groups[s.class].push(s);
        }
        groups
    }
}

/// Stacks samples into a `B×C×H×W` batch.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>, image_shape: [usize; 3]) -> Result<Tensor<f32>> {
    let per: usize = image_shape.iter().product();
    let mut data = Vec::new();
    let mut n = 0;
    for s in samples {
        if s.image.shape() != image_shape {
            return Err(Error::shape("stack_images", &image_shape, s.image.shape()));
        }
        data.extend_from_slice(s.image.data());
        n += 1;
    }
    debug_assert_eq!(data.len(), n * per);
    let [c, h, w] = image_shape;
    Tensor::new([n, c, h, w], data)
}

/// Resizes (bilinear) to `H×W`, converts to `C` channels (1 = luma, 3 = RGB)
/// and scales `[0, 255]` to `[−1, 1]` via `x/127.5 − 1`.
pub fn preprocess_image(img: &DynamicImage, image_shape: [usize; 3]) -> Result<Tensor<f32>> {
    let [c, h, w] = image_shape;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::invalid("cannot preprocess a zero-area image"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("target image shape has zero area"));
    }
    let (h32, w32) = (h as u32, w as u32);
    let scale = |v: u8| (v as f64 / 127.5 - 1.0) as f32;
    match c {
        1 => {
            let mut g = img.to_luma8();
            if g.dimensions() != (w32, h32) {
                g = image::imageops::resize(&g, w32, h32, FilterType::Triangle);
            }
            Tensor::new([1, h, w], g.pixels().map(|p| scale(p.0[0])).collect())
        }
        3 => {
            let mut rgb = img.to_rgb8();
            if rgb.dimensions() != (w32, h32) {
                rgb = image::imageops::resize(&rgb, w32, h32, FilterType::Triangle);
            }
            let mut data = vec![0.0f32; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * h * w + i] = scale(p.0[ch]);
                }
            }
            Tensor::new([3, h, w], data)
        }
        _ => Err(Error::invalid(format!("images must have 1 or 3 channels, got {c}"))),
    }
}

/// Maps a `[−1, 1]` value to a byte.
pub fn to_byte(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Inverse of [`preprocess_image`] (without the resize).
pub fn tensor_to_image(t: &Tensor<f32>) -> Result<DynamicImage> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::shape("tensor_to_image", &[1, 0, 0], t.shape()));
    };
    let (w32, h32) = (w as u32, h as u32);
    let d = t.data();
    match c {
        1 => Ok(DynamicImage::ImageLuma8(ImageBuffer::from_fn(w32, h32, |x, y| {
            Luma([to_byte(d[y as usize * w + x as usize])])
        }))),
        3 => Ok(DynamicImage::ImageRgb8(ImageBuffer::from_fn(w32, h32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([to_byte(d[i]), to_byte(d[h * w + i]), to_byte(d[2 * h * w + i])])
        }))),
        _ => Err(Error::invalid(format!("images must have 1 or 3 channels, got {c}"))),
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Class directory names under `root`, sorted.
pub fn class_directories(root: &Path) -> Result<Vec<String>> {
    let classes: Vec<String> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).map(|p| file_name(&p)).collect();
    if classes.is_empty() {
        return Err(Error::invalid(format!("no class directories under {}", root.display())));
    }
    Ok(classes)
}

fn load_one(root: &Path, source_id: &str, class: usize, image_shape: [usize; 3]) -> Result<Sample> {
    let path = root.join(source_id);
    let img = image::open(&path).map_err(|e| Error::Image { path: path.clone(), msg: e.to_string() })?;
    let image = preprocess_image(&img, image_shape).map_err(|e| Error::Image { path, msg: e.to_string() })?;
    Ok(Sample { image, label: Some(class), class, source_id: source_id.to_string() })
}

/// Reads `root/<class>/<image>` into an unsplit dataset: every sample sits
/// in `train`, labeled. Undecodable files are skipped with a warning.
pub fn load_dataset(root: &Path, image_shape: [usize; 3]) -> Result<Dataset> {
    let class_names = class_directories(root)?;
    let mut train = Vec::new();
    let mut warnings = Vec::new();
    for (class, name) in class_names.iter().enumerate() {
        for path in sorted_entries(&root.join(name))? {
            if !path.is_file() || !is_image_file(&path) {
                continue;
            }
            let id = format!("{name}/{}", file_name(&path));
            match load_one(root, &id, class, image_shape) {
                Ok(s) => train.push(s),
                Err(e) => {
                    log::warn!("skipping {id}: {e}");
                    warnings.push(format!("skipped {id}: {e}"));
                }
            }
        }
    }
    Ok(Dataset { class_names, image_shape, train, test: Vec::new(), warnings })
}

/// Train/test split protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Protocol {
    /// 750 train / 250 test per class; further images are left out.
    Eth,
    /// 80 train per class, the rest test.
    Indian,
    /// `round(p·n)` train per class, the rest test.
    Fraction(f64),
}

impl Protocol {
    /// `(train, test)` counts for a class of `n` images.
    pub fn counts(&self, class: &str, n: usize) -> Result<(usize, usize)> {
        let violation = |need| Error::ProtocolViolation { class: class.to_string(), protocol: self.to_string(), have: n, need };
        match *self {
            Protocol::Eth if n >= 1000 => Ok((750, 250)),
            Protocol::Eth => Err(violation(1000)),
            Protocol::Indian if n > 80 => Ok((80, n - 80)),
            Protocol::Indian => Err(violation(81)),
            Protocol::Fraction(p) => {
                let train = (p * n as f64).round() as usize;
                if train == 0 || train >= n {
                    Err(violation(if n < 2 { 2 } else { n + 1 }))
                } else {
                    Ok((train, n - train))
                }
            }
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Eth => f.write_str("eth"),
            Protocol::Indian => f.write_str("indian"),
            Protocol::Fraction(p) => write!(f, "fraction:{p}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    /// `eth`, `indian`, `fraction:P` or `fraction(P)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "eth" => return Ok(Protocol::Eth),
            "indian" => return Ok(Protocol::Indian),
            _ => {}
        }
        let arg = s
            .strip_prefix("fraction:")
            .or_else(|| s.strip_prefix("fraction(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| Error::invalid(format!("unknown protocol `{s}` (eth, indian, fraction:P)")))?;
        let p: f64 = arg.trim().parse().map_err(|_| Error::invalid(format!("bad fraction `{arg}`")))?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!("split fraction must be in (0, 1), got {p}")));
        }
        Ok(Protocol::Fraction(p))
    }
}

/// Per class: seeded shuffle of the samples (in source-id order), then the
/// protocol's counts. Existing splits are pooled first, and both output
/// splits come back in source-id order.
pub fn split_train_test(dataset: &Dataset, protocol: Protocol, seed: u64) -> Result<Dataset> {
    let k = dataset.num_classes();
    let groups = Dataset::by_class(dataset.pool(), k);
    let root = RandomSource::new(seed).fork("split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut group) in groups.into_iter().enumerate() {
        let name = &dataset.class_names[class];
        let (n_train, n_test) = protocol.counts(name, group.len())?;
        root.fork(name).shuffle(&mut group);
        for (i, mut s) in group.into_iter().take(n_train + n_test).enumerate() {
            s.label = Some(s.class);
            if i < n_train {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    train.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    test.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    Ok(Dataset { train, test, ..dataset.clone() })
}

/// Withholds labels from exactly `round(u·n_c)` training samples of every
/// class `c`, chosen by a seeded per-class shuffle. Images and the test
/// split are untouched.
pub fn strip_labels(dataset: &Dataset, u: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("unlabeled fraction must be in [0, 1], got {u}")));
    }
    let mut out = dataset.clone();
    let root = RandomSource::new(seed).fork("strip");
    for (class, name) in dataset.class_names.iter().enumerate() {
        let mut idx: Vec<usize> = (0..out.train.len()).filter(|&i| out.train[i].class == class).collect();
        let n_strip = (u * idx.len() as f64).round() as usize;
        root.fork(name).shuffle(&mut idx);
        for &i in &idx[..n_strip] {
            out.train[i].label = None;
        }
    }
    Ok(out)
}

/// Shapes available to [`make_synthetic`], in class-index order.
pub const SHAPE_NAMES: [&str; 16] = [
    "disc", "ring", "plus", "hstripes", "checker", "square", "frame", "cross",
    "diamond", "triangle", "vstripes", "dstripes", "halfdisc", "dots", "hbar", "vbar",
];

/// Jitter applied to every synthetic render.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticStyle {
    /// Pixel noise std in `[−1, 1]` units.
    pub noise_std: f64,
    /// Max center offset as a fraction of the side.
    pub position_jitter: f64,
    /// Shape radius range as a fraction of the side.
    pub scale_range: (f64, f64),
    /// Max rotation in radians.
    pub rotation: f64,
    /// Foreground/background intensities are drawn from these ranges.
    pub foreground: (f64, f64),
    pub background: (f64, f64),
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self {
            noise_std: 0.5,
            position_jitter: 0.06,
            scale_range: (0.3, 0.4),
            rotation: 0.0,
            foreground: (0.6, 1.0),
            background: (-1.0, -0.6),
        }
    }
}

impl SyntheticStyle {
    /// Same geometry jitter, no pixel noise.
    pub fn clean() -> Self {
        Self { noise_std: 0.0, ..Self::default() }
    }

    /// Heavy geometry and contrast jitter with light pixel noise. On the
    /// filled/hollow pairs (disc, ring, square, frame) this leaves 25
    /// labels per class well short of what the full set reaches.
    pub fn hard() -> Self {
        Self {
            noise_std: 0.1,
            position_jitter: 0.12,
            scale_range: (0.26, 0.4),
            rotation: 0.35,
            foreground: (0.2, 1.0),
            background: (-1.0, -0.3),
        }
    }
}

/// Coverage of `shape` at normalized coordinates (unit radius).
fn shape_mask(shape: &str, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let inside_box = u.abs() <= 1.0 && v.abs() <= 1.0;
    let stripes = |t: f64| (t * std::f64::consts::PI * 1.5).sin() > 0.0;
    match shape {
        "disc" => r <= 1.0,
        "ring" => (0.55..=1.0).contains(&r),
        "square" => u.abs().max(v.abs()) <= 0.85,
        "frame" => (0.55..=1.0).contains(&u.abs().max(v.abs())),
        "plus" => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        "cross" => inside_box && (u.abs() - v.abs()).abs() <= 0.3,
        "diamond" => u.abs() + v.abs() <= 1.0,
        "triangle" => (-0.8..=0.8).contains(&v) && u.abs() <= (v + 0.8) / 1.6,
        "hstripes" => inside_box && stripes(v),
        "vstripes" => inside_box && stripes(u),
        "checker" => inside_box && ((u + 1.0) * 1.5).floor() as i64 % 2 == ((v + 1.0) * 1.5).floor() as i64 % 2,
        "dstripes" => r <= 1.0 && stripes((u + v) * 0.75),
        "halfdisc" => r <= 1.0 && v <= 0.0,
        "dots" => [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)]
            .iter()
            .any(|&(cu, cv)| (u - cu).powi(2) + (v - cv).powi(2) <= 0.09),
        "hbar" => v.abs() <= 0.3 && u.abs() <= 1.0,
        "vbar" => u.abs() <= 0.3 && v.abs() <= 1.0,
        _ => false,
    }
}

/// Renders one jittered sample of `shape` on a `side×side` canvas.
pub fn render_shape(shape: usize, side: usize, style: &SyntheticStyle, rng: &mut RandomSource) -> Tensor<f32> {
    let s = side as f64;
    let lerp = |(lo, hi): (f64, f64), t: f64| lo + (hi - lo) * t;
    let cx = s / 2.0 + (rng.uniform() * 2.0 - 1.0) * style.position_jitter * s;
    let cy = s / 2.0 + (rng.uniform() * 2.0 - 1.0) * style.position_jitter * s;
    let radius = lerp(style.scale_range, rng.uniform()) * s;
    let angle = (rng.uniform() * 2.0 - 1.0) * style.rotation;
    let fg = lerp(style.foreground, rng.uniform());
    let bg = lerp(style.background, rng.uniform());
    let (sin, cos) = angle.sin_cos();
    // 2×2 supersampling softens the edges at small sides.
    const OFFS: [f64; 2] = [0.25, 0.75];
    Tensor::from_fn([1, side, side], |i| {
        let (y, x) = ((i / side) as f64, (i % side) as f64);
        let mut cover = 0.0;
        for oy in OFFS {
            for ox in OFFS {
                let (dx, dy) = ((x + ox - cx) / radius, (y + oy - cy) / radius);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                cover += if shape_mask(SHAPE_NAMES[shape], u, v) { 0.25 } else { 0.0 };
            }
        }
        let mut val = bg + (fg - bg) * cover;
        if style.noise_std > 0.0 {
            val += style.noise_std * rng.normal();
        }
        val.clamp(-1.0, 1.0) as f32
    })
}

/// Procedural grayscale shapes, `per_class` renders of each of the first
/// `k` entries of [`SHAPE_NAMES`], all in `train` and labeled.
pub fn make_synthetic(k: usize, per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_with(k, per_class, side, seed, &SyntheticStyle::default())
}

pub fn make_synthetic_with(k: usize, per_class: usize, side: usize, seed: u64, style: &SyntheticStyle) -> Result<Dataset> {
    if !(2..=SHAPE_NAMES.len()).contains(&k) {
        return Err(Error::invalid(format!("synthetic data supports 2..={} classes, got {k}", SHAPE_NAMES.len())));
    }
    make_synthetic_classes(&SHAPE_NAMES[..k], per_class, side, seed, style)
}

/// Like [`make_synthetic_with`] for a chosen list of shapes. A shape's
/// renders depend only on its name, the seed and the style, not on its
/// position in `names`.
pub fn make_synthetic_classes(
    names: &[&str],
    per_class: usize,
    side: usize,
    seed: u64,
    style: &SyntheticStyle,
) -> Result<Dataset> {
    if names.len() < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 classes"));
    }
    let mut shapes = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let shape = SHAPE_NAMES
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::invalid(format!("unknown shape `{name}` (have {})", SHAPE_NAMES.join(", "))))?;
        if names[..i].contains(name) {
            return Err(Error::invalid(format!("shape `{name}` listed twice")));
        }
        shapes.push(shape);
    }
    if ![8, 16, 32].contains(&side) {
        return Err(Error::invalid(format!("synthetic side must be 8, 16 or 32, got {side}")));
    }
    let root = RandomSource::new(seed).fork("synthetic");
    let mut train = Vec::with_capacity(names.len() * per_class);
    for (class, (&name, &shape)) in names.iter().zip(&shapes).enumerate() {
        let mut rng = root.fork(name);
        for i in 0..per_class {
            train.push(Sample {
                image: render_shape(shape, side, style, &mut rng),
                label: Some(class),
                class,
                source_id: format!("{name}/{i:05}.png"),
            });
        }
    }
    Ok(Dataset {
        class_names: names.iter().map(|s| s.to_string()).collect(),
        image_shape: [1, side, side],
        train,
        test: Vec::new(),
        warnings: Vec::new(),
    })
}

/// Writes every sample of `dataset` as `root/<source_id>` (PNG).
pub fn write_image_tree(dataset: &Dataset, root: &Path) -> Result<()> {
    for s in dataset.train.iter().chain(&dataset.test) {
        let path = root.join(&s.source_id);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let img = tensor_to_image(&s.image)?;
        let saved = match img {
            DynamicImage::ImageLuma8(g) => GrayImage::save(&g, &path),
            DynamicImage::ImageRgb8(c) => RgbImage::save(&c, &path),
            other => other.save(&path),
        };
        saved.map_err(|e| Error::Image { path, msg: e.to_string() })?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Labeling {
    Labeled,
    Unlabeled,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub split: SplitKind,
    pub labeling: Labeling,
    pub class: String,
}

/// Everything needed to rebuild a split dataset from its image tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub protocol: String,
    pub unlabeled_fraction: f64,
    pub seed: u64,
    pub image_shape: [usize; 3],
    pub classes: Vec<String>,
    pub samples: BTreeMap<String, ManifestEntry>,
    pub warnings: Vec<String>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl Manifest {
    pub fn from_dataset(dataset: &Dataset, protocol: Protocol, unlabeled_fraction: f64, seed: u64) -> Self {
        let entry = |s: &Sample, split| ManifestEntry {
            split,
            labeling: if s.label.is_some() { Labeling::Labeled } else { Labeling::Unlabeled },
            class: dataset.class_names[s.class].clone(),
        };
        let samples = dataset
            .train
            .iter()
            .map(|s| (s.source_id.clone(), entry(s, SplitKind::Train)))
            .chain(dataset.test.iter().map(|s| (s.source_id.clone(), entry(s, SplitKind::Test))))
            .collect();
        Self {
            version: MANIFEST_VERSION,
            protocol: protocol.to_string(),
            unlabeled_fraction,
            seed,
            image_shape: dataset.image_shape,
            classes: dataset.class_names.clone(),
            samples,
            warnings: dataset.warnings.clone(),
        }
    }

    /// Pretty JSON with a trailing newline; byte-stable for equal inputs.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn count(&self, split: SplitKind, labeling: Option<Labeling>) -> usize {
        self.samples
            .values()
            .filter(|e| e.split == split && labeling.is_none_or(|l| e.labeling == l))
            .count()
    }

    /// Loads the listed images from `root`. Unlike [`load_dataset`], a
    /// missing or undecodable file is an error: the manifest promised it.
    pub fn load_dataset(&self, root: &Path) -> Result<Dataset> {
        let class_of: BTreeMap<&str, usize> = self.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (id, e) in &self.samples {
            let class = *class_of
                .get(e.class.as_str())
                .ok_or_else(|| Error::invalid(format!("manifest entry {id} names unknown class `{}`", e.class)))?;
            let mut s = load_one(root, id, class, self.image_shape)?;
            match (e.split, e.labeling) {
                (SplitKind::Test, Labeling::Unlabeled) => {
                    return Err(Error::invalid(format!("manifest marks test sample {id} unlabeled")));
                }
                (SplitKind::Test, _) => test.push(s),
                (SplitKind::Train, l) => {
                    if l == Labeling::Unlabeled {
                        s.label = None;
                    }
                    train.push(s);
                }
            }
        }
        Ok(Dataset {
            class_names: self.classes.clone(),
            image_shape: self.image_shape,
            train,
            test,
            warnings: self.warnings.clone(),
        })
    }
}
