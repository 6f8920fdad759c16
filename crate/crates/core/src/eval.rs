//! Discriminator-as-classifier evaluation: rankings, CMC curves, Top-r
//! reports and generator sample grids.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{stack_images, to_byte, Sample};
use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator};
use crate::rng::{sample_gaussian, RandomSource};
use crate::tensor::{Real, Tensor};

/// Real classes of each row ordered by descending logit, ties to the lower
/// index. Only the first `k` columns are read, so the fake logit never
/// influences the order.
pub fn rank_classes<T: Real>(logits: &Tensor<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    let &[b, w] = logits.shape() else {
        return Err(Error::shape("rank_classes", &[0, k + 1], logits.shape()));
    };
    if k == 0 || k > w {
        return Err(Error::invalid(format!("cannot rank {k} classes from {w} logits")));
    }
    Ok((0..b)
        .map(|r| {
            let row = &logits.data()[r * w..r * w + k];
            let mut order: Vec<usize> = (0..k).collect();
            // Stable sort keeps ascending index among equal logits.
            order.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap_or(std::cmp::Ordering::Equal));
            order
        })
        .collect())
}

/// Accuracy at ranks `1..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    pub accuracies: Vec<f64>,
}

impl CmcCurve {
    /// Accuracy at rank `r`, saturating at `k`.
    pub fn at(&self, r: usize) -> f64 {
        let k = self.accuracies.len();
        self.accuracies[r.clamp(1, k) - 1]
    }
}

pub fn cmc_curve(rankings: &[Vec<usize>], labels: &[usize]) -> Result<CmcCurve> {
    if rankings.len() != labels.len() {
        return Err(Error::invalid(format!("{} rankings for {} labels", rankings.len(), labels.len())));
    }
    if rankings.is_empty() {
        return Err(Error::invalid("CMC of zero samples"));
    }
    let k = rankings[0].len();
    let mut hits_at = vec![0usize; k];
    for (order, &y) in rankings.iter().zip(labels) {
        if order.len() != k {
            return Err(Error::invalid("rankings of unequal length"));
        }
        let pos = order
            .iter()
            .position(|&c| c == y)
            .ok_or_else(|| Error::invalid(format!("label {y} missing from ranking")))?;
        hits_at[pos] += 1;
    }
    let n = labels.len() as f64;
    let mut cum = 0usize;
    let accuracies: Vec<f64> = hits_at
        .iter()
        .map(|&h| {
            cum += h;
            cum as f64 / n
        })
        .collect();
    debug_assert!(accuracies.windows(2).all(|w| w[0] <= w[1]));
    debug_assert_eq!(*accuracies.last().unwrap(), 1.0);
    Ok(CmcCurve { accuracies })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub samples: usize,
    pub classes: Vec<String>,
    /// Percentages.
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub cmc: CmcCurve,
    /// Top-1 accuracy per class, fractions; `NaN`-free, classes without
    /// test samples report 0.
    pub per_class: Vec<f64>,
}

impl EvalReport {
    pub fn from_rankings(model: &str, classes: Vec<String>, rankings: &[Vec<usize>], labels: &[usize]) -> Result<Self> {
        let cmc = cmc_curve(rankings, labels)?;
        let k = classes.len();
        let mut hit = vec![0usize; k];
        let mut seen = vec![0usize; k];
        for (order, &y) in rankings.iter().zip(labels) {
            seen[y] += 1;
            hit[y] += usize::from(order[0] == y);
        }
        let per_class = hit.iter().zip(&seen).map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 }).collect();
        Ok(Self {
            model: model.to_string(),
            samples: labels.len(),
            classes,
            top1: cmc.at(1) * 100.0,
            top5: cmc.at(5) * 100.0,
            top10: cmc.at(10) * 100.0,
            cmc,
            per_class,
        })
    }
}

/// Classifies the test split in batches of `batch_size`.
pub fn evaluate(model: &Discriminator<f32>, test: &[Sample], classes: &[String], batch_size: usize, model_id: &str) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("evaluation needs a non-empty test split"));
    }
    let k = model
        .num_classes()
        .ok_or_else(|| Error::invalid("a sigmoid-head discriminator cannot classify"))?;
    if k != classes.len() {
        return Err(Error::invalid(format!("model has {k} classes, dataset has {}", classes.len())));
    }
    let mut rankings = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for chunk in test.chunks(batch_size.max(1)) {
        let x = stack_images(chunk, model.image_shape)?;
        let out = model.classify(&x)?;
        rankings.extend(rank_classes(&out.logits, k)?);
        for s in chunk {
            labels.push(s.label.ok_or_else(|| Error::invalid(format!("test sample {} is unlabeled", s.source_id)))?);
        }
    }
    EvalReport::from_rankings(model_id, classes.to_vec(), &rankings, &labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Text => "txt",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "text" | "table" | "text-table" => Ok(Self::Text),
            _ => Err(Error::invalid(format!("unknown report format `{s}` (csv, json, text)"))),
        }
    }
}

pub fn report_csv(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# model={}", r.model);
    let _ = writeln!(s, "# samples={}", r.samples);
    let _ = writeln!(s, "# top1={:.2},top5={:.2},top10={:.2}", r.top1, r.top5, r.top10);
    for (name, acc) in r.classes.iter().zip(&r.per_class) {
        let _ = writeln!(s, "# class={acc} {name}");
    }
    s.push_str("rank,accuracy\n");
    for (i, a) in r.cmc.accuracies.iter().enumerate() {
        let _ = writeln!(s, "{},{a}", i + 1);
    }
    s
}

/// Inverse of [`report_csv`]; Top-r values are recomputed from the curve.
pub fn parse_report_csv(text: &str) -> Result<EvalReport> {
    let bad = |line: &str| Error::invalid(format!("malformed report line `{line}`"));
    let mut model = None;
    let mut samples = None;
    let mut classes = Vec::new();
    let mut per_class = Vec::new();
    let mut accuracies = Vec::new();
    let mut header = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("# model=") {
            model = Some(rest.to_string());
        } else if let Some(rest) = line.strip_prefix("# samples=") {
            samples = Some(rest.parse::<usize>().map_err(|_| bad(line))?);
        } else if let Some(rest) = line.strip_prefix("# class=") {
            let (acc, name) = rest.split_once(' ').ok_or_else(|| bad(line))?;
            per_class.push(acc.parse::<f64>().map_err(|_| bad(line))?);
            classes.push(name.to_string());
        } else if line.starts_with('#') {
            continue;
        } else if line == "rank,accuracy" {
            header = true;
        } else {
            let (rank, acc) = line.split_once(',').ok_or_else(|| bad(line))?;
            if rank.parse::<usize>().map_err(|_| bad(line))? != accuracies.len() + 1 {
                return Err(bad(line));
            }
            accuracies.push(acc.parse::<f64>().map_err(|_| bad(line))?);
        }
    }
    if !header || accuracies.is_empty() {
        return Err(Error::invalid("report has no rank,accuracy table"));
    }
    let cmc = CmcCurve { accuracies };
    Ok(EvalReport {
        model: model.ok_or_else(|| Error::invalid("report lacks model line"))?,
        samples: samples.ok_or_else(|| Error::invalid("report lacks samples line"))?,
        classes,
        top1: cmc.at(1) * 100.0,
        top5: cmc.at(5) * 100.0,
        top10: cmc.at(10) * 100.0,
        cmc,
        per_class,
    })
}

/// Three-column Top-1/5/10 table followed by per-class accuracy.
pub fn report_table(r: &EvalReport, title: &str) -> String {
    let method_w = r.model.len().max(6);
    let mut s = String::new();
    let _ = writeln!(s, "Accuracy (%) for {title}");
    let _ = writeln!(s, "{:<method_w$} | {:>6} | {:>6} | {:>6}", "Method", "Top-1", "Top-5", "Top-10");
    let _ = writeln!(s, "{:-<method_w$}-+-{:->6}-+-{:->6}-+-{:->6}", "", "", "", "");
    let _ = writeln!(s, "{:<method_w$} | {:>6.2} | {:>6.2} | {:>6.2}", r.model, r.top1, r.top5, r.top10);
    let _ = writeln!(s);
    let name_w = r.classes.iter().map(|c| c.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(s, "{:<name_w$} | Top-1", "Class");
    for (name, acc) in r.classes.iter().zip(&r.per_class) {
        let _ = writeln!(s, "{name:<name_w$} | {:>6.2}", acc * 100.0);
    }
    let _ = writeln!(s, "({} test samples, {} classes)", r.samples, r.classes.len());
    s
}

pub fn write_report(r: &EvalReport, path: &Path, format: ReportFormat, title: &str) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_csv(r),
        ReportFormat::Json => serde_json::to_string_pretty(r)? + "\n",
        ReportFormat::Text => report_table(r, title),
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Tiles `count` generated samples row-major on a `rows×cols` grid (unused
/// cells stay black) and writes a PNG.
pub fn write_image_grid(
    generator: &Generator<f32>,
    count: usize,
    (rows, cols): (usize, usize),
    path: &Path,
    rng: &mut RandomSource,
) -> Result<()> {
    if count == 0 || rows * cols < count {
        return Err(Error::invalid(format!("{count} samples do not fit a {rows}x{cols} grid")));
    }
    let z = sample_gaussian::<f32>(rng, &[count, generator.latent_dim], 0.0, 1.0)?;
    let images = generator.generate(&z)?;
    write_tensor_grid(&images, (rows, cols), path)
}

/// Grid of an already computed `N×C×H×W` batch.
pub fn write_tensor_grid(images: &Tensor<f32>, (rows, cols): (usize, usize), path: &Path) -> Result<()> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::shape("image_grid", &[0, 1, 0, 0], images.shape()));
    };
    if rows * cols < n {
        return Err(Error::invalid(format!("{n} samples do not fit a {rows}x{cols} grid")));
    }
    let (gw, gh) = ((cols * w) as u32, (rows * h) as u32);
    let d = images.data();
    let pixel = |x: u32, y: u32, ch: usize| -> u8 {
        let (col, row) = (x as usize / w, y as usize / h);
        let idx = row * cols + col;
        if idx >= n {
            return 0;
        }
        let (px, py) = (x as usize % w, y as usize % h);
        to_byte(d[((idx * c + ch) * h + py) * w + px])
    };
    let result = match c {
        1 => GrayImage::from_fn(gw, gh, |x, y| Luma([pixel(x, y, 0)])).save(path),
        3 => RgbImage::from_fn(gw, gh, |x, y| Rgb([pixel(x, y, 0), pixel(x, y, 1), pixel(x, y, 2)])).save(path),
        _ => return Err(Error::invalid(format!("cannot write {c}-channel images"))),
    };
    result.map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
}
