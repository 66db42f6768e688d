//! Per-anchor evaluation and report emission: `summary.json`, `curves.csv`,
//! `curves.svg` and PPM image dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};
use thiserror::Error;

use crate::container::{io_err, write_atomic, ContainerError};
use crate::metrics::{mean, median, psnr, ssim, MetricError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("nothing to report")]
    Empty,
    #[error("{path}: not a binary PPM ({msg})")]
    Ppm { path: String, msg: String },
}

pub const METRIC_NOTE: &str =
    "Reconstruction quality is measured with PSNR and SSIM; no learned perceptual metric is used.";

/// Emits the images of one anchor side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorImages {
    pub shape: [usize; 3],
    pub reconstruction: Option<Vec<f32>>,
    /// The input the gradient was computed on (adversarial under AT).
    pub target: Vec<f32>,
    pub clean: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorMetrics {
    pub anchor: usize,
    pub label: usize,
    /// Restoration cosine of each batch against the true feature.
    pub batch_cosines: Vec<f64>,
    /// Best of `batch_cosines` (evaluation-side selection).
    pub best_cosine: f64,
    pub oracle_batch: usize,
    /// Batch picked by the lowest inversion objective (attacker-side).
    pub attacker_batch: Option<usize>,
    pub attacker_cosine: Option<f64>,
    pub final_objective: Option<f64>,
    pub psnr_target: Option<f64>,
    pub ssim_target: Option<f64>,
    pub psnr_clean: Option<f64>,
    pub ssim_clean: Option<f64>,
    pub baseline_psnr_target: Option<f64>,
    /// Per batch: whether the recovered label set equals the true one.
    pub labels_exact: Vec<bool>,
}

/// Inputs for one anchor, gathered by the caller from the attack outputs
/// and the ground-truth records.
#[derive(Debug, Clone)]
pub struct AnchorEvidence {
    pub anchor: usize,
    pub label: usize,
    pub batch_cosines: Vec<f64>,
    pub labels_exact: Vec<bool>,
    /// Per batch `(objective, image)` of the anchor label's inversion.
    pub inversions: Vec<Option<(f64, Vec<f32>)>>,
    /// Per batch baseline reconstruction of the anchor's row.
    pub baseline: Vec<Option<Vec<f32>>>,
    /// Per batch input actually used for the anchor.
    pub targets: Vec<Vec<f32>>,
    pub clean: Vec<f32>,
    pub shape: [usize; 3],
}

fn argbest(values: impl Iterator<Item = (usize, f64)>, lower_is_better: bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        let better = match best {
            None => true,
            Some((_, b)) if lower_is_better => v.total_cmp(&b).is_lt(),
            Some((_, b)) => v.total_cmp(&b).is_gt(),
        };
        if better {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

pub fn anchor_metrics(ev: &AnchorEvidence) -> Result<(AnchorMetrics, AnchorImages), ReportError> {
    let oracle_batch =
        argbest(ev.batch_cosines.iter().copied().enumerate(), false).ok_or(ReportError::Empty)?;
    let attacker_batch = argbest(
        ev.inversions
            .iter()
            .enumerate()
            .filter_map(|(i, x)| x.as_ref().map(|(o, _)| (i, *o))),
        true,
    );
    let recon = attacker_batch.and_then(|b| ev.inversions[b].as_ref());
    let target = attacker_batch.map_or(&ev.targets[oracle_batch], |b| &ev.targets[b]);
    let quality = |img: &[f32], reference: &[f32]| -> Result<(f64, f64), ReportError> {
        Ok((psnr(img, reference)?, ssim(img, reference, ev.shape)?))
    };
    let (pt, st) = match recon {
        Some((_, img)) => quality(img, target).map(|(p, s)| (Some(p), Some(s)))?,
        None => (None, None),
    };
    let (pc, sc) = match recon {
        Some((_, img)) => quality(img, &ev.clean).map(|(p, s)| (Some(p), Some(s)))?,
        None => (None, None),
    };
    // Baseline: best batch by PSNR is not attacker-observable, so use the
    // same batch as the two-step attack, falling back to the first.
    let bb = attacker_batch.unwrap_or(0);
    let baseline_psnr_target = match ev.baseline.get(bb).and_then(Option::as_ref) {
        Some(img) => Some(psnr(img, &ev.targets[bb])?),
        None => None,
    };
    let metrics = AnchorMetrics {
        anchor: ev.anchor,
        label: ev.label,
        batch_cosines: ev.batch_cosines.clone(),
        best_cosine: ev.batch_cosines[oracle_batch],
        oracle_batch,
        attacker_batch,
        attacker_cosine: attacker_batch.map(|b| ev.batch_cosines[b]),
        final_objective: recon.map(|(o, _)| *o),
        psnr_target: pt,
        ssim_target: st,
        psnr_clean: pc,
        ssim_clean: sc,
        baseline_psnr_target,
        labels_exact: ev.labels_exact.clone(),
    };
    let images = AnchorImages {
        shape: ev.shape,
        reconstruction: recon.map(|(_, img)| img.clone()),
        target: target.clone(),
        clean: ev.clean.clone(),
    };
    Ok((metrics, images))
}

#[derive(Debug, Clone)]
pub struct ConfigReport {
    pub name: String,
    pub anchors: Vec<AnchorMetrics>,
    pub images: Vec<AnchorImages>,
    pub warnings: usize,
}

/// JSON value of a float; non-finite values become strings (`"inf"`) or
/// null. Rendered at six decimals by [`to_fixed_json`].
pub fn fixed(x: f64) -> Value {
    if x.is_finite() {
        Value::from(if x == 0.0 { 0.0 } else { x })
    } else if x.is_nan() {
        Value::Null
    } else if x > 0.0 {
        Value::String("inf".into())
    } else {
        Value::String("-inf".into())
    }
}

/// Pretty JSON with sorted keys, integers verbatim and every float at six
/// decimals.
pub fn to_fixed_json(v: &Value) -> String {
    fn number(n: &Number) -> String {
        if n.is_f64() {
            let s = format!("{:.6}", n.as_f64().expect("f64 number"));
            if s == "-0.000000" {
                "0.000000".into()
            } else {
                s
            }
        } else {
            n.to_string()
        }
    }
    fn go(v: &Value, indent: usize, out: &mut String) {
        let pad = "  ".repeat(indent + 1);
        match v {
            Value::Number(n) => out.push_str(&number(n)),
            Value::Array(a) if a.is_empty() => out.push_str("[]"),
            Value::Object(o) if o.is_empty() => out.push_str("{}"),
            Value::Array(a) => {
                out.push_str("[\n");
                for (i, x) in a.iter().enumerate() {
                    out.push_str(&pad);
                    go(x, indent + 1, out);
                    out.push_str(if i + 1 < a.len() { ",\n" } else { "\n" });
                }
                out.push_str(&"  ".repeat(indent));
                out.push(']');
            }
            Value::Object(o) => {
                let mut keys: Vec<&String> = o.keys().collect();
                keys.sort();
                out.push_str("{\n");
                for (i, k) in keys.iter().enumerate() {
                    out.push_str(&pad);
                    out.push_str(&Value::String((*k).clone()).to_string());
                    out.push_str(": ");
                    go(&o[*k], indent + 1, out);
                    out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
                }
                out.push_str(&"  ".repeat(indent));
                out.push('}');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::new();
    go(v, 0, &mut out);
    out.push('\n');
    out
}

fn opt_mean(values: impl Iterator<Item = Option<f64>>) -> Value {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        Value::Null
    } else {
        fixed(mean(&v))
    }
}

fn opt_median(values: impl Iterator<Item = Option<f64>>) -> Value {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        Value::Null
    } else {
        fixed(median(&v))
    }
}

pub fn config_summary(c: &ConfigReport) -> Value {
    let best: Vec<f64> = c.anchors.iter().map(|a| a.best_cosine).collect();
    let all: Vec<f64> = c
        .anchors
        .iter()
        .flat_map(|a| a.batch_cosines.iter().copied())
        .collect();
    let trials: usize = c.anchors.iter().map(|a| a.labels_exact.len()).sum();
    let exact: usize = c
        .anchors
        .iter()
        .map(|a| a.labels_exact.iter().filter(|&&e| e).count())
        .sum();
    let mut m = BTreeMap::new();
    m.insert("anchors", Value::from(c.anchors.len()));
    m.insert("batches", Value::from(trials));
    m.insert("mean_best_cosine", fixed(mean(&best)));
    m.insert("median_best_cosine", fixed(median(&best)));
    m.insert("mean_batch_cosine", fixed(mean(&all)));
    m.insert(
        "mean_attacker_cosine",
        opt_mean(c.anchors.iter().map(|a| a.attacker_cosine)),
    );
    m.insert(
        "mean_psnr_target",
        opt_mean(c.anchors.iter().map(|a| a.psnr_target)),
    );
    m.insert(
        "median_psnr_target",
        opt_median(c.anchors.iter().map(|a| a.psnr_target)),
    );
    m.insert(
        "mean_ssim_target",
        opt_mean(c.anchors.iter().map(|a| a.ssim_target)),
    );
    m.insert(
        "mean_psnr_clean",
        opt_mean(c.anchors.iter().map(|a| a.psnr_clean)),
    );
    m.insert(
        "mean_ssim_clean",
        opt_mean(c.anchors.iter().map(|a| a.ssim_clean)),
    );
    m.insert(
        "mean_baseline_psnr_target",
        opt_mean(c.anchors.iter().map(|a| a.baseline_psnr_target)),
    );
    m.insert(
        "label_recovery_rate",
        fixed(if trials == 0 {
            f64::NAN
        } else {
            exact as f64 / trials as f64
        }),
    );
    m.insert("warnings", Value::from(c.warnings));
    serde_json::to_value(m).expect("map serializes")
}

/// `summary.json` contents: keys sorted, floats at six decimals.
pub fn summary_json(configs: &[ConfigReport]) -> Vec<u8> {
    let mut per = BTreeMap::new();
    for c in configs {
        per.insert(c.name.clone(), config_summary(c));
    }
    let mut root = BTreeMap::new();
    root.insert(
        "configs".to_string(),
        serde_json::to_value(per).expect("map serializes"),
    );
    root.insert("metric_note".to_string(), Value::String(METRIC_NOTE.into()));
    root.insert("schema_version".to_string(), Value::from(1));
    to_fixed_json(&serde_json::to_value(root).expect("summary serializes")).into_bytes()
}

/// Per-anchor metrics with the same number formatting as the summary.
pub fn metrics_json(configs: &[ConfigReport]) -> Vec<u8> {
    let mut per = BTreeMap::new();
    for c in configs {
        let anchors: Vec<Value> = c
            .anchors
            .iter()
            .map(|a| {
                let mut v = serde_json::to_value(a).expect("metrics serialize");
                // Infinite PSNR does not survive serde_json; restore it.
                if let Value::Object(o) = &mut v {
                    for (key, val) in [
                        ("psnr_target", a.psnr_target),
                        ("psnr_clean", a.psnr_clean),
                        ("baseline_psnr_target", a.baseline_psnr_target),
                    ] {
                        if let Some(x) = val {
                            o.insert(key.into(), fixed(x));
                        }
                    }
                }
                v
            })
            .collect();
        per.insert(c.name.clone(), anchors);
    }
    to_fixed_json(&serde_json::to_value(per).expect("metrics serialize")).into_bytes()
}

/// `config,anchor_rank,cosine` with best-of-B cosines sorted descending
/// within each config; ranks start at 1.
pub fn curves_csv(configs: &[ConfigReport]) -> String {
    let mut s = String::from("config,anchor_rank,cosine\n");
    for c in configs {
        for (rank, v) in sorted_cosines(c).into_iter().enumerate() {
            let _ = writeln!(s, "{},{},{:.6}", c.name, rank + 1, v);
        }
    }
    s
}

pub fn sorted_cosines(c: &ConfigReport) -> Vec<f64> {
    let mut v: Vec<f64> = c.anchors.iter().map(|a| a.best_cosine).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Sorted restoration-cosine curves, one polyline per config.
pub fn curves_svg(configs: &[ConfigReport]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 170.0, 20.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let lo = configs
        .iter()
        .flat_map(sorted_cosines)
        .fold(0.0f64, f64::min)
        .max(-1.0);
    let y_of = |v: f64| top + ph * (1.0 - (v - lo) / (1.0 - lo));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, "<desc>{}</desc>", xml_escape(METRIC_NOTE));
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for tick in [lo, (lo + 1.0) / 2.0, 1.0] {
        let y = y_of(tick);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">{tick:.2}</text>"#,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" font-size="12" text-anchor="middle">anchors sorted by restoration cosine</text>"#,
        left + pw / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 15 {:.2})">cosine</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, c) in configs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let v = sorted_cosines(c);
        let n = v.len();
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                let x = if n == 1 {
                    left + pw / 2.0
                } else {
                    left + pw * r as f64 / (n - 1) as f64
                };
                format!("{x:.2},{:.2}", y_of(c))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        if n == 1 {
            let (x, y) = pts[0].split_once(',').expect("point has two coordinates");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 16.0 * (i as f64 + 1.0);
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 20.0,
            ly - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly:.2}" font-size="12">{}</text>"#,
            lx + 26.0,
            xml_escape(&c.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6, maxval 255). Grayscale images are replicated to RGB.
pub fn encode_ppm(img: &[f32], shape: [usize; 3]) -> Vec<u8> {
    let [c, h, w] = shape;
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..plane {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch.min(c - 1) };
            out.push(to_byte(img[src * plane + i]));
        }
    }
    out
}

pub fn write_ppm(path: &Path, img: &[f32], shape: [usize; 3]) -> Result<(), ReportError> {
    Ok(write_atomic(path, &encode_ppm(img, shape))?)
}

/// Reads a P6 file into a `(3, H, W)` image in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, [usize; 3]), ReportError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |msg: &str| ReportError::Ppm {
        path: path.display().to_string(),
        msg: msg.into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let data = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| bad("truncated pixel data"))?;
    let plane = w * h;
    let mut img = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            img[ch * plane + i] = data[3 * i + ch] as f32 / 255.0;
        }
    }
    Ok((img, [3, h, w]))
}

/// Horizontal strip of equally shaped images separated by white columns.
pub fn side_by_side(images: &[&[f32]], shape: [usize; 3], gap: usize) -> (Vec<f32>, [usize; 3]) {
    let [c, h, w] = shape;
    let total_w = images.len() * w + gap * images.len().saturating_sub(1);
    let mut out = vec![1.0f32; c * h * total_w];
    for (k, img) in images.iter().enumerate() {
        let x0 = k * (w + gap);
        for ch in 0..c {
            for y in 0..h {
                let src = &img[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                let dst = ch * h * total_w + y * total_w + x0;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    (out, [c, h, total_w])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub metrics: PathBuf,
    pub curves_csv: PathBuf,
    pub curves_svg: PathBuf,
    pub images: Vec<PathBuf>,
}

/// Writes every report artifact under `out_dir`.
pub fn emit_report(configs: &[ConfigReport], out_dir: &Path) -> Result<ReportFiles, ReportError> {
    if configs.is_empty() || configs.iter().all(|c| c.anchors.is_empty()) {
        return Err(ReportError::Empty);
    }
    let files = ReportFiles {
        summary: out_dir.join("summary.json"),
        metrics: out_dir.join("metrics.json"),
        curves_csv: out_dir.join("curves.csv"),
        curves_svg: out_dir.join("curves.svg"),
        images: Vec::new(),
    };
    write_atomic(&files.summary, &summary_json(configs))?;
    write_atomic(&files.metrics, &metrics_json(configs))?;
    write_atomic(&files.curves_csv, curves_csv(configs).as_bytes())?;
    write_atomic(&files.curves_svg, curves_svg(configs).as_bytes())?;
    let mut files = files;
    for c in configs {
        for (m, img) in c.anchors.iter().zip(&c.images) {
            let mut strip: Vec<&[f32]> = Vec::new();
            if let Some(r) = &img.reconstruction {
                strip.push(r);
            }
            strip.push(&img.target);
            if img.target != img.clean {
                strip.push(&img.clean);
            }
            let (pixels, shape) = side_by_side(&strip, img.shape, 2);
            let path = out_dir
                .join("anchors")
                .join(format!("{}_anchor{}.ppm", c.name, m.anchor));
            write_ppm(&path, &pixels, shape)?;
            files.images.push(path);
        }
    }
    Ok(files)
}
