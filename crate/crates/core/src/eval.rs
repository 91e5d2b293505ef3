//! Localization and faithfulness metrics, attention baselines and the
//! dataset runner.
//!
//! Annotations are JSON lines, one image per line:
//!
//! ```text
//! {"image": "imgs/cat.png", "class": 281, "boxes": [[x0, y0, x1, y1], ...]}
//! ```
//!
//! Image paths are relative to the annotation file. Boxes are half-open pixel
//! rectangles in the coordinates of the resized model input, `x` along
//! columns and `y` along rows.

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::image::{load_image, Image};
use crate::numerics::{minmax_normalize, upsample_nearest};
use crate::parallel::map_ordered;
use crate::pipeline::{explain, ExplainOptions, Variant};
use crate::rout::TargetSpec;
use crate::types::{GridMap, Heatmap};
use crate::vit::ForwardTrace;

/// Masked fractions, in percent.
pub const FRACTIONS: [usize; 9] = [10, 20, 30, 40, 50, 60, 70, 80, 90];

/// Default binarization threshold for the weak-localization box.
pub const DEFAULT_THRES: f32 = 0.2;

/// Half-open pixel box: columns `x0..x1`, rows `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub const EMPTY: BBox = BBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    /// Positive-area box.
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Domain(format!("box ({x0},{y0},{x1},{y1}) has no area")));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y0..self.y1).contains(&row) && (self.x0..self.x1).contains(&col)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

impl TryFrom<[usize; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [usize; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub class: usize,
    pub boxes: Vec<BBox>,
}

/// Reads an annotation file. Blank lines are skipped.
pub fn parse_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(&line).map_err(|e| {
            Error::format(Some(line_offset), format!("{}: line {}: {e}", path.display(), n + 1))
        })?;
        if ann.boxes.is_empty() {
            return Err(Error::format(
                Some(line_offset),
                format!("{}: line {}: annotation has no boxes", path.display(), n + 1),
            ));
        }
        out.push(ann);
    }
    Ok(out)
}

/// Position of the largest value; ties go to the smallest `(row, col)`.
pub fn heatmap_argmax(heatmap: &Heatmap) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in heatmap.data.iter().enumerate() {
        if v > heatmap.data[best] {
            best = i;
        }
    }
    (best / heatmap.width, best % heatmap.width)
}

/// Whether the heat map's maximum falls inside any box.
pub fn point_game(heatmap: &Heatmap, boxes: &[BBox]) -> Result<bool> {
    if boxes.is_empty() {
        return Err(Error::Domain("point game needs at least one box".into()));
    }
    let (row, col) = heatmap_argmax(heatmap);
    Ok(boxes.iter().any(|b| b.contains(row, col)))
}

/// Tight box around the pixels at or above `thres`; [`BBox::EMPTY`] when
/// there are none.
pub fn bbox_from_heatmap(heatmap: &Heatmap, thres: f32) -> BBox {
    let mut hull: Option<BBox> = None;
    for row in 0..heatmap.height {
        for col in 0..heatmap.width {
            if heatmap.get(row, col) < thres {
                continue;
            }
            let b = hull.get_or_insert(BBox {
                x0: col,
                y0: row,
                x1: col + 1,
                y1: row + 1,
            });
            b.x0 = b.x0.min(col);
            b.x1 = b.x1.max(col + 1);
            b.y1 = b.y1.max(row + 1);
        }
    }
    hull.unwrap_or(BBox::EMPTY)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let h = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = (w * h) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    MostFirst,
    LeastFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCurve {
    /// `p_c(X) - p_c(X masked)` for each entry of [`FRACTIONS`].
    pub deltas: Vec<f64>,
    pub mean: f64,
}

/// Pixel indices in masking order. Ties keep raster order.
pub fn masking_order(heatmap: &Heatmap, order: Order) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..heatmap.data.len()).collect();
    let v = &heatmap.data;
    match order {
        Order::MostFirst => idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b))),
        Order::LeastFirst => idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b))),
    }
    idx
}

/// Masks growing fractions of pixels (value 0 in every channel) in heat map
/// order and records the drop in the target-class probability.
pub fn perturbation_curve(
    backend: &dyn Backend,
    image: &Image,
    heatmap: &Heatmap,
    class: usize,
    order: Order,
    workers: usize,
) -> Result<PerturbationCurve> {
    if heatmap.height != image.height() || heatmap.width != image.width() {
        return Err(Error::Shape(format!(
            "{}x{} heat map for a {}x{} image",
            heatmap.height,
            heatmap.width,
            image.height(),
            image.width()
        )));
    }
    let probs = backend.forward(image)?;
    if class >= probs.len() {
        return Err(Error::Domain(format!("class {class} out of range for {} classes", probs.len())));
    }
    let base = f64::from(probs.get(class));
    let ranked = masking_order(heatmap, order);
    let n = ranked.len();
    let workers = workers.min(backend.concurrency()).max(1);
    let deltas = map_ordered(&FRACTIONS, workers, |_, &q| -> Result<f64> {
        let mut masked = image.clone();
        for &px in &ranked[..n * q / 100] {
            masked.zero_pixel(px);
        }
        let p = backend
            .forward(&masked)
            .map_err(|e| Error::Backend(format!("masked fraction {q}%: {e}")))?;
        Ok(base - f64::from(p.get(class)))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    Ok(PerturbationCurve { deltas, mean })
}

fn patch_grid(trace: &ForwardTrace) -> Result<usize> {
    let s = trace.tokens.saturating_sub(1);
    let g = (s as f64).sqrt().round() as usize;
    if g * g != s || s == 0 {
        return Err(Error::Shape(format!("{s} patch tokens do not form a square grid")));
    }
    Ok(g)
}

fn cls_row_map(row: &[f64], grid: usize, patch: usize) -> Result<Heatmap> {
    let patches: Vec<f32> = row[1..].iter().map(|&v| v as f32).collect();
    let map = GridMap::new(grid, grid, minmax_normalize(&patches))?;
    Ok(upsample_nearest(&map, patch))
}

fn head_mean(trace: &ForwardTrace, layer: usize) -> Vec<f64> {
    let n = trace.tokens;
    let mut mean = vec![0.0; n * n];
    for h in 0..trace.heads {
        for (m, &a) in mean.iter_mut().zip(trace.attention(layer, h)) {
            *m += f64::from(a);
        }
    }
    mean.iter_mut().for_each(|m| *m /= trace.heads as f64);
    mean
}

/// Head-averaged class-token attention of the last layer.
pub fn baseline_raw_attention(trace: &ForwardTrace, patch: usize) -> Result<Heatmap> {
    if trace.layers == 0 || trace.heads == 0 {
        return Err(Error::Unsupported("trace holds no attention maps".into()));
    }
    let grid = patch_grid(trace)?;
    let mean = head_mean(trace, trace.layers - 1);
    cls_row_map(&mean[..trace.tokens], grid, patch)
}

/// `R = Â_L ⋯ Â_1` with `Â = rownorm(0.5 (Ā + I))`, rows renormalized after
/// every product. Row-major `(S+1) x (S+1)`.
pub fn rollout_matrix(trace: &ForwardTrace) -> Vec<f64> {
    let n = trace.tokens;
    let mut r: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    for layer in 0..trace.layers {
        let mut a = head_mean(trace, layer);
        for i in 0..n {
            a[i * n + i] += 1.0;
            let row = &mut a[i * n..(i + 1) * n];
            row.iter_mut().for_each(|v| *v *= 0.5);
            normalize_row(row);
        }
        let mut next = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i * n + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += aik * r[k * n + j];
                }
            }
            normalize_row(&mut next[i * n..(i + 1) * n]);
        }
        r = next;
    }
    r
}

fn normalize_row(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    if s > 0.0 {
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Class-token row of the attention rollout.
pub fn baseline_rollout(trace: &ForwardTrace, patch: usize) -> Result<Heatmap> {
    if trace.layers == 0 || trace.heads == 0 {
        return Err(Error::Unsupported("trace holds no attention maps".into()));
    }
    let grid = patch_grid(trace)?;
    let r = rollout_matrix(trace);
    cls_row_map(&r[..trace.tokens], grid, patch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rcut,
    Rout,
    Cut,
    RawAttention,
    Rollout,
}

impl Method {
    fn variant(self) -> Option<Variant> {
        match self {
            Method::Rcut => Some(Variant::Rcut),
            Method::Rout => Some(Variant::Rout),
            Method::Cut => Some(Variant::Cut),
            Method::RawAttention | Method::Rollout => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rcut => "rcut",
            Method::Rout => "rout",
            Method::Cut => "cut",
            Method::RawAttention => "raw-attention",
            Method::Rollout => "rollout",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rcut" => Ok(Method::Rcut),
            "rout" => Ok(Method::Rout),
            "cut" => Ok(Method::Cut),
            "raw-attention" => Ok(Method::RawAttention),
            "rollout" => Ok(Method::Rollout),
            _ => Err(Error::Config(format!(
                "unknown method '{s}', expected rcut, rout, cut, raw-attention or rollout"
            ))),
        }
    }
}

/// Which class a dataset run explains and scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// The model's prediction.
    Predicted,
    /// The annotated class.
    GroundTruth,
    Class(usize),
    /// Full output vector for the weights; scored on the prediction.
    FullOutput,
}

impl TargetMode {
    pub fn spec(self, annotated: usize) -> TargetSpec {
        match self {
            TargetMode::Predicted => TargetSpec::Predicted,
            TargetMode::GroundTruth => TargetSpec::Class(annotated),
            TargetMode::Class(c) => TargetSpec::Class(c),
            TargetMode::FullOutput => TargetSpec::FullOutput,
        }
    }
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetMode::Predicted => f.write_str("pred"),
            TargetMode::GroundTruth => f.write_str("gt"),
            TargetMode::Class(c) => write!(f, "class:{c}"),
            TargetMode::FullOutput => f.write_str("full"),
        }
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "gt" {
            return Ok(TargetMode::GroundTruth);
        }
        Ok(match s.parse::<TargetSpec>()? {
            TargetSpec::Predicted => TargetMode::Predicted,
            TargetSpec::Class(c) => TargetMode::Class(c),
            TargetSpec::FullOutput => TargetMode::FullOutput,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub method: Method,
    pub target: TargetMode,
    pub phi: f64,
    pub thres: f32,
    /// Leave images the model gets wrong out of the aggregates.
    pub filter_mispredicted: bool,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            method: Method::Rcut,
            target: TargetMode::Predicted,
            phi: crate::cut::DEFAULT_PHI,
            thres: DEFAULT_THRES,
            filter_mispredicted: false,
            workers: 1,
        }
    }
}

/// Per-image outcome, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image: String,
    /// Line order in the annotation file (blank lines not counted).
    pub index: usize,
    pub annotated_class: usize,
    pub predicted_class: usize,
    pub target_class: usize,
    pub mispredicted: bool,
    pub hit: bool,
    pub iou: f64,
    pub mrfp: f64,
    pub lrfp: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub image: String,
    pub error: String,
}

/// Aggregates in percent; `None` when nothing was scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub target: String,
    pub phi: f64,
    pub thres: f32,
    pub filter_mispredicted: bool,
    pub total: usize,
    pub failed: usize,
    pub excluded: usize,
    pub scored: usize,
    pub point_game_pct: Option<f64>,
    pub miou_pct: Option<f64>,
    pub mrfp_pct: Option<f64>,
    pub lrfp_pct: Option<f64>,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    pub report: EvalReport,
}

/// Scores one annotated image.
pub fn evaluate_image(
    backend: &dyn Backend,
    ann: &Annotation,
    index: usize,
    base_dir: &Path,
    cfg: &EvalConfig,
    workers: usize,
) -> Result<EvalRecord> {
    let meta = backend.meta();
    let image = load_image(&resolve(base_dir, &ann.image), meta.image_size)?;
    if let Some(b) = ann.boxes.iter().find(|b| !b.fits(image.height(), image.width())) {
        return Err(Error::Domain(format!(
            "box {:?} exceeds the {}x{} input",
            <[usize; 4]>::from(*b),
            image.height(),
            image.width()
        )));
    }
    let (heatmap, predicted, target_class, degenerate) = match cfg.method.variant() {
        Some(variant) => {
            let opts = ExplainOptions {
                target: cfg.target.spec(ann.class),
                variant,
                phi: cfg.phi,
                workers,
            };
            let r = explain(backend, &image, &opts)?;
            let target = r.scored_class();
            (r.heatmap, r.predicted_class, target, r.degenerate)
        }
        None => {
            let trace = backend.trace(&image)?;
            let heatmap = match cfg.method {
                Method::RawAttention => baseline_raw_attention(&trace, meta.patch)?,
                _ => baseline_rollout(&trace, meta.patch)?,
            };
            let predicted = backend.forward(&image)?.argmax();
            let target = match cfg.target {
                TargetMode::GroundTruth => ann.class,
                TargetMode::Class(c) => c,
                TargetMode::Predicted | TargetMode::FullOutput => predicted,
            };
            (heatmap, predicted, target, false)
        }
    };
    let hit = point_game(&heatmap, &ann.boxes)?;
    let found = bbox_from_heatmap(&heatmap, cfg.thres);
    let best_iou = ann.boxes.iter().map(|b| iou(&found, b)).fold(0.0, f64::max);
    let mrfp = perturbation_curve(backend, &image, &heatmap, target_class, Order::MostFirst, workers)?;
    let lrfp = perturbation_curve(backend, &image, &heatmap, target_class, Order::LeastFirst, workers)?;
    Ok(EvalRecord {
        image: ann.image.clone(),
        index,
        annotated_class: ann.class,
        predicted_class: predicted,
        target_class,
        mispredicted: predicted != ann.class,
        hit,
        iou: best_iou,
        mrfp: mrfp.mean,
        lrfp: lrfp.mean,
        degenerate,
    })
}

fn resolve(base_dir: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Scores every annotated image. Per-image failures are logged and counted;
/// only an unreadable annotation file is an error.
pub fn run_dataset(backend: &dyn Backend, annotations: &Path, cfg: &EvalConfig) -> Result<EvalOutcome> {
    let anns = parse_annotations(annotations)?;
    let base_dir = annotations.parent().unwrap_or(Path::new("."));
    let outer = cfg.workers.min(backend.concurrency()).clamp(1, anns.len().max(1));
    let inner = if outer > 1 { 1 } else { cfg.workers.max(1) };
    let results = map_ordered(&anns, outer, |i, ann| evaluate_image(backend, ann, i, base_dir, cfg, inner));

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (ann, res) in anns.iter().zip(results) {
        match res {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{}: {e}", ann.image);
                failures.push(Failure {
                    image: ann.image.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    records.sort_by(|a, b| a.image.cmp(&b.image).then(a.index.cmp(&b.index)));
    let report = aggregate(&records, failures, anns.len(), cfg);
    Ok(EvalOutcome { records, report })
}

/// Reduces records (already in canonical order) to the report.
pub fn aggregate(records: &[EvalRecord], failures: Vec<Failure>, total: usize, cfg: &EvalConfig) -> EvalReport {
    let scored: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| !(cfg.filter_mispredicted && r.mispredicted))
        .collect();
    let pct = |f: &dyn Fn(&EvalRecord) -> f64| -> Option<f64> {
        if scored.is_empty() {
            None
        } else {
            Some(100.0 * scored.iter().map(|r| f(r)).sum::<f64>() / scored.len() as f64)
        }
    };
    EvalReport {
        method: cfg.method,
        target: cfg.target.to_string(),
        phi: cfg.phi,
        thres: cfg.thres,
        filter_mispredicted: cfg.filter_mispredicted,
        total,
        failed: failures.len(),
        excluded: records.len() - scored.len(),
        scored: scored.len(),
        point_game_pct: pct(&|r| if r.hit { 1.0 } else { 0.0 }),
        miou_pct: pct(&|r| r.iou),
        mrfp_pct: pct(&|r| r.mrfp),
        lrfp_pct: pct(&|r| r.lrfp),
        failures,
    }
}

/// Writes records as JSON lines.
pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::format(None, e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
