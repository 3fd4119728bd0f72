//! Saliency metrics (MAE, F-max, S-measure) and dataset evaluation.
//!
//! Maps are `[H, W]` or `[1, H, W]` tensors; predictions lie in `[0, 1]` and
//! ground truth is binarized at 0.5.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::media::{list_images, read_image, resize_to};
use crate::tensor::Tensor;

pub const BETA2: f64 = 0.3;
pub const S_ALPHA: f64 = 0.5;
/// Double-precision machine epsilon, the regularizer of the S-measure terms.
const EPS: f64 = f64::EPSILON;

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.dims() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        d => shape_err(format!(
            "saliency maps must be [H, W] or [1, H, W], got {d:?}"
        )),
    }
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize)> {
    let a = plane_dims(pred)?;
    let b = plane_dims(gt)?;
    if a != b {
        return shape_err(format!(
            "prediction {a:?} and ground truth {b:?} differ in size"
        ));
    }
    if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!(
            "prediction value {v} outside [0, 1]"
        )));
    }
    Ok(a)
}

fn binarize(gt: &Tensor) -> Vec<bool> {
    gt.data().iter().map(|&v| v > 0.5).collect()
}

/// Mean absolute error against the binarized ground truth.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(binarize(gt))
        .map(|(&p, g)| (p as f64 - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Quantization bucket `round(255 p)` of a prediction value.
fn bucket(p: f32) -> usize {
    (p as f64 * 255.0).round() as usize
}

/// Maximum F-measure (`β² = 0.3`) over the 256 thresholds `k = 0..=255`,
/// where a pixel is positive when its bucket `round(255 p)` is at least `k`.
/// A threshold with no predicted or no true positives scores 0.
pub fn f_max(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut fg = [0u64; 256];
    let mut bg = [0u64; 256];
    for (&p, g) in pred.data().iter().zip(binarize(gt)) {
        let b = bucket(p);
        if g {
            fg[b] += 1;
        } else {
            bg[b] += 1;
        }
    }
    let total_fg: u64 = fg.iter().sum();
    if total_fg == 0 {
        return Ok(0.0);
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best = 0.0f64;
    for k in (0..256).rev() {
        tp += fg[k];
        fp += bg[k];
        if tp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_fg as f64;
        let f = (1.0 + BETA2) * precision * recall / (BETA2 * precision + recall);
        best = best.max(f);
    }
    Ok(best)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt(), n)
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma, n) = mean_std(values);
    if n == 0 {
        return 0.0;
    }
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(p: &[f64], g: &[bool]) -> f64 {
    let fg = object_score(p.iter().zip(g).filter(|(_, &g)| g).map(|(&v, _)| v));
    let bg = object_score(p.iter().zip(g).filter(|(_, &g)| !g).map(|(&v, _)| 1.0 - v));
    let u = g.iter().filter(|&&v| v).count() as f64 / g.len() as f64;
    u * fg + (1.0 - u) * bg
}

/// Structural similarity of one region, as in the reference S-measure code.
fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let denom = n - 1.0 + EPS;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in p.iter().zip(g) {
        sx += (a - x) * (a - x);
        sy += (b - y) * (b - y);
        sxy += (a - x) * (b - y);
    }
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Rounded 1-based centroid `(X, Y)` of the foreground; the image centre when empty.
fn centroid(g: &[bool], h: usize, w: usize) -> (usize, usize) {
    let total = g.iter().filter(|&&v| v).count();
    if total == 0 {
        return (
            ((w as f64) / 2.0).round() as usize,
            ((h as f64) / 2.0).round() as usize,
        );
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    (
        (sx / total as f64).round() as usize,
        (sy / total as f64).round() as usize,
    )
}

fn s_region(p: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
    let (cx, cy) = centroid(g, h, w);
    let area = (h * w) as f64;
    let quads = [
        (0, cy, 0, cx),
        (0, cy, cx, w),
        (cy, h, 0, cx),
        (cy, h, cx, w),
    ];
    let mut q = 0.0;
    for (y0, y1, x0, x1) in quads {
        if y1 <= y0 || x1 <= x0 {
            continue;
        }
        let mut pp = Vec::with_capacity((y1 - y0) * (x1 - x0));
        let mut gg = Vec::with_capacity(pp.capacity());
        for y in y0..y1 {
            for x in x0..x1 {
                pp.push(p[y * w + x]);
                gg.push(if g[y * w + x] { 1.0 } else { 0.0 });
            }
        }
        let weight = ((y1 - y0) * (x1 - x0)) as f64 / area;
        q += weight * region_ssim(&pp, &gg);
    }
    q
}

/// Structure measure `α·S_object + (1−α)·S_region`, `α = 0.5`.
///
/// An empty mask scores `1 − mean(pred)`, a full mask `mean(pred)`; the
/// combined score is floored at 0.
pub fn s_measure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w) = check_pair(pred, gt)?;
    let g = binarize(gt);
    let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let fg = g.iter().filter(|&&v| v).count();
    let mean_p = p.iter().sum::<f64>() / p.len() as f64;
    if fg == 0 {
        return Ok(1.0 - mean_p);
    }
    if fg == g.len() {
        return Ok(mean_p);
    }
    let q = S_ALPHA * s_object(&p, &g) + (1.0 - S_ALPHA) * s_region(&p, &g, h, w);
    Ok(q.max(0.0))
}

/// F-max, S-measure and MAE of one map or the mean over many.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalRecord {
    pub f_max: f64,
    pub s_measure: f64,
    pub mae: f64,
}

impl EvalRecord {
    pub fn of(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        Ok(Self {
            f_max: f_max(pred, gt)?,
            s_measure: s_measure(pred, gt)?,
            mae: mae(pred, gt)?,
        })
    }

    pub fn mean(records: &[EvalRecord]) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            f_max: records.iter().map(|r| r.f_max).sum::<f64>() / n,
            s_measure: records.iter().map(|r| r.s_measure).sum::<f64>() / n,
            mae: records.iter().map(|r| r.mae).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEval {
    pub name: String,
    pub frames: usize,
    pub record: EvalRecord,
}

/// Which side of a pair lacked a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingSide {
    Prediction,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingFile {
    pub sequence: String,
    pub stem: String,
    pub missing: MissingSide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEval {
    pub sequences: Vec<SequenceEval>,
    /// Mean over sequences of the per-sequence means.
    pub mean: EvalRecord,
    pub missing: Vec<MissingFile>,
}

fn stem_map(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    Ok(list_images(dir)?
        .into_iter()
        .map(|p| {
            (
                p.file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                p,
            )
        })
        .collect())
}

fn sub_dirs(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            out.push(
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    out.sort();
    Ok(out)
}

fn load_map(path: &Path) -> Result<Tensor> {
    let t = read_image(path)?;
    if t.dims()[0] == 1 {
        return Ok(t);
    }
    // RGB maps are averaged to one channel
    let plane = t.dims()[1] * t.dims()[2];
    let d = t.data();
    Tensor::new(
        vec![1, t.dims()[1], t.dims()[2]],
        (0..plane)
            .map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0)
            .collect(),
    )
}

/// Evaluates every prediction against the ground truth of the same stem.
///
/// If `gt_dir` has subdirectories each one is a sequence, matched with the
/// subdirectory of the same name under `pred_dir`; otherwise both are flat
/// directories forming one sequence. Predictions are resized to the mask
/// size when they differ. Frames are averaged per sequence, then sequences
/// are averaged.
pub fn evaluate_dataset(
    pred_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
) -> Result<DatasetEval> {
    let (pred_dir, gt_dir) = (pred_dir.as_ref(), gt_dir.as_ref());
    if !gt_dir.is_dir() {
        return Err(Error::Eval(format!(
            "ground-truth directory {} not found",
            gt_dir.display()
        )));
    }
    if !pred_dir.is_dir() {
        return Err(Error::Eval(format!(
            "prediction directory {} not found",
            pred_dir.display()
        )));
    }
    let seqs = sub_dirs(gt_dir)?;
    let pairs: Vec<(String, PathBuf, PathBuf)> = if seqs.is_empty() {
        vec![(
            ".".to_string(),
            pred_dir.to_path_buf(),
            gt_dir.to_path_buf(),
        )]
    } else {
        seqs.into_iter()
            .map(|s| (s.clone(), pred_dir.join(&s), gt_dir.join(&s)))
            .collect()
    };

    let mut sequences = Vec::new();
    let mut missing = Vec::new();
    for (name, pdir, gdir) in pairs {
        let preds = stem_map(&pdir)?;
        let gts = stem_map(&gdir)?;
        let pred_stems: BTreeSet<&str> = preds.iter().map(|(s, _)| s.as_str()).collect();
        let gt_stems: BTreeSet<&str> = gts.iter().map(|(s, _)| s.as_str()).collect();
        for s in gt_stems.difference(&pred_stems) {
            missing.push(MissingFile {
                sequence: name.clone(),
                stem: s.to_string(),
                missing: MissingSide::Prediction,
            });
        }
        for s in pred_stems.difference(&gt_stems) {
            missing.push(MissingFile {
                sequence: name.clone(),
                stem: s.to_string(),
                missing: MissingSide::GroundTruth,
            });
        }
        let jobs: Vec<(&PathBuf, &PathBuf)> = gts
            .iter()
            .filter_map(|(s, g)| preds.iter().find(|(ps, _)| ps == s).map(|(_, p)| (p, g)))
            .collect();
        if jobs.is_empty() {
            continue;
        }
        let records: Vec<EvalRecord> = jobs
            .par_iter()
            .map(|(p, g)| {
                let gt = load_map(g)?;
                let mut pred = load_map(p)?;
                if pred.dims() != gt.dims() {
                    pred = resize_to(&pred, gt.dims()[1], gt.dims()[2])?.map(|v| v.clamp(0.0, 1.0));
                }
                EvalRecord::of(&pred, &gt)
            })
            .collect::<Result<_>>()?;
        sequences.push(SequenceEval {
            name,
            frames: records.len(),
            record: EvalRecord::mean(&records),
        });
    }
    if sequences.is_empty() {
        return Err(Error::Eval(format!(
            "no prediction matches a ground-truth file ({} unmatched)",
            missing.len()
        )));
    }
    let per_seq: Vec<EvalRecord> = sequences.iter().map(|s| s.record).collect();
    Ok(DatasetEval {
        mean: EvalRecord::mean(&per_seq),
        sequences,
        missing,
    })
}

impl DatasetEval {
    /// `sequence,frames,f_max,s_measure,mae` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,frames,f_max,s_measure,mae\n");
        for q in &self.sequences {
            let r = q.record;
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6}",
                q.name, q.frames, r.f_max, r.s_measure, r.mae
            )
            .unwrap();
        }
        let frames: usize = self.sequences.iter().map(|q| q.frames).sum();
        let r = self.mean;
        writeln!(
            s,
            "mean,{frames},{:.6},{:.6},{:.6}",
            r.f_max, r.s_measure, r.mae
        )
        .unwrap();
        s
    }

    /// Aligned plain-text table with the same columns as the CSV.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 5]> = self
            .sequences
            .iter()
            .map(|q| {
                [
                    q.name.clone(),
                    q.frames.to_string(),
                    format!("{:.3}", q.record.f_max),
                    format!("{:.3}", q.record.s_measure),
                    format!("{:.3}", q.record.mae),
                ]
            })
            .collect();
        rows.push([
            "mean".into(),
            self.sequences
                .iter()
                .map(|q| q.frames)
                .sum::<usize>()
                .to_string(),
            format!("{:.3}", self.mean.f_max),
            format!("{:.3}", self.mean.s_measure),
            format!("{:.3}", self.mean.mae),
        ]);
        let header = ["Sequence", "Frames", "F-max", "S-measure", "MAE"].map(String::from);
        let mut width = header.clone().map(|h| h.len());
        for r in &rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |r: &[String; 5]| {
            let mut s = format!("{:<w$}", r[0], w = width[0]);
            for (c, w) in r.iter().zip(width).skip(1) {
                write!(s, "  {c:>w$}").unwrap();
            }
            s.push('\n');
            s
        };
        let mut out = line(&header);
        out.push_str(&"-".repeat(width.iter().sum::<usize>() + 8));
        out.push('\n');
        for r in &rows {
            out.push_str(&line(r));
        }
        out
    }
}
