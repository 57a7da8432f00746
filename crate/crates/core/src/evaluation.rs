//! tIoU, average precision and multi-threshold mAP reports.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::VideoPredictions;

/// Temporal IoU of two `(begin, end)` intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A scored prediction for one class, tagged with its video.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApPrediction {
    pub video: usize,
    pub begin: f64,
    pub end: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApGroundTruth {
    pub video: usize,
    pub begin: f64,
    pub end: f64,
}

/// AP pooled over videos: predictions only match ground truth of their own
/// video. `None` when there is neither ground truth nor any prediction.
pub fn pooled_average_precision(preds: &[ApPrediction], gts: &[ApGroundTruth], tau: f64) -> Option<f64> {
    if gts.is_empty() {
        return if preds.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.score
            .total_cmp(&pa.score)
            .then(pa.begin.total_cmp(&pb.begin))
            .then(pa.video.cmp(&pb.video))
            .then(pa.end.total_cmp(&pb.end))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    for (k, &i) in order.iter().enumerate() {
        let p = &preds[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] || g.video != p.video {
                continue;
            }
            let o = tiou((p.begin, p.end), (g.begin, g.end));
            if best.is_none_or(|(bo, _)| o > bo) {
                best = Some((o, j));
            }
        }
        if let Some((o, j)) = best {
            if o >= tau {
                matched[j] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    // Precision envelope, then area under the step curve.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some(ap)
}

/// Single-video AP over `(begin, end, score)` predictions and `(begin, end)`
/// ground truth.
pub fn average_precision(preds: &[(f64, f64, f64)], gts: &[(f64, f64)], tau: f64) -> Option<f64> {
    let p: Vec<ApPrediction> = preds
        .iter()
        .map(|&(begin, end, score)| ApPrediction {
            video: 0,
            begin,
            end,
            score,
        })
        .collect();
    let g: Vec<ApGroundTruth> = gts
        .iter()
        .map(|&(begin, end)| ApGroundTruth { video: 0, begin, end })
        .collect();
    pooled_average_precision(&p, &g, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tiou_thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiou_thresholds.is_empty() {
            return Err(Error::Config("at least one tIoU threshold is required".into()));
        }
        if self.tiou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("tIoU thresholds must lie in (0, 1]".into()));
        }
        if self.tiou_thresholds.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("tIoU thresholds must be sorted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// Class ids `1..=C`.
    pub classes: Vec<usize>,
    /// `ap[c][k]`: AP of class `classes[c]` at threshold `k`; `None` when the
    /// class is absent from both ground truth and predictions.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Mean over classes present in the ground truth, per threshold.
    pub map: Vec<f64>,
    /// Mean of `map`.
    pub average: f64,
    /// Classes with at least one ground-truth segment.
    pub present: Vec<bool>,
}

impl EvalReport {
    /// Mean AP of one class over thresholds.
    pub fn class_average(&self, c: usize) -> Option<f64> {
        let row = &self.ap[c];
        if row.iter().any(Option::is_none) {
            return None;
        }
        Some(row.iter().flatten().sum::<f64>() / row.len() as f64)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let mut header = vec!["class".to_string()];
        header.extend(self.thresholds.iter().map(|t| t.to_string()));
        header.push("Avg".into());
        w.write_record(&header)?;
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for (c, row) in self.classes.iter().zip(&self.ap) {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(|v| cell(*v)));
            rec.push(cell(self.class_average(self.classes.iter().position(|x| x == c).unwrap())));
            w.write_record(&rec)?;
        }
        let mut rec = vec!["mAP".to_string()];
        rec.extend(self.map.iter().map(|v| format!("{v:.6}")));
        rec.push(format!("{:.6}", self.average));
        w.write_record(&rec)?;
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:>6}", "class")?;
        for t in &self.thresholds {
            write!(f, " {:>7}", format!("@{t}"))?;
        }
        writeln!(f, " {:>7}", "Avg")?;
        for (i, c) in self.classes.iter().enumerate() {
            write!(f, "{c:>6}")?;
            for v in &self.ap[i] {
                match v {
                    Some(x) => write!(f, " {:>7.2}", 100.0 * x)?,
                    None => write!(f, " {:>7}", "-")?,
                }
            }
            match self.class_average(i) {
                Some(x) => writeln!(f, " {:>7.2}", 100.0 * x)?,
                None => writeln!(f, " {:>7}", "-")?,
            }
        }
        write!(f, "{:>6}", "mAP")?;
        for v in &self.map {
            write!(f, " {:>7.2}", 100.0 * v)?;
        }
        writeln!(f, " {:>7.2}", 100.0 * self.average)
    }
}

/// AP per `(class, threshold)` pooled over videos.
pub fn map_report(preds: &[VideoPredictions], gts: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let c_count = gts.class_count;
    let video_index: HashMap<&str, usize> = gts
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.video_id(), i))
        .collect();
    let mut p_by_class: Vec<Vec<ApPrediction>> = vec![Vec::new(); c_count + 1];
    for vp in preds {
        let video = *video_index
            .get(vp.video_id.as_str())
            .ok_or_else(|| Error::Validation(format!("predictions for unknown video {}", vp.video_id)))?;
        for s in &vp.segments {
            if s.class_id == 0 || s.class_id > c_count {
                return Err(Error::Validation(format!("predicted class {} outside 1..={c_count}", s.class_id)));
            }
            p_by_class[s.class_id].push(ApPrediction {
                video,
                begin: s.begin_s,
                end: s.end_s,
                score: s.score,
            });
        }
    }
    let mut g_by_class: Vec<Vec<ApGroundTruth>> = vec![Vec::new(); c_count + 1];
    for (video, r) in gts.records.iter().enumerate() {
        for s in &r.segments {
            g_by_class[s.class_id].push(ApGroundTruth {
                video,
                begin: s.begin_s,
                end: s.end_s,
            });
        }
    }
    let classes: Vec<usize> = (1..=c_count).collect();
    let present: Vec<bool> = classes.iter().map(|c| !g_by_class[*c].is_empty()).collect();
    let ap: Vec<Vec<Option<f64>>> = classes
        .iter()
        .map(|&c| {
            cfg.tiou_thresholds
                .iter()
                .map(|&t| pooled_average_precision(&p_by_class[c], &g_by_class[c], t))
                .collect()
        })
        .collect();
    let n_present = present.iter().filter(|p| **p).count();
    let map: Vec<f64> = (0..cfg.tiou_thresholds.len())
        .map(|k| {
            if n_present == 0 {
                return 0.0;
            }
            ap.iter()
                .zip(&present)
                .filter(|(_, p)| **p)
                .map(|(row, _)| row[k].unwrap_or(0.0))
                .sum::<f64>()
                / n_present as f64
        })
        .collect();
    let average = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        thresholds: cfg.tiou_thresholds.clone(),
        classes,
        ap,
        map,
        average,
        present,
    })
}
