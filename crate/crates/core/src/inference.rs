//! Decoding EMA-model outputs into scored segments, Gaussian SoftNMS, and
//! oracle background-anchor masking.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{build_grids, decode_offsets, match_anchors};
use crate::autograd::logistic;
use crate::data::{pad_or_crop, shift_segments, windows, Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::evaluation::tiou;
use crate::nn::{Ctx, ParamStore};
use crate::training::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub begin_s: f64,
    pub end_s: f64,
    pub class_id: usize,
    pub score: f64,
    pub level: usize,
    pub anchor: usize,
}

impl ScoredSegment {
    fn interval(&self) -> (f64, f64) {
        (self.begin_s, self.end_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsConfig {
    pub sigma: f64,
    pub iou_threshold: f64,
    pub min_score: f64,
    pub max_per_video: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.4,
            iou_threshold: 0.1,
            min_score: 0.001,
            max_per_video: 200,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config("nms sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) || !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::Config("nms thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub pre_nms_threshold: f64,
    pub pre_nms_topk: usize,
    /// Fraction of GT-background anchors removed before decoding.
    pub mask_background: f64,
    pub mask_seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            pre_nms_threshold: 0.01,
            pre_nms_topk: 200,
            mask_background: 0.0,
            mask_seed: 0,
        }
    }
}

/// Keep-mask that drops `round(fraction · n)` of the `n` valid background
/// anchors (class target 0), chosen by a seeded shuffle.
pub fn background_keep_mask(class_target: &[usize], valid: &[bool], fraction: f64, seed: u64) -> Vec<bool> {
    let mut keep = vec![true; class_target.len()];
    if fraction <= 0.0 {
        return keep;
    }
    let mut bkg: Vec<usize> = (0..class_target.len())
        .filter(|&i| valid[i] && class_target[i] == 0)
        .collect();
    let n_remove = ((fraction.min(1.0) * bkg.len() as f64).round() as usize).min(bkg.len());
    bkg.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for &i in &bkg[..n_remove] {
        keep[i] = false;
    }
    keep
}

/// Drops predictions whose source anchor was selected for background masking.
/// `class_targets[l]` holds the GT match of every anchor at level `l`.
pub fn mask_background(
    preds: &[ScoredSegment],
    class_targets: Option<&[Vec<usize>]>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<ScoredSegment>> {
    if fraction <= 0.0 {
        return Ok(preds.to_vec());
    }
    let targets = class_targets.ok_or_else(|| Error::Validation("background masking needs anchor match info".into()))?;
    let keeps: Vec<Vec<bool>> = targets
        .iter()
        .enumerate()
        .map(|(l, t)| background_keep_mask(t, &vec![true; t.len()], fraction, level_seed(seed, l)))
        .collect();
    Ok(preds
        .iter()
        .filter(|p| keeps.get(p.level).and_then(|k| k.get(p.anchor)).copied().unwrap_or(true))
        .copied()
        .collect())
}

fn level_seed(seed: u64, level: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(level as u64)
}

/// Scores and decodes every anchor of one record with the given weights.
/// Sequences longer than `t_max` are decoded window by window.
pub fn predict_raw(model: &Model, store: &ParamStore, record: &VideoRecord, cfg: &PredictConfig) -> Result<Vec<ScoredSegment>> {
    let mc = &model.config;
    if store.len() == 0 {
        return Err(Error::Validation("no weights to predict with".into()));
    }
    let stride = record.features.frame_stride_s;
    let duration = record.features.duration_s();
    let grids = build_grids(mc.t_max, mc.levels, stride)?;
    let mut all = Vec::new();
    for (w, start) in windows(record.features.len(), mc.t_max).into_iter().enumerate() {
        let offset_s = start as f64 * stride;
        let slice = record.features.features.slice(ndarray::s![start.., ..]).to_owned();
        let p = pad_or_crop(&slice, mc.t_max, false, 0);
        let mut ctx = Ctx::new(store);
        let out = model.forward(&mut ctx, &p.features, &p.valid_mask)?;
        let keeps: Option<Vec<Vec<bool>>> = (cfg.mask_background > 0.0).then(|| {
            let segs = shift_segments(&record.segments, offset_s, mc.t_max as f64 * stride);
            match_anchors(&grids, &segs, stride, &mc.matching)
                .levels
                .iter()
                .enumerate()
                .map(|(l, m)| {
                    let seed = level_seed(cfg.mask_seed ^ (w as u64) << 32, l);
                    background_keep_mask(&m.class_target, &out.features.masks[l], cfg.mask_background, seed)
                })
                .collect()
        });
        for (l, grid) in grids.iter().enumerate() {
            let logits = ctx.g.value(out.logits[l]);
            let offsets = ctx.g.value(out.offsets[l]);
            let mask = &out.features.masks[l];
            let mut level_preds = Vec::new();
            for (i, &t) in grid.anchor_times.iter().enumerate() {
                if !mask[i] || keeps.as_ref().is_some_and(|k| !k[l][i]) {
                    continue;
                }
                for c in 0..model.class_count {
                    let prob = logistic(logits[[i, c]]);
                    if !(prob > cfg.pre_nms_threshold) {
                        continue;
                    }
                    let (b, e) = decode_offsets(t, (offsets[[i, 0]], offsets[[i, 1]]), grid.stride_s)?;
                    let b = (b + offset_s).clamp(0.0, duration);
                    let e = (e + offset_s).clamp(0.0, duration);
                    if e <= b {
                        continue;
                    }
                    level_preds.push(ScoredSegment {
                        begin_s: b,
                        end_s: e,
                        class_id: c + 1,
                        score: prob,
                        level: l,
                        anchor: i + start / (1 << l),
                    });
                }
            }
            level_preds.sort_by(|a, b| b.score.total_cmp(&a.score));
            level_preds.truncate(cfg.pre_nms_topk);
            all.extend(level_preds);
        }
    }
    Ok(all)
}

/// Class-agnostic Gaussian SoftNMS. Returns the survivors in selection order.
pub fn soft_nms(preds: &[ScoredSegment], cfg: &NmsConfig) -> Vec<ScoredSegment> {
    let mut rest: Vec<ScoredSegment> = preds.to_vec();
    let mut out = Vec::with_capacity(rest.len());
    while !rest.is_empty() {
        let mut best = 0;
        for (i, p) in rest.iter().enumerate() {
            if p.score > rest[best].score {
                best = i;
            }
        }
        let top = rest.remove(best);
        for p in rest.iter_mut() {
            let o = tiou(top.interval(), p.interval());
            if o > cfg.iou_threshold {
                p.score *= (-o * o / cfg.sigma).exp();
            }
        }
        out.push(top);
    }
    out.retain(|p| p.score >= cfg.min_score);
    out.truncate(cfg.max_per_video);
    out
}

/// Final predictions for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPredictions {
    pub video_id: String,
    pub segments: Vec<ScoredSegment>,
}

/// `predict_raw` then `soft_nms` for every record, in parallel across videos.
pub fn predict_dataset(
    model: &Model,
    store: &ParamStore,
    dataset: &Dataset,
    cfg: &PredictConfig,
    nms: &NmsConfig,
) -> Result<Vec<VideoPredictions>> {
    dataset
        .records
        .par_iter()
        .map(|r| {
            let raw = predict_raw(model, store, r, cfg)?;
            Ok(VideoPredictions {
                video_id: r.video_id().to_string(),
                segments: soft_nms(&raw, nms),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionLine {
    video_id: String,
    begin: f64,
    end: f64,
    class: usize,
    score: f64,
}

/// One JSON object per line: `video_id, begin, end, class, score`.
pub fn write_predictions(preds: &[VideoPredictions], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for vp in preds {
        for s in &vp.segments {
            let line = PredictionLine {
                video_id: vp.video_id.clone(),
                begin: s.begin_s,
                end: s.end_s,
                class: s.class_id,
                score: s.score,
            };
            serde_json::to_writer(&mut w, &line)?;
            writeln!(w).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads predictions back, grouped by video in first-seen order.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<VideoPredictions>> {
    let path = path.as_ref();
    let f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out: Vec<VideoPredictions> = Vec::new();
    for line in f.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line)?;
        let seg = ScoredSegment {
            begin_s: p.begin,
            end_s: p.end,
            class_id: p.class,
            score: p.score,
            level: 0,
            anchor: 0,
        };
        match out.iter_mut().find(|v| v.video_id == p.video_id) {
            Some(v) => v.segments.push(seg),
            None => out.push(VideoPredictions {
                video_id: p.video_id,
                segments: vec![seg],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(b: f64, e: f64, s: f64) -> ScoredSegment {
        ScoredSegment {
            begin_s: b,
            end_s: e,
            class_id: 1,
            score: s,
            level: 0,
            anchor: 0,
        }
    }

    #[test]
    fn soft_nms_examples() {
        let cfg = NmsConfig::default();
        let one = soft_nms(&[seg(0.0, 1.0, 0.5)], &cfg);
        assert_eq!(one, vec![seg(0.0, 1.0, 0.5)]);

        let out = soft_nms(&[seg(0.0, 10.0, 0.9), seg(1.0, 9.0, 0.8)], &cfg);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-1.6f64).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.1615).abs() < 1e-4);
        assert_eq!((out[1].begin_s, out[1].end_s), (1.0, 9.0));

        let out = soft_nms(&[seg(0.0, 1.0, 0.3), seg(5.0, 6.0, 0.7)], &cfg);
        assert_eq!(out.iter().map(|p| p.score).collect::<Vec<_>>(), vec![0.7, 0.3]);
    }

    #[test]
    fn background_mask_counts() {
        let targets = vec![0; 10];
        let valid = vec![true; 10];
        assert!(background_keep_mask(&targets, &valid, 0.0, 1).iter().all(|k| *k));
        let k = background_keep_mask(&targets, &valid, 0.5, 1);
        assert_eq!(k.iter().filter(|k| !**k).count(), 5);
        assert_eq!(k, background_keep_mask(&targets, &valid, 0.5, 1));
        let mixed = vec![0, 2, 0, 1];
        let k = background_keep_mask(&mixed, &[true; 4], 1.0, 3);
        assert_eq!(k, vec![false, true, false, true]);
    }

    #[test]
    fn mask_background_requires_match_info() {
        let p = [seg(0.0, 1.0, 0.5)];
        assert_eq!(mask_background(&p, None, 0.0, 0).unwrap(), p.to_vec());
        assert!(mask_background(&p, None, 0.5, 0).is_err());
        let t = vec![vec![0usize]];
        assert!(mask_background(&p, Some(&t), 1.0, 0).unwrap().is_empty());
    }

    #[test]
    fn predictions_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let preds = vec![VideoPredictions {
            video_id: "v".into(),
            segments: vec![ScoredSegment {
                class_id: 2,
                ..seg(1.0, 2.0, 0.25)
            }],
        }];
        write_predictions(&preds, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), preds);
    }
}
