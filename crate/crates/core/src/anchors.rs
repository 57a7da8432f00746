//! Anchor grids, center-sampling assignment and offset coding.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::SegmentAnnotation;
use crate::error::{Error, Result};

/// Anchors of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub level: usize,
    /// Seconds between anchors at this level.
    pub stride_s: f64,
    pub anchor_times: Vec<f64>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchor_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_times.is_empty()
    }
}

/// Grids for `levels` levels over `t` base steps. Anchor `i` at level `l`
/// sits at `(i + 0.5) · 2^l · frame_stride_s`.
pub fn build_grids(t: usize, levels: usize, frame_stride_s: f64) -> Result<Vec<AnchorGrid>> {
    check_divisible(t, levels)?;
    Ok((0..levels)
        .map(|l| {
            let factor = 1usize << l;
            let stride_s = factor as f64 * frame_stride_s;
            AnchorGrid {
                level: l,
                stride_s,
                anchor_times: (0..t / factor).map(|i| (i as f64 + 0.5) * stride_s).collect(),
            }
        })
        .collect())
}

pub(crate) fn check_divisible(t: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Validation("at least one pyramid level is required".into()));
    }
    let div = 1usize << (levels - 1);
    if t == 0 || t % div != 0 {
        return Err(Error::Validation(format!(
            "length {t} is not divisible by 2^(L-1) = {div}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    /// Center-sampling radius in level strides.
    pub radius: f64,
    /// Base of the per-level regression ranges, in frame strides.
    pub range_base: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            radius: 1.5,
            range_base: 2.0,
        }
    }
}

/// Per-level `[lo, hi)` bounds on a segment's maximum offset from an anchor,
/// measured in frame strides. Level `l` takes `[2^l·base, 2^(l+1)·base)`; the
/// first level starts at 0 and the last is unbounded above.
pub fn regression_ranges(levels: usize, base: f64) -> Vec<(f64, f64)> {
    (0..levels)
        .map(|l| {
            let lo = if l == 0 { 0.0 } else { (1u64 << l) as f64 * base };
            let hi = if l + 1 == levels {
                f64::INFINITY
            } else {
                (1u64 << (l + 1)) as f64 * base
            };
            (lo, hi)
        })
        .collect()
}

/// Assignment for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMatch {
    /// 0 = background, otherwise the class id.
    pub class_target: Vec<usize>,
    /// `T_l×2` stride-normalised `(d_begin, d_end)`, zero at negatives.
    pub offset_target: Array2<f64>,
    pub positive_mask: Vec<bool>,
    /// Index of the matched segment.
    pub segment: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub levels: Vec<LevelMatch>,
}

impl MatchResult {
    pub fn positives(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.positive_mask.iter().filter(|p| **p).count())
            .sum()
    }
}

/// Center-sampling assignment.
///
/// Anchor `(l, t)` is positive for segment `s` when its time lies strictly
/// inside `center(s) ± radius·stride_l`, inside `[begin, end]`, and the larger
/// of its two offsets (in frame strides) falls in level `l`'s regression
/// range. Competing segments resolve to the shortest one, then the lowest
/// index.
pub fn match_anchors(
    grids: &[AnchorGrid],
    segments: &[SegmentAnnotation],
    frame_stride_s: f64,
    cfg: &MatchConfig,
) -> MatchResult {
    let ranges = regression_ranges(grids.len(), cfg.range_base);
    let levels = grids
        .iter()
        .zip(&ranges)
        .map(|(grid, &(lo, hi))| {
            let n = grid.len();
            let mut class_target = vec![0; n];
            let mut offset_target = Array2::zeros((n, 2));
            let mut positive_mask = vec![false; n];
            let mut matched = vec![None; n];
            for (i, &t) in grid.anchor_times.iter().enumerate() {
                let mut best: Option<(f64, usize)> = None;
                for (k, s) in segments.iter().enumerate() {
                    let half = cfg.radius * grid.stride_s;
                    let c = s.center();
                    if !(t > c - half && t < c + half) || t < s.begin_s || t > s.end_s {
                        continue;
                    }
                    let max_off = (t - s.begin_s).max(s.end_s - t) / frame_stride_s;
                    if max_off < lo || max_off >= hi {
                        continue;
                    }
                    if best.is_none_or(|(len, _)| s.len() < len) {
                        best = Some((s.len(), k));
                    }
                }
                if let Some((_, k)) = best {
                    let s = &segments[k];
                    let (db, de) = encode_offsets(t, s, grid.stride_s).expect("anchor inside segment");
                    class_target[i] = s.class_id;
                    offset_target[[i, 0]] = db;
                    offset_target[[i, 1]] = de;
                    positive_mask[i] = true;
                    matched[i] = Some(k);
                }
            }
            LevelMatch {
                class_target,
                offset_target,
                positive_mask,
                segment: matched,
            }
        })
        .collect();
    MatchResult { levels }
}

/// Stride-normalised distances from `anchor_time` back to the segment begin
/// and forward to its end.
pub fn encode_offsets(anchor_time: f64, segment: &SegmentAnnotation, stride_s: f64) -> Result<(f64, f64)> {
    if anchor_time < segment.begin_s || anchor_time > segment.end_s {
        return Err(Error::Validation(format!(
            "anchor {anchor_time} lies outside segment [{}, {}]",
            segment.begin_s, segment.end_s
        )));
    }
    Ok((
        (anchor_time - segment.begin_s) / stride_s,
        (segment.end_s - anchor_time) / stride_s,
    ))
}

/// Inverse of [`encode_offsets`]; returns `(begin, end)` in seconds.
pub fn decode_offsets(anchor_time: f64, offsets: (f64, f64), stride_s: f64) -> Result<(f64, f64)> {
    let (db, de) = offsets;
    if db < 0.0 || de < 0.0 {
        return Err(Error::Validation(format!("negative offsets ({db}, {de})")));
    }
    Ok((anchor_time - db * stride_s, anchor_time + de * stride_s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_times_follow_formula() {
        let g = build_grids(8, 2, 1.0).unwrap();
        assert_eq!(g[0].anchor_times, vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5]);
        assert_eq!(g[1].anchor_times, vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(build_grids(8, 1, 1.0).unwrap().len(), 1);
        assert!(build_grids(10, 3, 1.0).is_err());
        for grid in build_grids(64, 4, 0.5).unwrap() {
            assert!(grid.anchor_times.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn center_window_is_open() {
        let g = build_grids(8, 1, 1.0).unwrap();
        let m = match_anchors(&g, &[SegmentAnnotation::new(2.0, 6.0, 3)], 1.0, &MatchConfig::default());
        let pos: Vec<f64> = g[0]
            .anchor_times
            .iter()
            .zip(&m.levels[0].positive_mask)
            .filter(|(_, p)| **p)
            .map(|(t, _)| *t)
            .collect();
        assert_eq!(pos, vec![3.5, 4.5]);
        assert_eq!(m.levels[0].class_target[3], 3);
    }

    #[test]
    fn no_segments_all_background() {
        let g = build_grids(16, 3, 1.0).unwrap();
        let m = match_anchors(&g, &[], 1.0, &MatchConfig::default());
        assert_eq!(m.positives(), 0);
    }

    #[test]
    fn shortest_segment_wins() {
        let g = build_grids(16, 1, 1.0).unwrap();
        // Anchor 7.5 is inside both center windows.
        let segs = [SegmentAnnotation::new(4.0, 10.0, 1), SegmentAnnotation::new(6.5, 8.5, 2)];
        let cfg = MatchConfig { radius: 3.0, range_base: 2.0 };
        let m = match_anchors(&g, &segs, 1.0, &cfg);
        assert_eq!(m.levels[0].class_target[7], 2);
    }

    #[test]
    fn offsets_roundtrip_and_errors() {
        let s = SegmentAnnotation::new(2.0, 6.0, 1);
        assert_eq!(encode_offsets(4.0, &s, 1.0).unwrap(), (2.0, 2.0));
        assert_eq!(encode_offsets(2.0, &s, 1.0).unwrap(), (0.0, 4.0));
        assert_eq!(encode_offsets(4.0, &s, 2.0).unwrap(), (1.0, 1.0));
        assert!(encode_offsets(7.0, &s, 1.0).is_err());
        assert_eq!(decode_offsets(4.0, (2.0, 2.0), 1.0).unwrap(), (2.0, 6.0));
        assert_eq!(decode_offsets(4.0, (0.0, 0.0), 1.0).unwrap(), (4.0, 4.0));
        assert!(decode_offsets(4.0, (-1.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn ranges_cover_the_half_line() {
        let r = regression_ranges(4, 2.0);
        assert_eq!(r[0], (0.0, 4.0));
        assert_eq!(r[1], (4.0, 8.0));
        assert_eq!(r[3].1, f64::INFINITY);
    }
}
