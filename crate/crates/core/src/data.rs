//! Feature sequences, annotations, padding and source/target interleaving.
//!
//! Feature files use a small binary container:
//!
//! ```text
//! "SADF" | u32 version = 1 | u32 T | u32 F | T·F little-endian f32, row-major
//! ```
//!
//! Annotations are JSON lines, one video per line, with feature paths resolved
//! relative to the annotation file.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"SADF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Pre-extracted per-timestep features for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `T×F`.
    pub features: Array2<f32>,
    /// Seconds between consecutive feature steps.
    pub frame_stride_s: f64,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Array2<f32>, frame_stride_s: f64) -> Result<Self> {
        let seq = Self {
            video_id: video_id.into(),
            features,
            frame_stride_s,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 * self.frame_stride_s
    }

    pub fn validate(&self) -> Result<()> {
        let (t, f) = self.features.dim();
        if t == 0 || f == 0 {
            return Err(Error::Validation(format!(
                "video {}: empty feature matrix {t}x{f}",
                self.video_id
            )));
        }
        if !(self.frame_stride_s > 0.0 && self.frame_stride_s.is_finite()) {
            return Err(Error::Validation(format!(
                "video {}: frame stride must be positive, got {}",
                self.video_id, self.frame_stride_s
            )));
        }
        if let Some(pos) = self.features.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "video {}: non-finite feature at flat index {pos}",
                self.video_id
            )));
        }
        Ok(())
    }
}

/// A ground-truth action segment in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    #[serde(rename = "begin")]
    pub begin_s: f64,
    #[serde(rename = "end")]
    pub end_s: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
}

impl SegmentAnnotation {
    pub fn new(begin_s: f64, end_s: f64, class_id: usize) -> Self {
        Self {
            begin_s,
            end_s,
            class_id,
        }
    }

    pub fn len(&self) -> f64 {
        self.end_s - self.begin_s
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.begin_s + self.end_s)
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(self.begin_s < self.end_s) {
            return Err(Error::Validation(format!(
                "segment begin {} must precede end {}",
                self.begin_s, self.end_s
            )));
        }
        if self.class_id == 0 || self.class_id > class_count {
            return Err(Error::Validation(format!(
                "class {} outside [1, {class_count}]",
                self.class_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One video: features plus its segments. Target segments are held out for
/// evaluation and never reach a training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub features: FeatureSequence,
    pub segments: Vec<SegmentAnnotation>,
    pub domain: Domain,
}

impl VideoRecord {
    pub fn video_id(&self) -> &str {
        &self.features.video_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<VideoRecord>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn domain(&self) -> Option<Domain> {
        self.records.first().map(|r| r.domain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::Validation("class count must be positive".into()));
        }
        let domain = self.domain();
        for r in &self.records {
            r.features.validate()?;
            if Some(r.domain) != domain {
                return Err(Error::Validation("dataset mixes source and target records".into()));
            }
            if r.domain == Domain::Source && r.segments.is_empty() {
                return Err(Error::Validation(format!(
                    "source video {} has no segments",
                    r.video_id()
                )));
            }
            for seg in &r.segments {
                seg.validate(self.class_count)
                    .map_err(|e| Error::Validation(format!("video {}: {e}", r.video_id())))?;
            }
        }
        Ok(())
    }
}

/// Writes `seq` in the binary feature format.
pub fn write_feature_file(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    seq.validate()?;
    let (t, f) = seq.features.dim();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * t * f);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    bytes.extend_from_slice(&(f as u32).to_le_bytes());
    for x in seq.features.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a feature file. The video id is the file stem and the stride is
/// supplied by the caller (it lives in the annotation file).
pub fn read_feature_file(path: impl AsRef<Path>, frame_stride_s: f64) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(format!("header truncated at {} bytes", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(fmt(format!("magic {:?} is not \"SADF\"", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let (t, f) = (word(8) as usize, word(12) as usize);
    if t == 0 || f == 0 {
        return Err(fmt(format!("header declares empty matrix {t}x{f}")));
    }
    let need = HEADER_LEN + 4 * t * f;
    if bytes.len() < need {
        return Err(fmt(format!(
            "payload truncated: header needs {need} bytes, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features = Array2::from_shape_vec((t, f), data).expect("shape checked above");
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let seq = FeatureSequence {
        video_id,
        features,
        frame_stride_s,
    };
    seq.validate().map_err(|e| fmt(e.to_string()))?;
    Ok(seq)
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    video_id: String,
    feature_path: String,
    domain: Domain,
    frame_stride_s: f64,
    #[serde(default)]
    segments: Vec<SegmentAnnotation>,
}

/// Reads a JSON-lines annotation file and the feature files it references.
pub fn read_annotations(path: impl AsRef<Path>, class_count: usize, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: AnnotationLine = serde_json::from_str(&line).map_err(|e| {
            Error::Validation(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let feature_path = resolve(&base, &ann.feature_path);
        if !feature_path.exists() {
            return Err(Error::Validation(format!(
                "{}:{}: missing feature file {}",
                path.display(),
                lineno + 1,
                feature_path.display()
            )));
        }
        let mut features = read_feature_file(&feature_path, ann.frame_stride_s)?;
        features.video_id = ann.video_id;
        records.push(VideoRecord {
            features,
            segments: ann.segments,
            domain: ann.domain,
        });
    }
    let ds = Dataset {
        records,
        class_count,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes `dataset` as `dir/annotations.jsonl` plus `dir/features/<id>.sadf`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("features")).map_err(|e| Error::io(dir, e))?;
    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = BufWriter::new(file);
    for r in &dataset.records {
        let rel = format!("features/{}.sadf", r.video_id());
        write_feature_file(&r.features, dir.join(&rel))?;
        let line = AnnotationLine {
            video_id: r.video_id().to_string(),
            feature_path: rel,
            domain: r.domain,
            frame_stride_s: r.features.frame_stride_s,
            segments: r.segments.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(&ann_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&ann_path, e))?;
    Ok(ann_path)
}

/// One sequence fitted to a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    /// `T_max×F`, zero at padded rows.
    pub features: Array2<f64>,
    pub valid_mask: Vec<bool>,
    /// First source row kept (non-zero only for training crops).
    pub crop_start: usize,
}

/// Draws the crop start used by [`pad_or_crop`] for a sequence of length `t`.
pub fn crop_start(t: usize, t_max: usize, rng_seed: u64) -> usize {
    if t <= t_max {
        return 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.random_range(0..=t - t_max)
}

/// Pads with zero rows up to `t_max`, or takes a seeded random crop when the
/// sequence is longer and `training` is set. Longer sequences at evaluation
/// are truncated here; callers evaluate them window by window (see
/// [`windows`]).
pub fn pad_or_crop(features: &Array2<f32>, t_max: usize, training: bool, rng_seed: u64) -> Padded {
    let (t, f) = features.dim();
    let start = if training { crop_start(t, t_max, rng_seed) } else { 0 };
    let keep = t.saturating_sub(start).min(t_max);
    let mut out = Array2::zeros((t_max, f));
    out.slice_mut(s![..keep, ..])
        .assign(&features.slice(s![start..start + keep, ..]).mapv(f64::from));
    let mut valid_mask = vec![false; t_max];
    valid_mask[..keep].iter_mut().for_each(|m| *m = true);
    Padded {
        features: out,
        valid_mask,
        crop_start: start,
    }
}

/// Start rows of the non-overlapping evaluation windows covering `t` steps.
pub fn windows(t: usize, t_max: usize) -> Vec<usize> {
    (0..t.max(1)).step_by(t_max).collect()
}

/// Segments re-expressed relative to a crop starting at `offset_s` and
/// lasting `duration_s`; segments falling outside are dropped, partial ones
/// clipped.
pub fn shift_segments(
    segments: &[SegmentAnnotation],
    offset_s: f64,
    duration_s: f64,
) -> Vec<SegmentAnnotation> {
    segments
        .iter()
        .filter_map(|s| {
            let b = (s.begin_s - offset_s).max(0.0);
            let e = (s.end_s - offset_s).min(duration_s);
            (e > b).then_some(SegmentAnnotation::new(b, e, s.class_id))
        })
        .collect()
}

/// A batch of padded sequences.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    /// `B×T_max×F`.
    pub features: Array3<f64>,
    /// `B×T_max`.
    pub valid_mask: Array2<bool>,
    pub segments: Vec<Vec<SegmentAnnotation>>,
    pub frame_stride_s: Vec<f64>,
}

impl PaddedBatch {
    /// Pads (or crops, when `training`) every record to `t_max`. Crops draw
    /// their start from `seed + batch position`.
    pub fn from_records(records: &[&VideoRecord], t_max: usize, training: bool, seed: u64) -> Self {
        let f = records.first().map(|r| r.features.dim()).unwrap_or(0);
        let mut features = Array3::zeros((records.len(), t_max, f));
        let mut valid_mask = Array2::from_elem((records.len(), t_max), false);
        let mut segments = Vec::with_capacity(records.len());
        let mut strides = Vec::with_capacity(records.len());
        for (b, r) in records.iter().enumerate() {
            let p = pad_or_crop(&r.features.features, t_max, training, seed.wrapping_add(b as u64));
            features.slice_mut(s![b, .., ..]).assign(&p.features);
            for (t, m) in p.valid_mask.iter().enumerate() {
                valid_mask[[b, t]] = *m;
            }
            let stride = r.features.frame_stride_s;
            segments.push(shift_segments(
                &r.segments,
                p.crop_start as f64 * stride,
                t_max as f64 * stride,
            ));
            strides.push(stride);
        }
        Self {
            features,
            valid_mask,
            segments,
            frame_stride_s: strides,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn features_of(&self, b: usize) -> Array2<f64> {
        self.features.slice(s![b, .., ..]).to_owned()
    }

    pub fn mask_of(&self, b: usize) -> Vec<bool> {
        self.valid_mask.row(b).to_vec()
    }
}

/// Index pairs for one training iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// The per-epoch interleaving schedule.
///
/// The larger domain is shuffled once and visited exactly once; the smaller
/// one is cycled through fresh shuffles until the larger finishes. When the
/// larger domain does not divide evenly, the final batch is short on both
/// sides.
pub fn interleave_schedule(
    n_source: usize,
    n_target: usize,
    per_domain_batch: usize,
    rng_seed: u64,
) -> Result<Vec<DomainBatch>> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::Validation(format!(
            "interleaving needs both domains non-empty (source {n_source}, target {n_target})"
        )));
    }
    if per_domain_batch == 0 {
        return Err(Error::Validation("per-domain batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let total = n_source.max(n_target);
    let stream = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(total);
        while out.len() < total {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            out.extend(perm);
        }
        out.truncate(total);
        out
    };
    let src = stream(n_source, &mut rng);
    let tgt = stream(n_target, &mut rng);
    Ok(src
        .chunks(per_domain_batch)
        .zip(tgt.chunks(per_domain_batch))
        .map(|(s, t)| DomainBatch {
            source: s.to_vec(),
            target: t.to_vec(),
        })
        .collect())
}

/// Iterates one epoch of `(source batch, target batch)` record pairs.
pub fn interleave_domains<'a>(
    source: &'a Dataset,
    target: &'a Dataset,
    per_domain_batch: usize,
    rng_seed: u64,
) -> Result<impl Iterator<Item = (Vec<&'a VideoRecord>, Vec<&'a VideoRecord>)> + 'a> {
    let schedule = interleave_schedule(source.len(), target.len(), per_domain_batch, rng_seed)?;
    Ok(schedule.into_iter().map(move |b| {
        (
            b.source.iter().map(|i| &source.records[*i]).collect(),
            b.target.iter().map(|i| &target.records[*i]).collect(),
        )
    }))
}
