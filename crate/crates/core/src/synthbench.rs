//! Paired source/target datasets with a controllable domain shift.
//!
//! Every class owns a fixed random unit prototype. Inside a class segment the
//! clean signal is the prototype scaled by a raised-cosine envelope sitting on
//! a pedestal; background steps carry no signal. Source features are
//! `clean + noise`; target features are `R·(clean + noise) + offset·u`, where
//! `R` rotates every vector by the configured angle inside a seeded random
//! orthonormal basis and `u` is a seeded random unit vector.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_dataset, Dataset, Domain, FeatureSequence, SegmentAnnotation, Split, VideoRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub rotation_angle_rad: f64,
    pub offset_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            rotation_angle_rad: 0.3,
            offset_scale: 3.0,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub class_count: usize,
    pub videos_per_domain: usize,
    /// Validation videos generated per domain by [`generate_splits`].
    pub val_videos_per_domain: usize,
    /// Timesteps per video.
    pub length: usize,
    pub feature_dim: usize,
    pub segments_per_video: (usize, usize),
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    pub min_gap: usize,
    pub frame_stride_s: f64,
    /// Peak amplitude of the class signal.
    pub signal_amplitude: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            class_count: 3,
            videos_per_domain: 40,
            val_videos_per_domain: 10,
            length: 64,
            feature_dim: 16,
            segments_per_video: (2, 4),
            min_segment_len: 3,
            max_segment_len: 12,
            min_gap: 2,
            frame_stride_s: 1.0,
            signal_amplitude: 1.5,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.class_count == 0 {
            return bad("class count must be at least 1".into());
        }
        if self.videos_per_domain == 0 {
            return bad("videos per domain must be at least 1".into());
        }
        if self.length == 0 || self.feature_dim == 0 {
            return bad("length and feature dim must be positive".into());
        }
        let (lo, hi) = self.segments_per_video;
        if lo == 0 || lo > hi {
            return bad(format!("segments per video range {lo}..{hi} is invalid"));
        }
        if self.min_segment_len == 0 || self.min_segment_len > self.max_segment_len {
            return bad("segment length range is invalid".into());
        }
        if !(self.frame_stride_s > 0.0) {
            return bad("frame stride must be positive".into());
        }
        let need = hi * self.min_segment_len + (hi - 1) * self.min_gap;
        if need > self.length {
            return Err(Error::Infeasible(format!(
                "{hi} segments of length >= {} with gap {} need {need} steps, video has {}",
                self.min_segment_len, self.min_gap, self.length
            )));
        }
        Ok(())
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !(self.offset_scale >= 0.0) {
            return Err(Error::Validation("noise and offset scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Source and target train/val splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub source_train: Dataset,
    pub source_val: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
}

impl Benchmark {
    pub fn class_count(&self) -> usize {
        self.source_train.class_count
    }

    pub fn split(&self, domain: Domain, split: Split) -> &Dataset {
        match (domain, split) {
            (Domain::Source, Split::Train) => &self.source_train,
            (Domain::Source, Split::Val) => &self.source_val,
            (Domain::Target, Split::Train) => &self.target_train,
            (Domain::Target, Split::Val) => &self.target_val,
        }
    }
}

struct World {
    prototypes: Vec<Array1<f64>>,
    rotation: Array2<f64>,
    offset_dir: Array1<f64>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rotation by `angle` in every plane spanned by consecutive vectors of a
/// random orthonormal basis. With an odd dimension the last axis is fixed.
fn random_rotation(dim: usize, angle: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            basis.push(v / n);
        }
    }
    let q = Array2::from_shape_fn((dim, dim), |(i, j)| basis[j][i]);
    let mut block = Array2::<f64>::eye(dim);
    let (c, s) = (angle.cos(), angle.sin());
    for k in 0..dim / 2 {
        let (a, b) = (2 * k, 2 * k + 1);
        block[[a, a]] = c;
        block[[a, b]] = -s;
        block[[b, a]] = s;
        block[[b, b]] = c;
    }
    q.dot(&block).dot(&q.t())
}

fn world(bench: &BenchSpec, shift: &ShiftSpec) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed ^ 0x5eed_0001);
    let prototypes = (0..bench.class_count)
        .map(|_| unit_vector(bench.feature_dim, &mut rng))
        .collect();
    let rotation = random_rotation(bench.feature_dim, shift.rotation_angle_rad, &mut rng);
    let offset_dir = unit_vector(bench.feature_dim, &mut rng);
    World {
        prototypes,
        rotation,
        offset_dir,
    }
}

/// Samples non-overlapping `(start, len, class)` placements.
fn place_segments(bench: &BenchSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize, usize)>> {
    let (lo, hi) = bench.segments_per_video;
    let k = rng.random_range(lo..=hi);
    let lens: Vec<usize> = (0..k)
        .map(|_| rng.random_range(bench.min_segment_len..=bench.max_segment_len))
        .collect();
    let used: usize = lens.iter().sum::<usize>() + (k - 1) * bench.min_gap;
    if used > bench.length {
        // Shrink to the minimum length when the draw does not fit.
        let min_used = k * bench.min_segment_len + (k - 1) * bench.min_gap;
        if min_used > bench.length {
            return Err(Error::Infeasible(format!(
                "{k} segments need {min_used} steps, video has {}",
                bench.length
            )));
        }
        return place_with(bench, vec![bench.min_segment_len; k], rng);
    }
    place_with(bench, lens, rng)
}

fn place_with(
    bench: &BenchSpec,
    lens: Vec<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize, usize)>> {
    let k = lens.len();
    let used: usize = lens.iter().sum::<usize>() + (k - 1) * bench.min_gap;
    let slack = bench.length - used;
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut pos = 0;
    let mut prev_cut = 0;
    for (i, len) in lens.into_iter().enumerate() {
        pos += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        let class = rng.random_range(1..=bench.class_count);
        out.push((pos, len, class));
        pos += len + bench.min_gap;
    }
    Ok(out)
}

/// Envelope value at step `k` of a segment of `len` steps.
pub fn envelope(k: usize, len: usize) -> f64 {
    let u = (k as f64 + 0.5) / len as f64;
    0.5 + 0.25 * (1.0 - (2.0 * std::f64::consts::PI * u).cos())
}

fn generate_domain(
    bench: &BenchSpec,
    shift: &ShiftSpec,
    w: &World,
    domain: Domain,
    split: Split,
    count: usize,
    stream: u64,
) -> Result<Dataset> {
    let mut records = Vec::with_capacity(count);
    for v in 0..count {
        let sub_seed = shift
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream << 32)
            .wrapping_add(v as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        let placements = place_segments(bench, &mut rng)?;
        let (t, f) = (bench.length, bench.feature_dim);
        let mut x = Array2::<f64>::zeros((t, f));
        for &(start, len, class) in &placements {
            let p = &w.prototypes[class - 1];
            for k in 0..len {
                let a = bench.signal_amplitude * envelope(k, len);
                let mut row = x.row_mut(start + k);
                row.scaled_add(a, p);
            }
        }
        x.mapv_inplace(|c| c + shift.noise_sigma * { let z: f64 = StandardNormal.sample(&mut rng); z });
        if domain == Domain::Target {
            x = x.dot(&w.rotation.t());
            let off = &w.offset_dir * shift.offset_scale;
            for mut row in x.rows_mut() {
                row += &off;
            }
        }
        let segments = placements
            .iter()
            .map(|&(start, len, class)| {
                SegmentAnnotation::new(
                    start as f64 * bench.frame_stride_s,
                    (start + len) as f64 * bench.frame_stride_s,
                    class,
                )
            })
            .collect();
        let video_id = format!("{domain}_{split}_{v:04}");
        records.push(VideoRecord {
            features: FeatureSequence::new(video_id, x.mapv(|a| a as f32), bench.frame_stride_s)?,
            segments,
            domain,
        });
    }
    Ok(Dataset {
        records,
        class_count: bench.class_count,
        split,
    })
}

/// Generates `videos_per_domain` training videos per domain.
pub fn generate_benchmark(bench: &BenchSpec, shift: &ShiftSpec) -> Result<(Dataset, Dataset)> {
    bench.validate()?;
    shift.validate()?;
    let w = world(bench, shift);
    let n = bench.videos_per_domain;
    let source = generate_domain(bench, shift, &w, Domain::Source, Split::Train, n, 1)?;
    let target = generate_domain(bench, shift, &w, Domain::Target, Split::Train, n, 2)?;
    Ok((source, target))
}

/// Generates train and validation splits for both domains.
pub fn generate_splits(bench: &BenchSpec, shift: &ShiftSpec) -> Result<Benchmark> {
    let (source_train, target_train) = generate_benchmark(bench, shift)?;
    let w = world(bench, shift);
    let nv = bench.val_videos_per_domain.max(1);
    Ok(Benchmark {
        source_train,
        target_train,
        source_val: generate_domain(bench, shift, &w, Domain::Source, Split::Val, nv, 3)?,
        target_val: generate_domain(bench, shift, &w, Domain::Target, Split::Val, nv, 4)?,
    })
}

/// Writes `{source,target}/{train,val}/` plus `bench.json` under `dir`.
pub fn write_benchmark(
    bench_data: &Benchmark,
    bench: &BenchSpec,
    shift: &ShiftSpec,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    for domain in [Domain::Source, Domain::Target] {
        for split in [Split::Train, Split::Val] {
            write_dataset(
                bench_data.split(domain, split),
                dir.join(domain.to_string()).join(split.to_string()),
            )?;
        }
    }
    let meta = BenchMeta {
        bench: bench.clone(),
        shift: shift.clone(),
    };
    let path = dir.join("bench.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchMeta {
    pub bench: BenchSpec,
    pub shift: ShiftSpec,
}

/// Loads a directory written by [`write_benchmark`].
pub fn read_benchmark(dir: impl AsRef<Path>) -> Result<(Benchmark, BenchMeta)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("bench.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BenchMeta = serde_json::from_str(&text)?;
    let c = meta.bench.class_count;
    let load = |d: &str, s: Split| {
        crate::data::read_annotations(dir.join(d).join(s.to_string()).join("annotations.jsonl"), c, s)
    };
    let b = Benchmark {
        source_train: load("source", Split::Train)?,
        source_val: load("source", Split::Val)?,
        target_train: load("target", Split::Train)?,
        target_val: load("target", Split::Val)?,
    };
    Ok((b, meta))
}

/// Per-class segment statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub video_count: usize,
    /// Index `i` holds class `i + 1`.
    pub segment_counts: Vec<usize>,
    pub mean_length_s: Vec<f64>,
}

pub fn summarize(dataset: &Dataset) -> DatasetSummary {
    let c = dataset.class_count;
    let mut counts = vec![0usize; c];
    let mut total = vec![0.0; c];
    for r in &dataset.records {
        for s in &r.segments {
            if (1..=c).contains(&s.class_id) {
                counts[s.class_id - 1] += 1;
                total[s.class_id - 1] += s.len();
            }
        }
    }
    DatasetSummary {
        video_count: dataset.len(),
        mean_length_s: counts
            .iter()
            .zip(&total)
            .map(|(n, t)| if *n > 0 { t / *n as f64 } else { 0.0 })
            .collect(),
        segment_counts: counts,
    }
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "videos: {}", self.video_count)?;
        writeln!(f, "{:>6} {:>9} {:>12}", "class", "segments", "mean len (s)")?;
        for (i, (n, m)) in self.segment_counts.iter().zip(&self.mean_length_s).enumerate() {
            writeln!(f, "{:>6} {:>9} {:>12.2}", i + 1, n, m)?;
        }
        Ok(())
    }
}

/// Mean feature vector of in-segment steps, per class (keyed by class id).
pub fn class_means(dataset: &Dataset) -> BTreeMap<usize, (Array1<f64>, usize)> {
    let mut acc: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
    for r in &dataset.records {
        let stride = r.features.frame_stride_s;
        for s in &r.segments {
            let b = (s.begin_s / stride).round() as usize;
            let e = ((s.end_s / stride).round() as usize).min(r.features.len());
            let entry = acc
                .entry(s.class_id)
                .or_insert_with(|| (Array1::zeros(r.features.dim()), 0));
            for t in b..e {
                entry.0 += &r.features.features.row(t).mapv(f64::from);
                entry.1 += 1;
            }
        }
    }
    for (sum, n) in acc.values_mut() {
        if *n > 0 {
            *sum /= *n as f64;
        }
    }
    acc
}
