//! Min-max training: model assembly, total loss, AdamW with warmup + cosine
//! schedule, EMA weights, early stopping, metric logs and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    bkg_align_loss, global_level_loss, group_anchors, local_align_loss, mstn_centroid_loss,
    pseudo_labels, write_embedding_rows, CentroidState, ClassConditioning, ConditioningMode,
    DomainDiscriminator,
};
use crate::anchors::{build_grids, match_anchors, LevelMatch, MatchConfig};
use crate::autograd::{logistic, Var};
use crate::data::{interleave_schedule, pad_or_crop, shift_segments, windows, Dataset, Domain, PaddedBatch, VideoRecord};
use crate::error::{Error, Result};
use crate::evaluation::{map_report, EvalConfig};
use crate::heads::{level_losses, task_loss, HeadConfig, Heads, TaskLossWeights};
use crate::inference::{background_keep_mask, predict_dataset, NmsConfig, PredictConfig};
use crate::nn::{Ctx, ParamGroup, ParamStore};
use crate::pyramid::{Pyramid, PyramidConfig, PyramidFeatures};

/// Scale of the gradient reversal.
pub const GRL_LAMBDA: f64 = 1.0;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub head_layers: usize,
    pub disc_hidden: usize,
    pub conditioning: ConditioningMode,
    /// Padded training length; must be divisible by `2^(levels-1)`.
    pub t_max: usize,
    pub matching: MatchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 6,
            input_dim: 16,
            feature_dim: 64,
            head_layers: 3,
            disc_hidden: 512,
            conditioning: ConditioningMode::Learnable,
            t_max: 64,
            matching: MatchConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn pyramid(&self) -> PyramidConfig {
        PyramidConfig {
            levels: self.levels,
            input_dim: self.input_dim,
            feature_dim: self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 || self.levels > 16 {
            return bad(format!("levels must be in 1..=16, got {}", self.levels));
        }
        if self.input_dim == 0 || self.feature_dim == 0 || self.disc_hidden == 0 || self.head_layers == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.t_max == 0 || self.t_max % (1 << (self.levels - 1)) != 0 {
            return bad(format!(
                "t_max {} is not a positive multiple of 2^(levels-1) = {}",
                self.t_max,
                1usize << (self.levels - 1)
            ));
        }
        if !(self.matching.radius > 0.0) || !(self.matching.range_base > 0.0) {
            return bad("matching radius and range_base must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossFlags {
    pub local: bool,
    pub global: bool,
    pub bkg: bool,
    pub mstn: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::SADA
    }
}

impl LossFlags {
    pub const NONE: Self = Self {
        local: false,
        global: false,
        bkg: false,
        mstn: false,
    };
    pub const SADA: Self = Self {
        local: true,
        global: false,
        bkg: true,
        mstn: false,
    };
    pub const DANN: Self = Self {
        local: false,
        global: true,
        bkg: false,
        mstn: false,
    };
    pub const MSTN: Self = Self {
        local: false,
        global: false,
        bkg: false,
        mstn: true,
    };

    pub fn any(&self) -> bool {
        self.local || self.global || self.bkg || self.mstn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub per_domain_batch: usize,
    pub ema_decay: f64,
    /// Ramp the EMA decay in over the first steps.
    pub ema_warmup: bool,
    pub lambda_task: f64,
    pub lambda_sada: f64,
    pub lambda_cls: f64,
    pub lambda_loc: f64,
    pub level_weights: Vec<f64>,
    pub alpha: f64,
    pub seed: u64,
    pub loss_flags: LossFlags,
    pub mstn_decay: f64,
    pub patience: usize,
    /// Return the EMA weights of the epoch with the lowest source-val loss
    /// instead of those at the stopping epoch.
    pub restore_best: bool,
    /// Fraction of source background anchors dropped from every loss.
    pub mask_background: f64,
    /// Evaluate target-val mAP after every epoch when labels exist.
    pub log_val_map: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-4,
            weight_decay: 0.05,
            warmup_epochs: 5,
            per_domain_batch: 2,
            ema_decay: 0.999,
            ema_warmup: true,
            lambda_task: 1.0,
            lambda_sada: 1.0,
            lambda_cls: 1.0,
            lambda_loc: 1.0,
            level_weights: vec![1.0; 6],
            alpha: 0.6,
            seed: 0,
            loss_flags: LossFlags::SADA,
            mstn_decay: 0.7,
            patience: 10,
            restore_best: false,
            mask_background: 0.0,
            log_val_map: true,
        }
    }
}

impl TrainConfig {
    pub fn alignment_active(&self) -> bool {
        self.lambda_sada > 0.0 && self.loss_flags.any()
    }

    pub fn task_weights(&self) -> TaskLossWeights {
        TaskLossWeights {
            lambda_cls: self.lambda_cls,
            lambda_loc: self.lambda_loc,
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.per_domain_batch == 0 {
            return bad("epochs and per_domain_batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(0.0..=1.0).contains(&self.mstn_decay) {
            return bad("decays must lie in [0, 1]".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        for (name, v) in [
            ("lambda_task", self.lambda_task),
            ("lambda_sada", self.lambda_sada),
            ("lambda_cls", self.lambda_cls),
            ("lambda_loc", self.lambda_loc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.level_weights.len() != levels {
            return bad(format!(
                "level_weights has {} entries but the model has {levels} levels",
                self.level_weights.len()
            ));
        }
        if self.level_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("level_weights must be finite and nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.mask_background) {
            return bad("mask_background must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// The detector plus its adversarial parts. Parameter values live in a
/// separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub class_count: usize,
    pub pyramid: Pyramid,
    pub heads: Heads,
    pub conditioning: ClassConditioning,
    pub disc: DomainDiscriminator,
}

/// Forward outputs for one sequence.
#[derive(Debug, Clone)]
pub struct VideoOutput {
    pub features: PyramidFeatures,
    pub logits: Vec<Var>,
    pub offsets: Vec<Var>,
}

impl Model {
    /// Builds the model; every initial value is drawn from `seed`.
    pub fn new(config: &ModelConfig, class_count: usize, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if class_count == 0 {
            return Err(Error::Config("class_count must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pyramid = Pyramid::new(config.pyramid(), &mut store, &mut rng);
        let heads = Heads::new(
            &HeadConfig {
                conv_layers: config.head_layers,
                class_count,
            },
            config.feature_dim,
            &mut store,
            &mut rng,
        );
        let conditioning =
            ClassConditioning::new(config.conditioning, class_count, config.feature_dim, &mut store, &mut rng);
        let disc = DomainDiscriminator::new(config.levels, config.feature_dim, config.disc_hidden, &mut store, &mut rng);
        Ok((
            Self {
                config: config.clone(),
                class_count,
                pyramid,
                heads,
                conditioning,
                disc,
            },
            store,
        ))
    }

    pub fn forward(&self, ctx: &mut Ctx, features: &Array2<f64>, mask: &[bool]) -> Result<VideoOutput> {
        let feats = self.pyramid.forward(ctx, features, mask)?;
        let mut logits = Vec::with_capacity(feats.len());
        let mut offsets = Vec::with_capacity(feats.len());
        for (z, m) in feats.levels.iter().zip(&feats.masks) {
            logits.push(self.heads.classify(ctx, *z, m));
            offsets.push(self.heads.localize(ctx, *z, m));
        }
        Ok(VideoOutput {
            features: feats,
            logits,
            offsets,
        })
    }
}

/// Live weights, the detector EMA copy, optimizer moments and counters.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub model: Model,
    pub params: ParamStore,
    /// Detector parameters only; adversarial slots are empty.
    pub ema: ParamStore,
    pub adam_m: Vec<Array2<f64>>,
    pub adam_v: Vec<Array2<f64>>,
    pub adam_t: Vec<u64>,
    pub step: u64,
    pub centroids: CentroidState,
    pub seed: u64,
}

impl ModelState {
    pub fn new(config: &ModelConfig, class_count: usize, seed: u64, mstn_decay: f64) -> Result<Self> {
        let (model, params) = Model::new(config, class_count, seed)?;
        let ema = params.restricted_to(ParamGroup::Detector);
        let zeros: Vec<Array2<f64>> = params.values().iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        Ok(Self {
            centroids: CentroidState::new(config.levels, class_count, mstn_decay),
            adam_t: vec![0; params.len()],
            adam_m: zeros.clone(),
            adam_v: zeros,
            ema,
            params,
            model,
            step: 0,
            seed,
        })
    }
}

/// `λ_task·task + λ_sada·sada`.
pub fn total_loss(task: f64, sada: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_task * task + cfg.lambda_sada * sada
}

/// Step counts of the learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        let total = (cfg.epochs * steps_per_epoch) as u64;
        Self {
            warmup_steps: ((cfg.warmup_epochs * steps_per_epoch) as u64).min(total),
            total_steps: total,
        }
    }
}

/// Linear warmup from 0, then cosine decay reaching 0 at the final step.
pub fn lr_at(step: u64, base_lr: f64, schedule: &Schedule) -> f64 {
    let Schedule {
        warmup_steps: w,
        total_steps: n,
    } = *schedule;
    if step < w {
        return base_lr * step as f64 / w as f64;
    }
    if n <= w {
        return base_lr;
    }
    let progress = ((step - w) as f64 / (n - w) as f64).min(1.0);
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `ema ← decay·ema + (1−decay)·live`.
pub fn ema_update(live: &Array2<f64>, ema: &mut Array2<f64>, decay: f64) -> Result<()> {
    if live.dim() != ema.dim() {
        return Err(Error::Validation(format!(
            "EMA shape {:?} does not match live shape {:?}",
            ema.dim(),
            live.dim()
        )));
    }
    ema.zip_mut_with(live, |e, l| *e = decay * *e + (1.0 - decay) * *l);
    Ok(())
}

/// Decay actually applied at `step` when warmup is enabled.
pub fn effective_ema_decay(decay: f64, step: u64, warmup: bool) -> f64 {
    if warmup {
        decay.min((1.0 + step as f64) / (10.0 + step as f64))
    } else {
        decay
    }
}

/// One AdamW update with decoupled weight decay.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    t: &mut u64,
    lr: f64,
    weight_decay: f64,
) {
    *t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
    param.mapv_inplace(|p| p * (1.0 - lr * weight_decay));
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        });
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub lr: f64,
    pub task_loss: f64,
    pub sada_loss: f64,
    pub total_loss: f64,
    /// Fraction of valid target anchors pseudo-labelled as an action; `None`
    /// when no target forward ran.
    pub pseudo_action_frac: Option<f64>,
}

fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stacks per-video level outputs into per-level matrices.
struct Stacked {
    z: Vec<Var>,
    logits: Vec<Var>,
    offsets: Vec<Var>,
    /// Labels: GT classes for source, pseudo-labels for target.
    labels: Vec<Vec<usize>>,
    valid: Vec<Vec<bool>>,
    matches: Vec<LevelMatch>,
}

fn stack(ctx: &mut Ctx, outs: &[VideoOutput], levels: usize) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
    let mut z = Vec::with_capacity(levels);
    let mut logits = Vec::with_capacity(levels);
    let mut offsets = Vec::with_capacity(levels);
    for l in 0..levels {
        let zs: Vec<Var> = outs.iter().map(|o| o.features.levels[l]).collect();
        let ls: Vec<Var> = outs.iter().map(|o| o.logits[l]).collect();
        let os: Vec<Var> = outs.iter().map(|o| o.offsets[l]).collect();
        z.push(ctx.g.concat_rows(&zs));
        logits.push(ctx.g.concat_rows(&ls));
        offsets.push(ctx.g.concat_rows(&os));
    }
    (z, logits, offsets)
}

fn merge_matches(per_video: Vec<Vec<LevelMatch>>, levels: usize) -> Vec<LevelMatch> {
    (0..levels)
        .map(|l| {
            let parts: Vec<&LevelMatch> = per_video.iter().map(|v| &v[l]).collect();
            let views: Vec<_> = parts.iter().map(|m| m.offset_target.view()).collect();
            LevelMatch {
                class_target: parts.iter().flat_map(|m| m.class_target.iter().copied()).collect(),
                offset_target: ndarray::concatenate(ndarray::Axis(0), &views).expect("offset width"),
                positive_mask: parts.iter().flat_map(|m| m.positive_mask.iter().copied()).collect(),
                segment: parts.iter().flat_map(|m| m.segment.iter().copied()).collect(),
            }
        })
        .collect()
}

fn source_forward(
    model: &Model,
    ctx: &mut Ctx,
    records: &[&VideoRecord],
    seed: u64,
    mask_background: f64,
) -> Result<Stacked> {
    let cfg = &model.config;
    let batch = PaddedBatch::from_records(records, cfg.t_max, true, seed);
    let mut outs = Vec::with_capacity(batch.len());
    let mut matches = Vec::with_capacity(batch.len());
    let mut valid: Vec<Vec<bool>> = vec![Vec::new(); cfg.levels];
    for b in 0..batch.len() {
        let out = model.forward(ctx, &batch.features_of(b), &batch.mask_of(b))?;
        let grids = build_grids(cfg.t_max, cfg.levels, batch.frame_stride_s[b])?;
        let m = match_anchors(&grids, &batch.segments[b], batch.frame_stride_s[b], &cfg.matching);
        for (l, lm) in m.levels.iter().enumerate() {
            let mut v = out.features.masks[l].clone();
            if mask_background > 0.0 {
                let keep = background_keep_mask(&lm.class_target, &v, mask_background, sub_seed(seed, b as u64, l as u64));
                v.iter_mut().zip(keep).for_each(|(a, k)| *a &= k);
            }
            valid[l].extend(v);
        }
        matches.push(m.levels);
        outs.push(out);
    }
    let (z, logits, offsets) = stack(ctx, &outs, cfg.levels);
    let matches = merge_matches(matches, cfg.levels);
    Ok(Stacked {
        z,
        logits,
        offsets,
        labels: matches.iter().map(|m| m.class_target.clone()).collect(),
        valid,
        matches,
    })
}

fn target_forward(model: &Model, ctx: &mut Ctx, records: &[&VideoRecord], seed: u64, alpha: f64) -> Result<Stacked> {
    let cfg = &model.config;
    let batch = PaddedBatch::from_records(records, cfg.t_max, true, seed);
    let mut outs = Vec::with_capacity(batch.len());
    let mut valid: Vec<Vec<bool>> = vec![Vec::new(); cfg.levels];
    for b in 0..batch.len() {
        let out = model.forward(ctx, &batch.features_of(b), &batch.mask_of(b))?;
        for (l, m) in out.features.masks.iter().enumerate() {
            valid[l].extend(m.iter().copied());
        }
        outs.push(out);
    }
    let (z, logits, offsets) = stack(ctx, &outs, cfg.levels);
    let labels = logits
        .iter()
        .map(|l| pseudo_labels(&ctx.g.value(*l).mapv(logistic), alpha))
        .collect();
    Ok(Stacked {
        z,
        logits,
        offsets,
        labels,
        valid,
        matches: Vec::new(),
    })
}

fn check_finite(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// One optimization step on an interleaved batch.
pub fn train_step(
    state: &mut ModelState,
    source: &[&VideoRecord],
    target: &[&VideoRecord],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let ModelState {
        model,
        params,
        ema,
        adam_m,
        adam_v,
        adam_t,
        step,
        centroids,
        ..
    } = state;
    let levels = model.config.levels;
    let batch_seed = sub_seed(cfg.seed, *step, 0);
    let align = cfg.alignment_active();

    let mut pseudo_frac = None;
    let (task_v, sada_v, total_v, grads) = {
        let mut ctx = Ctx::new(params);
        let src = source_forward(model, &mut ctx, source, batch_seed, cfg.mask_background)?;
        let mut cls = Vec::with_capacity(levels);
        let mut loc = Vec::with_capacity(levels);
        for l in 0..levels {
            let (c, o) = level_losses(&mut ctx, src.logits[l], src.offsets[l], &src.matches[l], &src.valid[l]);
            cls.push(c);
            loc.push(o);
        }
        let task = task_loss(&mut ctx, &cls, &loc, &cfg.task_weights());

        let sada = if align {
            let tgt = target_forward(model, &mut ctx, target, sub_seed(cfg.seed, *step, 1), cfg.alpha)?;
            let groups = group_anchors(&src.labels, &src.valid, &tgt.labels, &tgt.valid, model.class_count);
            let (mut act, mut all) = (0usize, 0usize);
            for (lab, val) in tgt.labels.iter().zip(&tgt.valid) {
                for (c, v) in lab.iter().zip(val) {
                    all += usize::from(*v);
                    act += usize::from(*v && *c > 0);
                }
            }
            pseudo_frac = Some(if all == 0 { 0.0 } else { act as f64 / all as f64 });
            let flags = cfg.loss_flags;
            let mut terms: Vec<(Var, f64)> = Vec::new();
            for l in 0..levels {
                let w = cfg.level_weights[l];
                let d = &model.disc.levels[l];
                let lg = &groups.levels[l];
                if flags.local {
                    let v = local_align_loss(&mut ctx, d, &model.conditioning, src.z[l], tgt.z[l], lg, GRL_LAMBDA);
                    terms.push((v, w));
                }
                if flags.bkg {
                    let v = bkg_align_loss(&mut ctx, d, &model.conditioning, src.z[l], tgt.z[l], lg, GRL_LAMBDA);
                    terms.push((v, w));
                }
                if flags.global {
                    let v = global_level_loss(&mut ctx, d, src.z[l], tgt.z[l], &src.valid[l], &tgt.valid[l], GRL_LAMBDA);
                    terms.push((v, w));
                }
            }
            if flags.mstn {
                terms.push((mstn_centroid_loss(&mut ctx, &groups, &src.z, &tgt.z, centroids), 1.0));
            }
            if terms.is_empty() {
                None
            } else {
                Some(ctx.g.combine(&terms))
            }
        } else {
            None
        };

        let total = match sada {
            Some(s) => ctx.g.combine(&[(task, cfg.lambda_task), (s, cfg.lambda_sada)]),
            None => ctx.g.combine(&[(task, cfg.lambda_task)]),
        };
        let task_v = ctx.g.scalar(task);
        let sada_v = sada.map_or(0.0, |s| ctx.g.scalar(s));
        let total_v = ctx.g.scalar(total);
        check_finite(*step, "task loss", task_v)?;
        check_finite(*step, "alignment loss", sada_v)?;
        (task_v, sada_v, total_v, ctx.param_grads(total))
    };

    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    step: *step,
                    detail: format!("gradient of {}", params.name(crate::nn::ParamId(i))),
                });
            }
        }
    }
    for (i, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            let id = crate::nn::ParamId(i);
            adamw_update(
                params.get_mut(id),
                &g,
                &mut adam_m[i],
                &mut adam_v[i],
                &mut adam_t[i],
                lr,
                cfg.weight_decay,
            );
        }
    }
    let decay = effective_ema_decay(cfg.ema_decay, *step, cfg.ema_warmup);
    for id in params.ids_in(ParamGroup::Detector).collect::<Vec<_>>() {
        ema_update(params.get(id), ema.get_mut(id), decay)?;
    }
    *step += 1;
    Ok(StepMetrics {
        lr,
        task_loss: task_v,
        sada_loss: sada_v,
        total_loss: total_v,
        pseudo_action_frac: pseudo_frac,
    })
}

/// Mean task loss of `store` (usually the EMA copy) over a labelled dataset,
/// one value per evaluation window.
pub fn validation_loss(model: &Model, store: &ParamStore, dataset: &Dataset, cfg: &TrainConfig) -> Result<f64> {
    let mc = &model.config;
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in &dataset.records {
        let stride = r.features.frame_stride_s;
        for start in windows(r.features.len(), mc.t_max) {
            let slice = r.features.features.slice(ndarray::s![start.., ..]).to_owned();
            let p = pad_or_crop(&slice, mc.t_max, false, 0);
            let segs = shift_segments(&r.segments, start as f64 * stride, mc.t_max as f64 * stride);
            let mut ctx = Ctx::new(store);
            let out = model.forward(&mut ctx, &p.features, &p.valid_mask)?;
            let grids = build_grids(mc.t_max, mc.levels, stride)?;
            let m = match_anchors(&grids, &segs, stride, &mc.matching);
            let mut cls = Vec::new();
            let mut loc = Vec::new();
            for l in 0..mc.levels {
                let (c, o) = level_losses(&mut ctx, out.logits[l], out.offsets[l], &m.levels[l], &out.features.masks[l]);
                cls.push(c);
                loc.push(o);
            }
            let t = task_loss(&mut ctx, &cls, &loc, &cfg.task_weights());
            sum += ctx.g.scalar(t);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub sada_loss: f64,
    pub pseudo_action_frac: Option<f64>,
    pub val_map: Option<f64>,
    pub source_val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FitData<'a> {
    pub source_train: Option<&'a Dataset>,
    pub target_train: Option<&'a Dataset>,
    pub source_val: Option<&'a Dataset>,
    pub target_val: Option<&'a Dataset>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: ModelState,
    pub log: Vec<EpochLog>,
    /// Epoch with the lowest source-val loss.
    pub best_epoch: usize,
}

/// Avg-mAP of the EMA weights on a labelled dataset.
pub fn ema_map(state: &ModelState, dataset: &Dataset) -> Result<f64> {
    let preds = predict_dataset(&state.model, &state.ema, dataset, &PredictConfig::default(), &NmsConfig::default())?;
    Ok(map_report(&preds, dataset, &EvalConfig::default())?.average)
}

/// Full training run with per-epoch logging and early stopping on the source
/// validation loss.
pub fn fit(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &FitData) -> Result<FitOutcome> {
    model_cfg.validate()?;
    cfg.validate(model_cfg.levels)?;
    let source = data
        .source_train
        .ok_or_else(|| Error::Validation("training needs a source dataset".into()))?;
    let target = data.target_train.unwrap_or(source);
    for ds in [Some(source), Some(target), data.source_val, data.target_val].into_iter().flatten() {
        ds.validate()?;
        if ds.class_count != source.class_count {
            return Err(Error::Validation("datasets disagree on class count".into()));
        }
        if let Some(r) = ds.records.first() {
            if r.features.dim() != model_cfg.input_dim {
                return Err(Error::Validation(format!(
                    "feature width {} does not match model input_dim {}",
                    r.features.dim(),
                    model_cfg.input_dim
                )));
            }
        }
    }
    let mut state = ModelState::new(model_cfg, source.class_count, cfg.seed, cfg.mstn_decay)?;
    let steps_per_epoch = source.len().max(target.len()).div_ceil(cfg.per_domain_batch);
    let schedule = Schedule::new(cfg, steps_per_epoch);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Option<ParamStore>)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let plan = interleave_schedule(source.len(), target.len(), cfg.per_domain_batch, sub_seed(cfg.seed, epoch as u64, 2))?;
        let mut task = 0.0;
        let mut sada = 0.0;
        let mut lr = 0.0;
        let mut frac = (0.0, 0usize);
        for b in &plan {
            let s: Vec<&VideoRecord> = b.source.iter().map(|i| &source.records[*i]).collect();
            let t: Vec<&VideoRecord> = b.target.iter().map(|i| &target.records[*i]).collect();
            lr = lr_at(state.step, cfg.lr, &schedule);
            let m = train_step(&mut state, &s, &t, cfg, lr)?;
            task += m.task_loss;
            sada += m.sada_loss;
            if let Some(f) = m.pseudo_action_frac {
                frac = (frac.0 + f, frac.1 + 1);
            }
        }
        let n = plan.len().max(1) as f64;
        let source_val_loss = match data.source_val {
            Some(v) if !v.is_empty() => Some(validation_loss(&state.model, &state.ema, v, cfg)?),
            _ => None,
        };
        let val_map = match data.target_val {
            Some(v) if cfg.log_val_map && v.records.iter().any(|r| !r.segments.is_empty()) => Some(ema_map(&state, v)?),
            _ => None,
        };
        log.push(EpochLog {
            epoch,
            lr,
            task_loss: task / n,
            sada_loss: sada / n,
            pseudo_action_frac: (frac.1 > 0).then(|| frac.0 / frac.1 as f64),
            val_map,
            source_val_loss,
        });
        if let Some(vl) = source_val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                let kept = if cfg.restore_best { Some(state.ema.clone()) } else { None };
                best = Some((vl, epoch, kept));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, Some(ema))) => {
            state.ema = ema;
            e
        }
        Some((_, e, None)) => e,
        None => log.len().saturating_sub(1),
    };
    Ok(FitOutcome { state, log, best_epoch })
}

pub fn write_metric_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "task_loss", "sada_loss", "pseudo_action_frac", "val_map", "source_val_loss"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in log {
        w.write_record([
            e.epoch.to_string(),
            e.lr.to_string(),
            e.task_loss.to_string(),
            e.sada_loss.to_string(),
            opt(e.pseudo_action_frac),
            opt(e.val_map),
            opt(e.source_val_loss),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const CKPT_MAGIC: &[u8; 4] = b"SADC";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    class_count: usize,
    seed: u64,
    centroids: CentroidState,
    train: Option<TrainConfig>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Array2<f64>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.nrows() as u32).to_le_bytes());
    out.extend((t.ncols() as u32).to_le_bytes());
    for x in t.iter() {
        out.extend(x.to_le_bytes());
    }
}

/// Writes live, EMA and optimizer state plus the configs that rebuild the model.
pub fn save_checkpoint(state: &ModelState, train: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&CheckpointHeader {
        model: state.model.config.clone(),
        class_count: state.model.class_count,
        seed: state.seed,
        centroids: state.centroids.clone(),
        train: train.cloned(),
    })?;
    let mut buf = Vec::new();
    buf.extend(CKPT_MAGIC);
    buf.extend(CKPT_VERSION.to_le_bytes());
    buf.extend(state.step.to_le_bytes());
    buf.extend((header.len() as u64).to_le_bytes());
    buf.extend(&header);
    let n = state.params.len();
    buf.extend(((n * 5) as u32).to_le_bytes());
    for id in state.params.ids() {
        let name = state.params.name(id);
        put_tensor(&mut buf, &format!("live/{name}"), state.params.get(id));
        put_tensor(&mut buf, &format!("ema/{name}"), state.ema.get(id));
        put_tensor(&mut buf, &format!("adam_m/{name}"), &state.adam_m[id.0]);
        put_tensor(&mut buf, &format!("adam_v/{name}"), &state.adam_v[id.0]);
        put_tensor(&mut buf, &format!("adam_t/{name}"), &Array2::from_elem((1, 1), state.adam_t[id.0] as f64));
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: "truncated checkpoint".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, Option<TrainConfig>)> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut c = Cursor { buf: &buf, pos: 0, path };
    if c.take(4)? != CKPT_MAGIC {
        return Err(fmt("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let step = c.u64()?;
    let hlen = c.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?)?;
    let mut state = ModelState::new(&header.model, header.class_count, header.seed, header.centroids.decay)?;
    state.step = step;
    state.centroids = header.centroids;
    let count = c.u32()? as usize;
    let index: std::collections::HashMap<String, usize> = state
        .params
        .ids()
        .map(|id| (state.params.name(id).to_string(), id.0))
        .collect();
    for _ in 0..count {
        let nlen = c.u32()? as usize;
        let name = String::from_utf8(c.take(nlen)?.to_vec()).map_err(|_| fmt("tensor name is not UTF-8".into()))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let bytes = c.take(rows * cols * 8)?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| fmt(e.to_string()))?;
        let (kind, pname) = name.split_once('/').ok_or_else(|| fmt(format!("bad tensor name {name}")))?;
        let i = *index.get(pname).ok_or_else(|| fmt(format!("unknown parameter {pname}")))?;
        let id = crate::nn::ParamId(i);
        let expect = |have: &Array2<f64>, t: &Array2<f64>| {
            if have.dim() == t.dim() {
                Ok(())
            } else {
                Err(fmt(format!("shape mismatch for {name}")))
            }
        };
        match kind {
            "live" => {
                expect(state.params.get(id), &t)?;
                *state.params.get_mut(id) = t;
            }
            "ema" => {
                expect(state.ema.get(id), &t)?;
                *state.ema.get_mut(id) = t;
            }
            "adam_m" => {
                expect(&state.adam_m[i], &t)?;
                state.adam_m[i] = t;
            }
            "adam_v" => {
                expect(&state.adam_v[i], &t)?;
                state.adam_v[i] = t;
            }
            "adam_t" => state.adam_t[i] = t[[0, 0]] as u64,
            other => return Err(fmt(format!("unknown tensor kind {other}"))),
        }
    }
    Ok((state, header.train))
}

/// Writes EMA-model embeddings of every valid anchor, grouped by class label
/// (GT match for source, pseudo-label for target), as CSV.
pub fn dump_embeddings(state: &ModelState, datasets: &[&Dataset], alpha: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let model = &state.model;
    let mc = &model.config;
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut header = String::from("level,class,domain,video,anchor");
    for j in 0..mc.feature_dim {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for ds in datasets {
        for r in &ds.records {
            let p = pad_or_crop(&r.features.features, mc.t_max, false, 0);
            let stride = r.features.frame_stride_s;
            let mut ctx = Ctx::new(&state.ema);
            let o = model.forward(&mut ctx, &p.features, &p.valid_mask)?;
            let labels: Vec<Vec<usize>> = match r.domain {
                Domain::Source => {
                    let grids = build_grids(mc.t_max, mc.levels, stride)?;
                    let segs = shift_segments(&r.segments, 0.0, mc.t_max as f64 * stride);
                    match_anchors(&grids, &segs, stride, &mc.matching)
                        .levels
                        .into_iter()
                        .map(|m| m.class_target)
                        .collect()
                }
                Domain::Target => o
                    .logits
                    .iter()
                    .map(|l| pseudo_labels(&ctx.g.value(*l).mapv(logistic), alpha))
                    .collect(),
            };
            for l in 0..mc.levels {
                let z = ctx.g.value(o.features.levels[l]);
                for class in 0..=model.class_count {
                    let rows: Vec<(usize, Array1<f64>)> = (0..z.nrows())
                        .filter(|&i| o.features.masks[l][i] && labels[l][i] == class)
                        .map(|i| (i, z.row(i).to_owned()))
                        .collect();
                    write_embedding_rows(&mut out, l, class, r.domain, r.video_id(), &rows)
                        .map_err(|e| Error::io(path, e))?;
                }
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}
