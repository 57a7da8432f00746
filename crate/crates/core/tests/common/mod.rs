//! Reference implementations and instance generators shared by the
//! integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sada::data::SegmentAnnotation;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- matcher

/// Per level: class targets, offsets, positive flags.
pub type BruteLevel = (Vec<usize>, Vec<[f64; 2]>, Vec<bool>);

/// Exhaustive center-sampling assignment: every (level, anchor, segment)
/// triple is tested, and the candidates of each anchor are sorted by
/// (length, index).
pub fn brute_match(
    t: usize,
    levels: usize,
    frame_stride_s: f64,
    segments: &[SegmentAnnotation],
    radius: f64,
    range_base: f64,
) -> Vec<BruteLevel> {
    let mut out = Vec::new();
    for l in 0..levels {
        let stride = frame_stride_s * 2f64.powi(l as i32);
        let lo = if l == 0 { 0.0 } else { range_base * 2f64.powi(l as i32) };
        let hi = if l == levels - 1 {
            f64::INFINITY
        } else {
            range_base * 2f64.powi(l as i32 + 1)
        };
        let n = t >> l;
        let mut cls = vec![0; n];
        let mut off = vec![[0.0; 2]; n];
        let mut pos = vec![false; n];
        for i in 0..n {
            let at = (i as f64 + 0.5) * stride;
            let mut cands: Vec<(f64, usize)> = Vec::new();
            for (k, s) in segments.iter().enumerate() {
                let center = 0.5 * (s.begin_s + s.end_s);
                let in_window = (at - center).abs() < radius * stride;
                let in_segment = s.begin_s <= at && at <= s.end_s;
                let reach = f64::max(at - s.begin_s, s.end_s - at) / frame_stride_s;
                if in_window && in_segment && lo <= reach && reach < hi {
                    cands.push((s.end_s - s.begin_s, k));
                }
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some(&(_, k)) = cands.first() {
                let s = &segments[k];
                cls[i] = s.class_id;
                off[i] = [(at - s.begin_s) / stride, (s.end_s - at) / stride];
                pos[i] = true;
            }
        }
        out.push((cls, off, pos));
    }
    out
}

/// `T ≤ 64` divisible by `2^(L-1)`, `L ≤ 3`, up to 5 segments on a
/// half-second lattice so that boundary and tie cases occur.
pub fn random_match_instance(r: &mut ChaCha8Rng) -> (usize, usize, Vec<SegmentAnnotation>) {
    let levels = r.random_range(1..=3);
    let unit = 1usize << (levels - 1);
    let t = unit * r.random_range(1..=64 / unit);
    let n = r.random_range(0..=5);
    let segs = (0..n)
        .map(|_| {
            let a = r.random_range(0..=2 * t) as f64 * 0.5;
            let b = r.random_range(0..=2 * t) as f64 * 0.5;
            let (b0, e0) = if a < b { (a, b) } else { (b, a + 0.5) };
            SegmentAnnotation::new(b0, e0.min(t as f64).max(b0 + 0.5), r.random_range(1..=3))
        })
        .collect();
    (t, levels, segs)
}

// ---------------------------------------------------------------- AP

pub fn ref_tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy matching of the first `k` ranked predictions; returns the number
/// of true positives.
fn true_positives(ranked: &[(f64, f64, f64)], gts: &[(f64, f64)], tau: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for p in ranked {
        let mut best = None;
        let mut best_o = f64::NEG_INFINITY;
        for (j, g) in gts.iter().enumerate() {
            let o = ref_tiou((p.0, p.1), *g);
            if !used[j] && o > best_o {
                best_o = o;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            if best_o >= tau {
                used[j] = true;
                tp += 1;
            }
        }
    }
    tp
}

/// AP from the full precision-recall curve, rebuilding the match for every
/// prefix of the ranking and taking the precision envelope by brute force.
pub fn brute_ap(preds: &[(f64, f64, f64)], gts: &[(f64, f64)], tau: f64) -> Option<f64> {
    if gts.is_empty() {
        return if preds.is_empty() { None } else { Some(0.0) };
    }
    let mut ranked = preds.to_vec();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.total_cmp(&b.0)).then(a.1.total_cmp(&b.1)));
    let n = ranked.len();
    let mut p = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for k in 1..=n {
        let tp = true_positives(&ranked[..k], gts, tau) as f64;
        p.push(tp / k as f64);
        r.push(tp / gts.len() as f64);
    }
    let mut ap = 0.0;
    for k in 0..n {
        let prev = if k == 0 { 0.0 } else { r[k - 1] };
        let env = p[k..].iter().cloned().fold(0.0, f64::max);
        ap += (r[k] - prev) * env;
    }
    Some(ap)
}

/// Up to 8 predictions and 3 ground truths; half of the instances draw
/// scores and coordinates from a coarse lattice to produce ties.
pub fn random_ap_instance(r: &mut ChaCha8Rng) -> (Vec<(f64, f64, f64)>, Vec<(f64, f64)>, f64) {
    let coarse = r.random_bool(0.5);
    let seg = |r: &mut ChaCha8Rng| {
        let (a, b) = if coarse {
            (r.random_range(0..20) as f64, r.random_range(0..20) as f64)
        } else {
            (r.random_range(0.0..20.0), r.random_range(0.0..20.0))
        };
        (a.min(b), a.max(b) + 1.0)
    };
    let np = r.random_range(0..=8);
    let ng = r.random_range(0..=3);
    let preds = (0..np)
        .map(|_| {
            let (b, e) = seg(r);
            let s = if coarse {
                r.random_range(1..10) as f64 / 10.0
            } else {
                r.random_range(0.0..1.0)
            };
            (b, e, s)
        })
        .collect();
    let gts = (0..ng).map(|_| seg(r)).collect();
    let tau = [0.1, 0.3, 0.5, 0.7][r.random_range(0..4)];
    (preds, gts, tau)
}

// ---------------------------------------------------------------- SoftNMS

/// Gaussian SoftNMS written over index sets: scores decay in place and the
/// selection order is read off at the end.
pub fn reference_soft_nms(
    preds: &[(f64, f64, f64)],
    sigma: f64,
    iou_threshold: f64,
    min_score: f64,
    max_keep: usize,
) -> Vec<(f64, f64, f64)> {
    let mut score: Vec<f64> = preds.iter().map(|p| p.2).collect();
    let mut alive: Vec<bool> = vec![true; preds.len()];
    let mut order = Vec::new();
    for _ in 0..preds.len() {
        let i = (0..preds.len())
            .filter(|&i| alive[i])
            .reduce(|a, b| if score[b] > score[a] { b } else { a })
            .unwrap();
        alive[i] = false;
        order.push(i);
        for j in 0..preds.len() {
            if alive[j] {
                let o = ref_tiou((preds[i].0, preds[i].1), (preds[j].0, preds[j].1));
                if o > iou_threshold {
                    score[j] *= (-(o * o) / sigma).exp();
                }
            }
        }
    }
    order
        .into_iter()
        .filter(|&i| score[i] >= min_score)
        .take(max_keep)
        .map(|i| (preds[i].0, preds[i].1, score[i]))
        .collect()
}

pub fn random_nms_instance(r: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
    let n = r.random_range(0..=10);
    (0..n)
        .map(|_| {
            let b = r.random_range(0.0..20.0);
            let len = r.random_range(0.5..8.0);
            (b, b + len, r.random_range(0.0..1.0))
        })
        .collect()
}

// ---------------------------------------------------------------- finite differences

/// Central difference of `f` at `x` with respect to entry `idx`.
pub fn central_diff(x: &Array2<f64>, idx: (usize, usize), h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> f64 {
    let mut xp = x.clone();
    xp[idx] += h;
    let mut xm = x.clone();
    xm[idx] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative error; entries whose magnitude is below 1e-7 on both sides are
/// compared absolutely instead.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------- gradient checks

use rand_distr::{Distribution, StandardNormal};
use sada::alignment::{bkg_align_loss, group_anchors, local_align_loss, pseudo_labels, sada_loss};
use sada::anchors::{build_grids, match_anchors};
use sada::autograd::{logistic, Graph, Var};
use sada::heads::{level_losses, task_loss, TaskLossWeights};
use sada::nn::{Ctx, ParamGroup, ParamStore};
use sada::training::{Model, ModelConfig};

pub fn normal(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(r);
        scale * z
    })
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every entry of `x`.
pub fn max_rel_err_leaf(x: &Array2<f64>, analytic: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(x.dim()) {
        let idx = (idx.0, idx.1);
        let num = central_diff(x, idx, h, &mut f);
        worst = worst.max(rel_err(analytic[idx], num));
    }
    worst
}

fn scalar_graph(x: &Array2<f64>, build: &dyn Fn(&mut Graph, Var) -> Var) -> (f64, Array2<f64>) {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = build(&mut g, v);
    let grads = g.backward(out);
    (g.scalar(out), grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim())))
}

/// Checks a scalar function of one leaf against finite differences.
pub fn leaf_check(x: &Array2<f64>, build: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let (_, analytic) = scalar_graph(x, build);
    max_rel_err_leaf(x, &analytic, 1e-5, |xp| scalar_graph(xp, build).0)
}

pub fn focal_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = normal(&mut r, 16, 3, 2.0);
    let targets: Vec<usize> = (0..16).map(|_| r.random_range(0..=3)).collect();
    let valid: Vec<bool> = (0..16).map(|_| r.random_bool(0.8)).collect();
    leaf_check(&x, &|g, v| g.focal_loss(v, &targets, &valid, 0.25, 2.0))
}

pub fn mse_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = normal(&mut r, 16, 2, 1.0);
    let target = normal(&mut r, 16, 2, 1.0);
    let rows: Vec<bool> = (0..16).map(|_| r.random_bool(0.5)).collect();
    leaf_check(&x, &|g, v| g.masked_mse(v, &target, &rows))
}

/// One-layer probe `D(grl(x)) = grl(x)·w` scored by grouped BCE. Returns
/// the gradients of `x` and `w` from the tape and the loss value.
pub fn probe(x: &Array2<f64>, w: &Array2<f64>, groups: &[Option<usize>], lambda: Option<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let wv = g.leaf(w.clone());
    let h = match lambda {
        Some(l) => g.grad_reverse(xv, l),
        None => xv,
    };
    let logits = g.matmul(h, wv);
    let loss = g.grouped_bce(logits, groups, 3, 1.0);
    let grads = g.backward(loss);
    (g.scalar(loss), grads.get(xv).unwrap().clone(), grads.get(wv).unwrap().clone())
}

pub struct ProbeInstance {
    pub x: Array2<f64>,
    pub w: Array2<f64>,
    pub groups: Vec<Option<usize>>,
}

pub fn probe_instance(seed: u64) -> ProbeInstance {
    let mut r = rng(seed);
    ProbeInstance {
        x: normal(&mut r, 12, 8, 1.0),
        w: normal(&mut r, 8, 1, 0.5),
        groups: (0..12).map(|_| if r.random_bool(0.8) { Some(r.random_range(0..3)) } else { None }).collect(),
    }
}

/// BCE through the GRL: the discriminator weight gradient matches finite
/// differences of the loss and the input gradient matches `-λ` times them.
pub fn bce_grl_check(seed: u64, lambda: f64) -> f64 {
    let p = probe_instance(seed);
    let (_, gx, gw) = probe(&p.x, &p.w, &p.groups, Some(lambda));
    let ew = max_rel_err_leaf(&p.w, &gw, 1e-5, |wp| probe(&p.x, wp, &p.groups, Some(lambda)).0);
    let expected_x = gx.mapv(|v| if lambda == 0.0 { v } else { -v / lambda });
    let ex = if lambda == 0.0 {
        gx.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else {
        max_rel_err_leaf(&p.x, &expected_x, 1e-5, |xp| probe(xp, &p.w, &p.groups, Some(lambda)).0)
    };
    ew.max(ex)
}

/// Largest gap between the input gradient with a GRL of strength `λ` and
/// `-λ` times the numerical gradient of the same probe without it.
pub fn grl_contract_gap(seed: u64, lambda: f64) -> f64 {
    let p = probe_instance(seed);
    let (_, gx, _) = probe(&p.x, &p.w, &p.groups, Some(lambda));
    let mut worst: f64 = 0.0;
    for idx in ndarray::indices(p.x.dim()) {
        let idx = (idx.0, idx.1);
        let num = central_diff(&p.x, idx, 1e-5, |xp| probe(xp, &p.w, &p.groups, None).0);
        let want = -lambda * num;
        worst = worst.max(if lambda == 0.0 { gx[idx].abs() } else { rel_err(gx[idx], want) });
    }
    worst
}

pub struct ComposedInstance {
    pub model: Model,
    pub store: ParamStore,
    pub source: Array2<f64>,
    pub source_mask: Vec<bool>,
    pub target: Array2<f64>,
    pub target_mask: Vec<bool>,
    pub segments: Vec<SegmentAnnotation>,
    pub level_weights: Vec<f64>,
    pub lambda_sada: f64,
    /// Frozen pseudo-labels per level.
    pub target_labels: Vec<Vec<usize>>,
}

/// `T=16, F=8, L=3, C=3` with a partially padded target sequence.
pub fn composed_instance(seed: u64) -> ComposedInstance {
    let cfg = ModelConfig {
        levels: 3,
        input_dim: 8,
        feature_dim: 8,
        head_layers: 2,
        disc_hidden: 8,
        t_max: 16,
        ..ModelConfig::default()
    };
    let (model, store) = Model::new(&cfg, 3, seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    let source = normal(&mut r, 16, 8, 1.0);
    let mut target = normal(&mut r, 16, 8, 1.0);
    let target_mask: Vec<bool> = (0..16).map(|i| i < 13).collect();
    for i in 13..16 {
        target.row_mut(i).fill(0.0);
    }
    let segments = vec![
        SegmentAnnotation::new(1.0, 5.0, 1),
        SegmentAnnotation::new(6.0, 9.0, 2),
        SegmentAnnotation::new(10.0, 16.0, 3),
    ];
    let mut inst = ComposedInstance {
        model,
        store,
        source,
        source_mask: vec![true; 16],
        target,
        target_mask,
        segments,
        level_weights: vec![0.4, 0.8, 0.7],
        lambda_sada: 0.7,
        target_labels: Vec::new(),
    };
    // Threshold at the median confidence so action and background groups
    // are both populated.
    let mut ctx = Ctx::new(&inst.store);
    let out = inst.model.forward(&mut ctx, &inst.target, &inst.target_mask).unwrap();
    let probs: Vec<Array2<f64>> = out.logits.iter().map(|v| ctx.g.value(*v).mapv(logistic)).collect();
    let mut conf: Vec<f64> = probs.iter().flat_map(|p| p.rows().into_iter().map(|r| r.fold(0.0, |m: f64, v| m.max(*v))).collect::<Vec<_>>()).collect();
    conf.sort_by(f64::total_cmp);
    let alpha = conf[conf.len() / 2];
    inst.target_labels = probs.iter().map(|p| pseudo_labels(p, alpha)).collect();
    inst
}

/// `(task, sada, per-parameter gradients of task + λ·sada)` on the tape.
pub fn composed_eval(inst: &ComposedInstance, store: &ParamStore) -> (f64, f64, Vec<Option<Array2<f64>>>) {
    let m = &inst.model;
    let mut ctx = Ctx::new(store);
    let src = m.forward(&mut ctx, &inst.source, &inst.source_mask).unwrap();
    let tgt = m.forward(&mut ctx, &inst.target, &inst.target_mask).unwrap();
    let grids = build_grids(16, 3, 1.0).unwrap();
    let matched = match_anchors(&grids, &inst.segments, 1.0, &m.config.matching);
    let mut cls = Vec::new();
    let mut loc = Vec::new();
    for l in 0..3 {
        let (c, o) = level_losses(&mut ctx, src.logits[l], src.offsets[l], &matched.levels[l], &src.features.masks[l]);
        cls.push(c);
        loc.push(o);
    }
    let task = task_loss(&mut ctx, &cls, &loc, &TaskLossWeights::default());
    let src_labels: Vec<Vec<usize>> = matched.levels.iter().map(|l| l.class_target.clone()).collect();
    let groups = group_anchors(&src_labels, &src.features.masks, &inst.target_labels, &tgt.features.masks, 3);
    let mut local = Vec::new();
    let mut bkg = Vec::new();
    for l in 0..3 {
        let (zs, zt) = (src.features.levels[l], tgt.features.levels[l]);
        local.push(local_align_loss(&mut ctx, &m.disc.levels[l], &m.conditioning, zs, zt, &groups.levels[l], 1.0));
        bkg.push(bkg_align_loss(&mut ctx, &m.disc.levels[l], &m.conditioning, zs, zt, &groups.levels[l], 1.0));
    }
    let sada = sada_loss(&mut ctx, &local, &bkg, &inst.level_weights);
    let total = ctx.g.combine(&[(task, 1.0), (sada, inst.lambda_sada)]);
    let (tv, sv) = (ctx.g.scalar(task), ctx.g.scalar(sada));
    (tv, sv, ctx.param_grads(total))
}

/// Compares tape gradients of the composed objective with finite
/// differences on `per_param` random entries of every parameter tensor.
/// Parameters below the GRL must see `∂task − λ·∂sada`; the discriminator
/// and class embedding see `∂task + λ·∂sada`.
pub fn composed_check(seed: u64, per_param: usize) -> (usize, f64) {
    let inst = composed_instance(seed);
    let (_, _, grads) = composed_eval(&inst, &inst.store);
    let mut r = rng(seed ^ 0x5eed);
    let h = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (k, id) in inst.store.ids().enumerate() {
        let value = inst.store.get(id).clone();
        let sign = match inst.store.group(id) {
            ParamGroup::Detector => -1.0,
            _ => 1.0,
        };
        let analytic = grads[k].clone().unwrap_or_else(|| Array2::zeros(value.dim()));
        for _ in 0..per_param {
            let idx = (r.random_range(0..value.nrows()), r.random_range(0..value.ncols()));
            let eval = |delta: f64| {
                let mut s = inst.store.clone();
                s.get_mut(id)[idx] += delta;
                let (t, a, _) = composed_eval(&inst, &s);
                (t, a)
            };
            let (tp, sp) = eval(h);
            let (tm, sm) = eval(-h);
            let num = (tp - tm) / (2.0 * h) + sign * inst.lambda_sada * (sp - sm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[idx], num));
            checked += 1;
        }
    }
    (checked, worst)
}
