//! Classification and localization heads shared across pyramid levels, and
//! the supervised task losses.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::LevelMatch;
use crate::autograd::Var;
use crate::nn::{mask_column, Conv1d, Ctx, ParamGroup, ParamStore};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Prior probability the classification bias is initialised to.
const CLS_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub conv_layers: usize,
    pub class_count: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            conv_layers: 3,
            class_count: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLossWeights {
    pub lambda_cls: f64,
    pub lambda_loc: f64,
}

impl Default for TaskLossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_loc: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Heads {
    pub cls: Vec<Conv1d>,
    pub loc: Vec<Conv1d>,
}

fn tower(
    store: &mut ParamStore,
    name: &str,
    f: usize,
    out: usize,
    layers: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Conv1d> {
    (0..layers)
        .map(|i| {
            let o = if i + 1 == layers { out } else { f };
            Conv1d::new(store, &format!("{name}.{i}"), ParamGroup::Detector, f, o, rng)
        })
        .collect()
}

fn run_tower(tower: &[Conv1d], ctx: &mut Ctx, z: Var, mask: &[bool]) -> Var {
    let mut h = z;
    for (i, conv) in tower.iter().enumerate() {
        h = conv.forward(ctx, h);
        if i + 1 < tower.len() {
            h = ctx.g.relu(h);
            h = ctx.g.mul_const(h, mask_column(mask));
        }
    }
    h
}

impl Heads {
    pub fn new(config: &HeadConfig, feature_dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let layers = config.conv_layers.max(1);
        let cls = tower(store, "head.cls", feature_dim, config.class_count, layers, rng);
        let loc = tower(store, "head.loc", feature_dim, 2, layers, rng);
        let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        store.get_mut(cls.last().unwrap().inner.b).fill(prior_bias);
        Self { cls, loc }
    }

    /// Raw class logits, `T_l×C`. Probabilities are their elementwise sigmoid.
    pub fn classify(&self, ctx: &mut Ctx, z: Var, mask: &[bool]) -> Var {
        run_tower(&self.cls, ctx, z, mask)
    }

    /// Nonnegative stride-normalised `(d_begin, d_end)`, `T_l×2`.
    pub fn localize(&self, ctx: &mut Ctx, z: Var, mask: &[bool]) -> Var {
        let raw = run_tower(&self.loc, ctx, z, mask);
        ctx.g.softplus(raw)
    }
}

/// Sigmoid focal loss, mean over valid anchor-class entries.
pub fn focal_loss(ctx: &mut Ctx, logits: Var, class_target: &[usize], valid: &[bool]) -> Var {
    ctx.g.focal_loss(logits, class_target, valid, FOCAL_ALPHA, FOCAL_GAMMA)
}

/// Mean squared error over the offsets of positive anchors.
pub fn localization_loss(ctx: &mut Ctx, offsets: Var, target: &Array2<f64>, positives: &[bool]) -> Var {
    ctx.g.masked_mse(offsets, target, positives)
}

/// Both losses for one level; `valid` already excludes padded anchors.
pub fn level_losses(
    ctx: &mut Ctx,
    logits: Var,
    offsets: Var,
    m: &LevelMatch,
    valid: &[bool],
) -> (Var, Var) {
    let pos: Vec<bool> = m
        .positive_mask
        .iter()
        .zip(valid)
        .map(|(p, v)| *p && *v)
        .collect();
    (
        focal_loss(ctx, logits, &m.class_target, valid),
        localization_loss(ctx, offsets, &m.offset_target, &pos),
    )
}

/// `λ_cls·Σ cls + λ_loc·Σ loc` on the tape.
pub fn task_loss(ctx: &mut Ctx, cls: &[Var], loc: &[Var], w: &TaskLossWeights) -> Var {
    let mut terms: Vec<(Var, f64)> = cls.iter().map(|v| (*v, w.lambda_cls)).collect();
    terms.extend(loc.iter().map(|v| (*v, w.lambda_loc)));
    if terms.is_empty() {
        return ctx.g.constant_scalar(0.0);
    }
    ctx.g.combine(&terms)
}

/// Scalar form of [`task_loss`].
pub fn task_loss_value(cls: &[f64], loc: &[f64], w: &TaskLossWeights) -> f64 {
    w.lambda_cls * cls.iter().sum::<f64>() + w.lambda_loc * loc.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn heads(c: usize, f: usize) -> (Heads, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Heads::new(
            &HeadConfig {
                conv_layers: 3,
                class_count: c,
            },
            f,
            &mut store,
            &mut rng,
        );
        (h, store)
    }

    #[test]
    fn output_shapes_and_ranges() {
        let (h, store) = heads(10, 8);
        let mut ctx = Ctx::new(&store);
        let z = ctx.g.leaf(Array2::from_shape_fn((16, 8), |(i, j)| ((i * 3 + j) as f64).cos() * 4.0));
        let logits = h.classify(&mut ctx, z, &[true; 16]);
        let off = h.localize(&mut ctx, z, &[true; 16]);
        assert_eq!(ctx.g.value(logits).dim(), (16, 10));
        assert_eq!(ctx.g.value(off).dim(), (16, 2));
        assert!(ctx.g.value(off).iter().all(|v| *v >= 0.0));
        let p = ctx.g.sigmoid(logits);
        assert!(ctx.g.value(p).iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn shared_head_is_level_agnostic() {
        let (h, store) = heads(3, 4);
        let emb = Array2::from_shape_fn((8, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let mut ctx = Ctx::new(&store);
        let a = ctx.g.leaf(emb.clone());
        let b = ctx.g.leaf(emb);
        let la = h.classify(&mut ctx, a, &[true; 8]);
        let lb = h.classify(&mut ctx, b, &[true; 8]);
        assert_eq!(ctx.g.value(la), ctx.g.value(lb));
    }

    #[test]
    fn focal_reference_values() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let x = ctx.g.leaf(Array2::from_elem((1, 1), 0.0));
        let l = focal_loss(&mut ctx, x, &[1], &[true]);
        assert!((ctx.g.scalar(l) - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ctx.g.scalar(l) - 0.04332).abs() < 1e-5);

        let x = ctx.g.leaf(Array2::from_elem((1, 1), 20.0));
        let l = focal_loss(&mut ctx, x, &[1], &[true]);
        assert!(ctx.g.scalar(l) < 1e-8);

        let x = ctx.g.leaf(Array2::from_elem((3, 2), 1.0));
        let l = focal_loss(&mut ctx, x, &[0, 1, 2], &[false; 3]);
        assert_eq!(ctx.g.scalar(l), 0.0);
    }

    #[test]
    fn focal_mean_is_invariant_to_duplication() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let base = Array2::from_shape_vec((2, 2), vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let x = ctx.g.leaf(base.clone());
        let one = focal_loss(&mut ctx, x, &[1, 0], &[true, true]);
        let doubled = ndarray::concatenate(ndarray::Axis(0), &[base.view(), base.view()]).unwrap();
        let y = ctx.g.leaf(doubled);
        let two = focal_loss(&mut ctx, y, &[1, 0, 1, 0], &[true; 4]);
        assert!((ctx.g.scalar(one) - ctx.g.scalar(two)).abs() < 1e-15);
        let flipped = ctx.g.leaf(Array2::from_shape_vec((2, 2), vec![2.0, 0.1, 0.3, -1.0]).unwrap());
        let perm = focal_loss(&mut ctx, flipped, &[0, 1], &[true, true]);
        assert!((ctx.g.scalar(one) - ctx.g.scalar(perm)).abs() < 1e-15);
    }

    #[test]
    fn localization_mse_cases() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let p = ctx.g.leaf(Array2::from_elem((1, 2), 1.0));
        let l = localization_loss(&mut ctx, p, &Array2::from_elem((1, 2), 2.0), &[true]);
        assert_eq!(ctx.g.scalar(l), 1.0);
        let l = localization_loss(&mut ctx, p, &Array2::from_elem((1, 2), 1.0), &[true]);
        assert_eq!(ctx.g.scalar(l), 0.0);
        let l = localization_loss(&mut ctx, p, &Array2::from_elem((1, 2), 5.0), &[false]);
        assert_eq!(ctx.g.scalar(l), 0.0);
    }

    #[test]
    fn task_loss_weighting() {
        let w = TaskLossWeights::default();
        assert!((task_loss_value(&[0.1, 0.2], &[0.3], &w) - 0.6).abs() < 1e-15);
        let w0 = TaskLossWeights {
            lambda_cls: 0.0,
            lambda_loc: 1.0,
        };
        assert_eq!(task_loss_value(&[0.1, 0.2], &[0.3], &w0), 0.3);
        let w2 = TaskLossWeights {
            lambda_cls: 2.0,
            lambda_loc: 1.0,
        };
        let lin = task_loss_value(&[0.1, 0.2], &[0.3], &w2) - task_loss_value(&[0.1, 0.2], &[0.3], &w);
        assert!((lin - 0.3).abs() < 1e-15);
    }
}
