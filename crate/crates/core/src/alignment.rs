//! Semantic adversarial alignment.
//!
//! Target anchors get hard pseudo-labels from the classification head; source
//! anchors use their matched classes. Within every pyramid level the anchors
//! of both domains are then bucketed per class (class 0 = background), and a
//! level-wise domain discriminator, conditioned on a class embedding
//! concatenated to each anchor, is trained to tell the domains apart. A
//! gradient-reversal node sits between the embeddings and the discriminator,
//! so a single minimisation trains the discriminator while pushing the
//! encoder toward class-wise domain confusion.
//!
//! Alongside the semantic (local + background) terms this module provides the
//! global level-wise adversarial loss and the class-centroid EMA loss used as
//! comparison points.

use std::io::Write;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mlp, ParamGroup, ParamId, ParamStore};

/// Domain labels.
pub const SOURCE_LABEL: f64 = 1.0;
pub const TARGET_LABEL: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    Learnable,
    OneHot,
    RandomFixed,
    Sinusoidal,
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(Self::Learnable),
            "one_hot" | "one-hot" => Ok(Self::OneHot),
            "random_fixed" | "random-fixed" => Ok(Self::RandomFixed),
            "sinusoidal" => Ok(Self::Sinusoidal),
            other => Err(Error::Config(format!("unknown conditioning mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Table {
    Param(ParamId),
    Fixed(Array2<f64>),
}

/// Class embeddings `e_0..e_C` (row 0 is background).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassConditioning {
    pub mode: ConditioningMode,
    table: Table,
}

impl ClassConditioning {
    pub fn new(
        mode: ConditioningMode,
        class_count: usize,
        dim: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let rows = class_count + 1;
        let table = match mode {
            ConditioningMode::Learnable => {
                let init = Array2::from_shape_fn((rows, dim), |_| StandardNormal.sample(rng));
                Table::Param(store.add("cond.embedding", ParamGroup::Adversarial, init))
            }
            ConditioningMode::OneHot => Table::Fixed(Array2::from_shape_fn((rows, dim), |(i, j)| {
                if j == i % dim {
                    1.0
                } else {
                    0.0
                }
            })),
            ConditioningMode::RandomFixed => {
                Table::Fixed(Array2::from_shape_fn((rows, dim), |_| StandardNormal.sample(rng)))
            }
            ConditioningMode::Sinusoidal => Table::Fixed(sinusoidal_table(rows, dim)),
        };
        Self { mode, table }
    }

    pub fn param(&self) -> Option<ParamId> {
        match &self.table {
            Table::Param(id) => Some(*id),
            Table::Fixed(_) => None,
        }
    }

    /// Current embedding table.
    pub fn table(&self, store: &ParamStore) -> Array2<f64> {
        match &self.table {
            Table::Param(id) => store.get(*id).clone(),
            Table::Fixed(t) => t.clone(),
        }
    }

    /// `E`: one embedding row per entry of `classes`.
    pub fn rows(&self, ctx: &mut Ctx, classes: &[usize]) -> Var {
        let table = match &self.table {
            Table::Param(id) => ctx.p(*id),
            Table::Fixed(t) => ctx.g.leaf(t.clone()),
        };
        ctx.g.gather_rows(table, classes.to_vec())
    }
}

/// Transformer-style positional encoding of the class index.
pub fn sinusoidal_table(rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |(pos, j)| {
        let k = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// One discriminator per pyramid level, `2F → H → H → 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainDiscriminator {
    pub levels: Vec<Mlp>,
}

impl DomainDiscriminator {
    pub fn new(levels: usize, feature_dim: usize, hidden: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        Self {
            levels: (0..levels)
                .map(|l| {
                    Mlp::new(
                        store,
                        &format!("disc.{l}"),
                        ParamGroup::Adversarial,
                        &[2 * feature_dim, hidden, hidden, 1],
                        rng,
                    )
                })
                .collect(),
        }
    }
}

/// Gradient reversal layer.
pub fn grl(ctx: &mut Ctx, x: Var, lambda: f64) -> Var {
    ctx.g.grad_reverse(x, lambda)
}

/// Hard pseudo-labels: the most probable class when its probability exceeds
/// `alpha`, otherwise background (0). Classes are 1-based.
pub fn pseudo_labels(probs: &Array2<f64>, alpha: f64) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_p = f64::NEG_INFINITY;
            for (i, p) in row.iter().enumerate() {
                if *p > best_p {
                    best_p = *p;
                    best = i;
                }
            }
            if best_p > alpha {
                best + 1
            } else {
                0
            }
        })
        .collect()
}

/// Row indices of one level's anchors bucketed by class, per domain.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LevelGroups {
    /// `source[i]` holds the rows labelled `i`.
    pub source: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
}

impl LevelGroups {
    pub fn class_count(&self) -> usize {
        self.source.len().saturating_sub(1)
    }

    pub fn rows(&self, domain: Domain) -> &[Vec<usize>] {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnchorGroups {
    pub levels: Vec<LevelGroups>,
}

/// Buckets valid rows by label into `class_count + 1` groups.
pub fn bucketize(labels: &[usize], valid: &[bool], class_count: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); class_count + 1];
    for (r, (l, v)) in labels.iter().zip(valid).enumerate() {
        if *v {
            groups[*l].push(r);
        }
    }
    groups
}

/// Groups every level. Per level, `source_labels[l]` / `target_labels[l]`
/// label the rows of that level's stacked embedding matrix.
pub fn group_anchors(
    source_labels: &[Vec<usize>],
    source_valid: &[Vec<bool>],
    target_labels: &[Vec<usize>],
    target_valid: &[Vec<bool>],
    class_count: usize,
) -> AnchorGroups {
    AnchorGroups {
        levels: (0..source_labels.len())
            .map(|l| LevelGroups {
                source: bucketize(&source_labels[l], &source_valid[l], class_count),
                target: bucketize(&target_labels[l], &target_valid[l], class_count),
            })
            .collect(),
    }
}

/// Sum over `classes` of the mean BCE of one domain's group against `label`.
#[allow(clippy::too_many_arguments)]
fn domain_term(
    ctx: &mut Ctx,
    disc: &Mlp,
    conditioning: Option<&ClassConditioning>,
    z: Var,
    groups: &[Vec<usize>],
    classes: &[usize],
    label: f64,
    grl_lambda: f64,
) -> Var {
    let mut rows = Vec::new();
    let mut group_ids = Vec::new();
    let mut cond_classes = Vec::new();
    for (gi, &c) in classes.iter().enumerate() {
        for &r in &groups[c] {
            rows.push(r);
            group_ids.push(Some(gi));
            cond_classes.push(c);
        }
    }
    if rows.is_empty() {
        return ctx.g.constant_scalar(0.0);
    }
    let n = rows.len();
    let selected = ctx.g.gather_rows(z, rows);
    let reversed = grl(ctx, selected, grl_lambda);
    let cond = match conditioning {
        Some(c) => c.rows(ctx, &cond_classes),
        None => {
            let f = ctx.g.value(z).ncols();
            ctx.g.leaf(Array2::zeros((n, f)))
        }
    };
    let input = ctx.g.concat_cols(reversed, cond);
    let logits = disc.forward(ctx, input);
    ctx.g.grouped_bce(logits, &group_ids, classes.len(), label)
}

/// `Σ_{i∈classes} BCE(D(A_i‖E_i), d_S) + BCE(D(B_i‖E_i), d_T)` for one level.
#[allow(clippy::too_many_arguments)]
pub fn semantic_level_loss(
    ctx: &mut Ctx,
    disc: &Mlp,
    conditioning: &ClassConditioning,
    z_source: Var,
    z_target: Var,
    groups: &LevelGroups,
    classes: &[usize],
    grl_lambda: f64,
) -> Var {
    let s = domain_term(ctx, disc, Some(conditioning), z_source, &groups.source, classes, SOURCE_LABEL, grl_lambda);
    let t = domain_term(ctx, disc, Some(conditioning), z_target, &groups.target, classes, TARGET_LABEL, grl_lambda);
    ctx.g.sum_scalars(&[s, t])
}

/// Class-wise term over action classes `1..=C` for one level.
pub fn local_align_loss(
    ctx: &mut Ctx,
    disc: &Mlp,
    conditioning: &ClassConditioning,
    z_source: Var,
    z_target: Var,
    groups: &LevelGroups,
    grl_lambda: f64,
) -> Var {
    let classes: Vec<usize> = (1..=groups.class_count()).collect();
    semantic_level_loss(ctx, disc, conditioning, z_source, z_target, groups, &classes, grl_lambda)
}

/// Background term (class 0) for one level.
pub fn bkg_align_loss(
    ctx: &mut Ctx,
    disc: &Mlp,
    conditioning: &ClassConditioning,
    z_source: Var,
    z_target: Var,
    groups: &LevelGroups,
    grl_lambda: f64,
) -> Var {
    semantic_level_loss(ctx, disc, conditioning, z_source, z_target, groups, &[0], grl_lambda)
}

/// `Σ_l λ_l (local_l + bkg_l)`.
pub fn sada_loss(ctx: &mut Ctx, local: &[Var], bkg: &[Var], level_weights: &[f64]) -> Var {
    assert_eq!(local.len(), level_weights.len());
    assert_eq!(bkg.len(), level_weights.len());
    let terms: Vec<(Var, f64)> = local
        .iter()
        .zip(level_weights)
        .chain(bkg.iter().zip(level_weights))
        .map(|(v, w)| (*v, *w))
        .collect();
    if terms.is_empty() {
        return ctx.g.constant_scalar(0.0);
    }
    ctx.g.combine(&terms)
}

/// Scalar form of [`sada_loss`].
pub fn sada_loss_value(local: &[f64], bkg: &[f64], level_weights: &[f64]) -> f64 {
    local
        .iter()
        .zip(bkg)
        .zip(level_weights)
        .map(|((a, b), w)| w * (a + b))
        .sum()
}

/// Global adversarial term for one level: every valid anchor, conditioned on
/// a zero vector, against its domain label.
pub fn global_level_loss(
    ctx: &mut Ctx,
    disc: &Mlp,
    z_source: Var,
    z_target: Var,
    source_valid: &[bool],
    target_valid: &[bool],
    grl_lambda: f64,
) -> Var {
    let all = |valid: &[bool]| vec![valid.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i).collect::<Vec<_>>()];
    let s = domain_term(ctx, disc, None, z_source, &all(source_valid), &[0], SOURCE_LABEL, grl_lambda);
    let t = domain_term(ctx, disc, None, z_target, &all(target_valid), &[0], TARGET_LABEL, grl_lambda);
    ctx.g.sum_scalars(&[s, t])
}

/// `Σ_l λ_l · global_l`.
pub fn global_dann_loss(ctx: &mut Ctx, per_level: &[Var], level_weights: &[f64]) -> Var {
    let terms: Vec<(Var, f64)> = per_level.iter().zip(level_weights).map(|(v, w)| (*v, *w)).collect();
    if terms.is_empty() {
        return ctx.g.constant_scalar(0.0);
    }
    ctx.g.combine(&terms)
}

/// EMA class centroids per level and domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidState {
    pub decay: f64,
    /// `source[l][i]` for classes `i = 1..=C` (index `i - 1`).
    pub source: Vec<Vec<Option<Vec<f64>>>>,
    pub target: Vec<Vec<Option<Vec<f64>>>>,
}

impl CentroidState {
    pub fn new(levels: usize, class_count: usize, decay: f64) -> Self {
        Self {
            decay,
            source: vec![vec![None; class_count]; levels],
            target: vec![vec![None; class_count]; levels],
        }
    }
}

fn centroid_var(
    ctx: &mut Ctx,
    z: Var,
    rows: &[usize],
    slot: &mut Option<Vec<f64>>,
    decay: f64,
) -> Option<Var> {
    let old = slot.as_ref().map(|v| Array2::from_shape_vec((1, v.len()), v.clone()).unwrap());
    let var = if rows.is_empty() {
        let old = old?;
        ctx.g.leaf(old)
    } else {
        let sel = ctx.g.gather_rows(z, rows.to_vec());
        let batch = ctx.g.mean_rows(sel);
        match old {
            Some(old) => {
                let scaled = ctx.g.scale(batch, 1.0 - decay);
                ctx.g.add_const(scaled, &(old * decay))
            }
            None => batch,
        }
    };
    *slot = Some(ctx.g.value(var).iter().copied().collect());
    Some(var)
}

/// Updates the EMA centroids from this batch's groups and returns the mean
/// MSE between source and target centroids over every `(level, class)` pair
/// where both exist. Gradients reach the embeddings through the batch means.
pub fn mstn_centroid_loss(
    ctx: &mut Ctx,
    groups: &AnchorGroups,
    z_source: &[Var],
    z_target: &[Var],
    state: &mut CentroidState,
) -> Var {
    let decay = state.decay;
    let mut terms = Vec::new();
    for (l, lg) in groups.levels.iter().enumerate() {
        for i in 1..=lg.class_count() {
            let s = centroid_var(ctx, z_source[l], &lg.source[i], &mut state.source[l][i - 1], decay);
            let t = centroid_var(ctx, z_target[l], &lg.target[i], &mut state.target[l][i - 1], decay);
            if let (Some(s), Some(t)) = (s, t) {
                let d = ctx.g.sub(s, t);
                terms.push(ctx.g.mean_square(d));
            }
        }
    }
    if terms.is_empty() {
        return ctx.g.constant_scalar(0.0);
    }
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, w)).collect();
    ctx.g.combine(&weighted)
}

/// Writes embedding rows as CSV: `level,class,domain,video,anchor,f0..`.
pub fn write_embedding_rows<W: Write>(
    out: &mut W,
    level: usize,
    class: usize,
    domain: Domain,
    video: &str,
    rows: &[(usize, Array1<f64>)],
) -> std::io::Result<()> {
    for (anchor, emb) in rows {
        write!(out, "{level},{class},{domain},{video},{anchor}")?;
        for x in emb {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn pseudo_label_threshold() {
        let p = array![[0.2, 0.7, 0.1]];
        assert_eq!(pseudo_labels(&p, 0.6), vec![2]);
        assert_eq!(pseudo_labels(&p, 0.75), vec![0]);
        assert_eq!(pseudo_labels(&p, 0.7), vec![0]);
    }

    #[test]
    fn partition_of_valid_rows() {
        let labels = vec![0, 2, 1, 0, 2, 3];
        let valid = vec![true, true, false, true, true, true];
        let g = bucketize(&labels, &valid, 3);
        assert_eq!(g[0], vec![0, 3]);
        assert_eq!(g[1], Vec::<usize>::new());
        assert_eq!(g[2], vec![1, 4]);
        assert_eq!(g[3], vec![5]);
        let total: usize = g.iter().map(Vec::len).sum();
        assert_eq!(total, valid.iter().filter(|v| **v).count());
    }

    #[test]
    fn fixed_tables_have_expected_form() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let oh = ClassConditioning::new(ConditioningMode::OneHot, 3, 8, &mut store, &mut rng);
        let t = oh.table(&store);
        assert_eq!(t.row(2).sum(), 1.0);
        assert_eq!(t[[2, 2]], 1.0);
        assert!(oh.param().is_none());
        let learn = ClassConditioning::new(ConditioningMode::Learnable, 3, 8, &mut store, &mut rng);
        assert!(learn.param().is_some());
        let s = sinusoidal_table(4, 6);
        assert_eq!(s[[0, 0]], 0.0);
        assert_eq!(s[[0, 1]], 1.0);
    }

    #[test]
    fn sada_scalar_form() {
        assert_eq!(sada_loss_value(&[0.2, 0.5], &[0.3, 0.5], &[0.0, 0.0]), 0.0);
        assert!((sada_loss_value(&[0.2, 0.5], &[0.3, 0.5], &[1.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn centroid_loss_hand_example() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store);
        let zs = ctx.g.leaf(array![[0.0, 0.0], [2.0, 2.0]]);
        let zt = ctx.g.leaf(array![[0.0, 0.0]]);
        let groups = AnchorGroups {
            levels: vec![LevelGroups {
                source: vec![vec![], vec![0, 1]],
                target: vec![vec![], vec![0]],
            }],
        };
        let mut state = CentroidState::new(1, 1, 0.0);
        let l = mstn_centroid_loss(&mut ctx, &groups, &[zs], &[zt], &mut state);
        assert!((ctx.g.scalar(l) - 1.0).abs() < 1e-15);
        assert_eq!(state.source[0][0], Some(vec![1.0, 1.0]));

        // Frozen centroids ignore new batches.
        state.decay = 1.0;
        let zs2 = ctx.g.leaf(array![[5.0, 5.0], [7.0, 7.0]]);
        mstn_centroid_loss(&mut ctx, &groups, &[zs2], &[zt], &mut state);
        assert_eq!(state.source[0][0], Some(vec![1.0, 1.0]));
    }
}
