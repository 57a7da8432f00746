//! Shared multi-resolution temporal encoder.
//!
//! Input features are projected to the internal width, then level 0 is one
//! gated residual convolution block over the projection, and every further
//! level applies another block to the previous level before stride-2 max
//! pooling. Masks pool by logical OR.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::check_divisible;
use crate::autograd::Var;
use crate::error::Result;
use crate::nn::{mask_column, Conv1d, Ctx, Linear, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    pub levels: usize,
    /// Width of the incoming backbone features.
    pub input_dim: usize,
    /// Internal embedding width `F`.
    pub feature_dim: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: 6,
            input_dim: 16,
            feature_dim: 64,
        }
    }
}

/// `y = x + relu(conv_h(x)) ⊙ sigmoid(conv_g(x))`, masked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatedBlock {
    pub conv: Conv1d,
    pub gate: Conv1d,
}

impl GatedBlock {
    fn forward(&self, ctx: &mut Ctx, x: Var, mask: &[bool]) -> Var {
        let h = self.conv.forward(ctx, x);
        let h = ctx.g.relu(h);
        let gate = self.gate.forward(ctx, x);
        let gate = ctx.g.sigmoid(gate);
        let hg = ctx.g.mul(h, gate);
        let y = ctx.g.add(x, hg);
        ctx.g.mul_const(y, mask_column(mask))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pyramid {
    pub config: PyramidConfig,
    pub projection: Linear,
    pub blocks: Vec<GatedBlock>,
}

/// Per-level embeddings `Z_l` (`T_l×F`) and their validity masks.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<Var>,
    pub masks: Vec<Vec<bool>>,
}

impl PyramidFeatures {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Halves a mask, keeping a pooled position valid if either input was.
pub fn pool_mask(mask: &[bool]) -> Vec<bool> {
    mask.chunks(2).map(|c| c.iter().any(|m| *m)).collect()
}

impl Pyramid {
    pub fn new(config: PyramidConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let f = config.feature_dim;
        let projection = Linear::new(store, "pyramid.proj", ParamGroup::Detector, config.input_dim, f, rng);
        let blocks = (0..config.levels)
            .map(|l| GatedBlock {
                conv: Conv1d::new(store, &format!("pyramid.{l}.conv"), ParamGroup::Detector, f, f, rng),
                gate: Conv1d::new(store, &format!("pyramid.{l}.gate"), ParamGroup::Detector, f, f, rng),
            })
            .collect();
        Self {
            config,
            projection,
            blocks,
        }
    }

    /// Linear map to the internal width followed by ReLU.
    pub fn project(&self, ctx: &mut Ctx, raw: Var) -> Var {
        let y = self.projection.forward(ctx, raw);
        ctx.g.relu(y)
    }

    pub fn encode(&self, ctx: &mut Ctx, projected: Var, mask: &[bool]) -> Result<PyramidFeatures> {
        let t = ctx.g.value(projected).nrows();
        check_divisible(t, self.config.levels)?;
        assert_eq!(mask.len(), t, "mask length must match sequence length");
        let x0 = ctx.g.mul_const(projected, mask_column(mask));
        let mut levels = Vec::with_capacity(self.config.levels);
        let mut masks = Vec::with_capacity(self.config.levels);
        let z0 = self.blocks[0].forward(ctx, x0, mask);
        levels.push(z0);
        masks.push(mask.to_vec());
        for block in &self.blocks[1..] {
            let prev = *levels.last().unwrap();
            let prev_mask = masks.last().unwrap().clone();
            let h = block.forward(ctx, prev, &prev_mask);
            levels.push(ctx.g.max_pool2(h));
            masks.push(pool_mask(&prev_mask));
        }
        Ok(PyramidFeatures { levels, masks })
    }

    /// `project` then `encode` on a raw `T×F_in` matrix.
    pub fn forward(&self, ctx: &mut Ctx, raw: &Array2<f64>, mask: &[bool]) -> Result<PyramidFeatures> {
        let x = ctx.g.leaf(raw.clone());
        let p = self.project(ctx, x);
        self.encode(ctx, p, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(levels: usize, fin: usize, f: usize) -> (Pyramid, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Pyramid::new(
            PyramidConfig {
                levels,
                input_dim: fin,
                feature_dim: f,
            },
            &mut store,
            &mut rng,
        );
        (p, store)
    }

    #[test]
    fn projection_shape_and_zero_input() {
        let (p, mut store) = build(1, 16, 64);
        let mut ctx = Ctx::new(&store);
        let x = ctx.g.leaf(Array2::from_elem((8, 16), 0.3));
        let y = p.project(&mut ctx, x);
        assert_eq!(ctx.g.value(y).dim(), (8, 64));
        drop(ctx);
        store.get_mut(p.projection.b).fill(0.0);
        let mut ctx = Ctx::new(&store);
        let x = ctx.g.leaf(Array2::zeros((8, 16)));
        let y = p.project(&mut ctx, x);
        assert!(ctx.g.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn level_lengths_halve() {
        let (p, store) = build(3, 4, 8);
        let mut ctx = Ctx::new(&store);
        let raw = Array2::from_shape_fn((64, 4), |(i, j)| ((i + j) as f64).sin());
        let out = p.forward(&mut ctx, &raw, &[true; 64]).unwrap();
        let lens: Vec<usize> = out.levels.iter().map(|v| ctx.g.value(*v).nrows()).collect();
        assert_eq!(lens, vec![64, 32, 16]);
        assert!(p.forward(&mut ctx, &Array2::zeros((10, 4)), &[true; 10]).is_err());
    }

    #[test]
    fn fully_masked_input_stays_masked() {
        let (p, store) = build(3, 4, 8);
        let mut ctx = Ctx::new(&store);
        let raw = Array2::zeros((16, 4));
        let out = p.forward(&mut ctx, &raw, &[false; 16]).unwrap();
        for (v, m) in out.levels.iter().zip(&out.masks) {
            assert!(m.iter().all(|x| !x));
            assert!(ctx.g.value(*v).iter().all(|x| *x == 0.0));
        }
    }
}
