//! Parameter groups and the pre-norm transformer block shared by every tower.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{AttentionSpec, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::optim::AdamWState;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f32 = 0.02;

/// A named, individually freezable list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    name: String,
    trainable: bool,
    tensors: Vec<Tensor>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, tensors: Vec<Tensor>) -> Self {
        let mut g = Self {
            name: name.into(),
            trainable: false,
            tensors,
        };
        g.set_trainable(false);
        g
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        for t in &mut self.tensors {
            t.set_requires_grad(trainable);
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every tensor on the tape; gradient tracking follows the group flag.
    pub fn bind(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    /// Puts every tensor on the tape as a constant, whatever the group flag.
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.tensors.iter().map(|t| g.frozen_leaf(t)).collect()
    }

    /// Adds gradients for the vars returned by [`ParamGroup::bind`].
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        if vars.len() != self.tensors.len() {
            return Err(Error::shape(
                "accumulate",
                format!("{} vars for {} tensors in `{}`", vars.len(), self.tensors.len(), self.name),
            ));
        }
        for (t, v) in self.tensors.iter_mut().zip(vars) {
            if let Some(gr) = grads.get(*v) {
                t.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over shapes and little-endian data of every tensor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Applies one optimizer update over `groups` (in construction order) and
/// clears their gradients.
pub fn step_groups(groups: &mut [&mut ParamGroup], opt: &mut AdamWState, lr: f32) -> Result<()> {
    opt.step(groups.iter_mut().flat_map(|g| g.tensors.iter_mut()), lr)?;
    groups.iter_mut().for_each(|g| g.zero_grad());
    Ok(())
}

/// Geometry of a stack of transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
}

/// Tensors per block: ln1 (2), q/k/v/o projections (4), ln2 (2), mlp (4).
pub const BLOCK_TENSORS: usize = 12;

pub fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::trunc_normal(&[rows, cols], INIT_STD, rng)
}

pub fn init_block<R: Rng + ?Sized>(dims: BlockDims, rng: &mut R) -> Vec<Tensor> {
    init_block_scaled(dims, INIT_STD, rng)
}

/// Block with every weight matrix drawn at standard deviation `std`.
pub fn init_block_scaled<R: Rng + ?Sized>(dims: BlockDims, std: f32, rng: &mut R) -> Vec<Tensor> {
    let BlockDims { dim, ff, .. } = dims;
    let mut m = |r: usize, c: usize| Tensor::trunc_normal(&[r, c], std, rng);
    let (q, k, v, o) = (m(dim, dim), m(dim, dim), m(dim, dim), m(dim, dim));
    let (up, down) = (m(dim, ff), m(ff, dim));
    vec![
        Tensor::ones(&[dim]),
        Tensor::zeros(&[dim]),
        q,
        k,
        v,
        o,
        Tensor::ones(&[dim]),
        Tensor::zeros(&[dim]),
        up,
        Tensor::zeros(&[ff]),
        down,
        Tensor::zeros(&[dim]),
    ]
}

/// Pre-norm block: `h = x + Attn(LN(x))`, `out = h + MLP(LN(h))`.
pub fn block_forward(
    g: &mut Graph,
    p: &[Var],
    x: Var,
    heads: usize,
    segments: &[usize],
    causal: bool,
) -> Result<Var> {
    debug_assert_eq!(p.len(), BLOCK_TENSORS);
    let spec = AttentionSpec {
        heads,
        segments: segments.to_vec(),
        causal,
    };
    let a = g.layer_norm(x, p[0], p[1])?;
    let q = g.matmul(a, p[2])?;
    let k = g.matmul(a, p[3])?;
    let v = g.matmul(a, p[4])?;
    let att = g.attention(q, k, v, &spec)?;
    let att = g.matmul(att, p[5])?;
    let h = g.add(x, att)?;
    let m = g.layer_norm(h, p[6], p[7])?;
    let m = g.matmul(m, p[8])?;
    let m = g.add_row(m, p[9])?;
    let m = g.gelu(m)?;
    let m = g.matmul(m, p[10])?;
    let m = g.add_row(m, p[11])?;
    g.add(h, m)
}

/// `x·W + b`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn digest_tracks_every_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = ParamGroup::new("x", init_block(BlockDims { dim: 8, heads: 2, ff: 16 }, &mut rng));
        let before = g.digest();
        assert_eq!(before, g.clone().digest());
        let v = g.tensors_mut()[3].data_mut();
        v[0] = f32::from_bits(v[0].to_bits() ^ 1);
        assert_ne!(before, g.digest());
    }

    #[test]
    fn freezing_flows_to_tensors() {
        let mut g = ParamGroup::new("x", vec![Tensor::zeros(&[2])]);
        assert!(!g.tensors()[0].requires_grad());
        g.set_trainable(true);
        assert!(g.tensors()[0].requires_grad());
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let dims = BlockDims { dim: 8, heads: 2, ff: 16 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let group = ParamGroup::new("b", init_block(dims, &mut rng));
        let run = || {
            let mut g = Graph::new();
            let p = group.bind(&mut g).unwrap();
            let x = g
                .constant(vec![5, 8], (0..40).map(|i| (i as f32 * 0.3).cos()).collect())
                .unwrap();
            let y = block_forward(&mut g, &p, x, 2, &[2, 3], true).unwrap();
            (g.shape(y).to_vec(), g.value(y).to_vec())
        };
        let (shape, a) = run();
        assert_eq!(shape, vec![5, 8]);
        assert_eq!(a, run().1);
    }
}
