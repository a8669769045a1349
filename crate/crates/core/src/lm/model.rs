//! Shared visual projection, multimodal sequence assembly, the causal
//! decoder with a tied output head, and decoding.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::error::{Error, Result};
use crate::lm::vocab::{BOS, EOS, PAD, VIS};
use crate::nn::{self, BlockDims, ParamGroup, BLOCK_TENSORS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmDims {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
    pub context: usize,
}

impl Default for LmDims {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 2,
            heads: 4,
            ff: 256,
            context: 256,
        }
    }
}

/// Init scale of the token and position tables.
pub const LM_EMBED_STD: f32 = 0.08;
/// Init scale of every other weight matrix in the projection and decoder.
/// At 0.02 the decoder sits on a plateau where it copies answer
/// statistics and never learns to bind questions to visual tokens.
pub const LM_WEIGHT_STD: f32 = 0.12;

/// `[w1 (d_v×d), b1, w2 (d×d), b2]`.
pub fn init_projection<R: Rng + ?Sized>(d_v: usize, dim: usize, rng: &mut R) -> Vec<Tensor> {
    vec![
        Tensor::trunc_normal(&[d_v, dim], LM_WEIGHT_STD, rng),
        Tensor::zeros(&[dim]),
        Tensor::trunc_normal(&[dim, dim], LM_WEIGHT_STD, rng),
        Tensor::zeros(&[dim]),
    ]
}

/// `[tok_emb (V×d), pos (context×d), blocks…, lnf_g, lnf_b]`; the token
/// table doubles as the output head.
pub fn init_lm<R: Rng + ?Sized>(dims: &LmDims, vocab: usize, rng: &mut R) -> Vec<Tensor> {
    let mut t = vec![
        Tensor::trunc_normal(&[vocab, dims.dim], LM_EMBED_STD, rng),
        Tensor::trunc_normal(&[dims.context, dims.dim], LM_EMBED_STD, rng),
    ];
    let bd = BlockDims {
        dim: dims.dim,
        heads: dims.heads,
        ff: dims.ff,
    };
    for _ in 0..dims.blocks {
        t.extend(nn::init_block_scaled(bd, LM_WEIGHT_STD, rng));
    }
    t.push(Tensor::ones(&[dims.dim]));
    t.push(Tensor::zeros(&[dims.dim]));
    t
}

/// `linear → GeLU → linear`, row-wise.
pub fn project_var(g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
    let h = nn::linear(g, x, p[0], p[1])?;
    let h = g.gelu(h)?;
    nn::linear(g, h, p[2], p[3])
}

/// Projects a feature matrix (`n × d_v`) into LM embedding space.
pub fn project(feats: &Tensor, projection: &ParamGroup) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = projection.bind_frozen(&mut g)?;
    let x = g.frozen_leaf(feats)?;
    let z = project_var(&mut g, &p, x)?;
    Ok(g.to_tensor(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Visual,
    Text,
}

/// One sequence to embed: token ids (with at most one VIS placeholder),
/// an optional loss mask over `ids`, and the visual feature matrix that
/// replaces the placeholder.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub ids: &'a [usize],
    pub mask: Option<&'a [bool]>,
    pub visual: Option<&'a Tensor>,
}

/// Embedded, packed sequences. Per-position vectors span all sequences
/// back to back; `lengths` delimits them.
#[derive(Debug, Clone)]
pub struct AssembledBatch {
    pub embeddings: Var,
    pub lengths: Vec<usize>,
    pub sources: Vec<Source>,
    /// Token id at text positions, `None` at visual positions.
    pub tokens: Vec<Option<usize>>,
    /// Answer-region mask after placeholder expansion.
    pub mask: Vec<bool>,
}

fn check_slots(input: &SequenceInput) -> Result<Option<usize>> {
    let slots: Vec<usize> = input
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == VIS)
        .map(|(i, _)| i)
        .collect();
    match (input.visual, slots.len()) {
        (Some(_), 1) => Ok(Some(slots[0])),
        (Some(_), n) => Err(Error::VisualSlot(n)),
        (None, 0) => Ok(None),
        (None, n) => Err(Error::VisualSlot(n)),
    }
}

/// Expands each VIS placeholder into projected visual rows and embeds
/// every other position through the token table; positional embeddings
/// are added to all positions.
pub fn assemble(
    g: &mut Graph,
    projection: &[Var],
    lm: &[Var],
    dims: &LmDims,
    inputs: &[SequenceInput],
) -> Result<AssembledBatch> {
    if inputs.is_empty() {
        return Err(Error::EmptyCorpus("no sequences to assemble".into()));
    }
    let vocab = g.shape(lm[0])[0];
    let mut feats = Vec::new();
    let mut feat_rows = 0;
    let mut d_v = None;
    let mut slots = Vec::with_capacity(inputs.len());
    for input in inputs {
        let slot = check_slots(input)?;
        if let Some(mask) = input.mask {
            if mask.len() != input.ids.len() {
                return Err(Error::LengthMismatch {
                    left: input.ids.len(),
                    right: mask.len(),
                });
            }
        }
        if let Some(v) = input.visual {
            if v.shape().len() != 2 {
                return Err(Error::shape("assemble", "visual features must be a matrix"));
            }
            let (r, c) = v.dims2();
            if *d_v.get_or_insert(c) != c {
                return Err(Error::shape("assemble", "visual feature widths differ"));
            }
            feats.extend_from_slice(v.data());
            feat_rows += r;
        }
        slots.push(slot);
    }
    let table = if feat_rows > 0 {
        let x = g.constant(vec![feat_rows, d_v.unwrap_or(0)], feats)?;
        let z = project_var(g, projection, x)?;
        g.concat_rows(&[lm[0], z])?
    } else {
        lm[0]
    };

    let mut rows = Vec::new();
    let mut positions = Vec::new();
    let mut batch = AssembledBatch {
        embeddings: lm[0],
        lengths: Vec::with_capacity(inputs.len()),
        sources: Vec::new(),
        tokens: Vec::new(),
        mask: Vec::new(),
    };
    let mut next_visual = vocab;
    for (input, slot) in inputs.iter().zip(&slots) {
        let start = rows.len();
        for (i, &id) in input.ids.iter().enumerate() {
            if Some(i) == *slot {
                let n = input.visual.map_or(0, |v| v.shape()[0]);
                rows.extend(next_visual..next_visual + n);
                next_visual += n;
                batch.sources.extend(std::iter::repeat_n(Source::Visual, n));
                batch.tokens.extend(std::iter::repeat_n(None, n));
                batch.mask.extend(std::iter::repeat_n(false, n));
            } else {
                if id >= vocab {
                    return Err(Error::IdOutOfRange { id, vocab });
                }
                rows.push(id);
                batch.sources.push(Source::Text);
                batch.tokens.push(Some(id));
                batch.mask.push(input.mask.is_some_and(|m| m[i]));
            }
        }
        let len = rows.len() - start;
        if len > dims.context {
            return Err(Error::ContextOverflow {
                len,
                window: dims.context,
            });
        }
        positions.extend(0..len);
        batch.lengths.push(len);
    }
    let tok = g.gather(table, &rows)?;
    let pos = g.gather(lm[1], &positions)?;
    batch.embeddings = g.add(tok, pos)?;
    Ok(batch)
}

/// Causal decoder over packed sequences, returning `rows × V` logits.
pub fn forward_lm(g: &mut Graph, lm: &[Var], dims: &LmDims, batch: &AssembledBatch) -> Result<Var> {
    if let Some(&len) = batch.lengths.iter().find(|&&l| l > dims.context) {
        return Err(Error::ContextOverflow {
            len,
            window: dims.context,
        });
    }
    let mut x = batch.embeddings;
    for b in 0..dims.blocks {
        let p = &lm[2 + b * BLOCK_TENSORS..2 + (b + 1) * BLOCK_TENSORS];
        x = nn::block_forward(g, p, x, dims.heads, &batch.lengths, true)?;
    }
    let base = 2 + dims.blocks * BLOCK_TENSORS;
    let x = g.layer_norm(x, lm[base], lm[base + 1])?;
    let head = g.transpose(lm[0])?;
    g.matmul(x, head)
}

/// Next-token targets and mask: row `i` predicts the token at `i + 1` of
/// the same sequence, and counts when that token is in the answer region.
pub fn shifted_targets(batch: &AssembledBatch) -> (Vec<usize>, Vec<bool>) {
    let n = batch.tokens.len();
    let mut targets = vec![0; n];
    let mut mask = vec![false; n];
    let mut start = 0;
    for &len in &batch.lengths {
        for i in start..start + len - 1 {
            if let (Some(t), true) = (batch.tokens[i + 1], batch.mask[i + 1]) {
                targets[i] = t;
                mask[i] = true;
            }
        }
        start += len;
    }
    (targets, mask)
}

/// Masked next-token NLL over the answer regions of the whole batch.
pub fn lm_loss(g: &mut Graph, logits: Var, batch: &AssembledBatch) -> Result<Var> {
    let (targets, mask) = shifted_targets(batch);
    g.masked_cross_entropy(logits, &targets, &mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f32, seed: u64 },
}

pub const DEFAULT_MAX_NEW: usize = 32;

/// Structural ids that are never emitted.
const SUPPRESSED: [usize; 3] = [PAD, BOS, VIS];

/// Decodes a continuation of `prompt` until EOS or `max_new` tokens; the
/// returned suffix excludes the EOS.
pub fn generate(
    visual: Option<&Tensor>,
    prompt: &[usize],
    projection: &ParamGroup,
    lm: &ParamGroup,
    dims: &LmDims,
    max_new: usize,
    mode: Decoding,
) -> Result<Vec<usize>> {
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    let mut rng = match mode {
        Decoding::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    // visual rows are projected once and reused at every step
    let projected = visual.map(|v| project(v, projection)).transpose()?;
    for _ in 0..max_new {
        let mut logits = last_logits(&ids, projected.as_ref(), lm, dims)?;
        for t in SUPPRESSED {
            logits[t] = f32::NEG_INFINITY;
        }
        let next = match (&mode, rng.as_mut()) {
            (Decoding::Sample { temperature, .. }, Some(rng)) => {
                let mut p: Vec<f32> = logits.iter().map(|l| l / temperature.max(1e-6)).collect();
                softmax_in_place(&mut p);
                WeightedIndex::new(&p)
                    .map_err(|e| Error::InvalidConfig(format!("sampling weights: {e}")))?
                    .sample(rng)
            }
            _ => argmax(&logits),
        };
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Logits at the final position, with visual rows already projected.
fn last_logits(ids: &[usize], projected: Option<&Tensor>, lm: &ParamGroup, dims: &LmDims) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let p = lm.bind_frozen(&mut g)?;
    let vocab = g.shape(p[0])[0];
    let input = SequenceInput {
        ids,
        mask: None,
        visual: projected,
    };
    let slot = check_slots(&input)?;
    let n_vis = projected.map_or(0, |z| z.shape()[0]);
    let len = ids.len() - usize::from(slot.is_some()) + n_vis;
    if len > dims.context {
        return Err(Error::ContextOverflow {
            len,
            window: dims.context,
        });
    }
    let table = match projected {
        Some(z) => {
            let z = g.frozen_leaf(z)?;
            g.concat_rows(&[p[0], z])?
        }
        None => p[0],
    };
    let mut rows = Vec::with_capacity(len);
    for (i, &id) in ids.iter().enumerate() {
        if Some(i) == slot {
            rows.extend(vocab..vocab + n_vis);
        } else {
            if id >= vocab {
                return Err(Error::IdOutOfRange { id, vocab });
            }
            rows.push(id);
        }
    }
    let positions: Vec<usize> = (0..len).collect();
    let tok = g.gather(table, &rows)?;
    let pos = g.gather(p[1], &positions)?;
    let emb = g.add(tok, pos)?;
    let batch = AssembledBatch {
        embeddings: emb,
        lengths: vec![len],
        sources: Vec::new(),
        tokens: Vec::new(),
        mask: Vec::new(),
    };
    let logits = forward_lm(&mut g, &p, dims, &batch)?;
    let all = g.value(logits);
    Ok(all[(len - 1) * vocab..].to_vec())
}

/// Teacher-forced per-position NLL of `ids` after `prompt`; entry `i` is
/// the NLL of `ids[i]`.
pub fn continuation_nll(
    visual: Option<&Tensor>,
    prompt: &[usize],
    ids: &[usize],
    projection: &ParamGroup,
    lm: &ParamGroup,
    dims: &LmDims,
) -> Result<Vec<f32>> {
    let projected = visual.map(|v| project(v, projection)).transpose()?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut logits = last_logits(&seq, projected.as_ref(), lm, dims)?;
        softmax_in_place(&mut logits);
        out.push(-logits[id].ln());
        seq.push(id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::vocab::{Vocabulary, ASSISTANT, USER};

    fn model(seed: u64) -> (ParamGroup, ParamGroup, LmDims) {
        let dims = LmDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = ParamGroup::new("projection", init_projection(32, dims.dim, &mut rng));
        let lm = ParamGroup::new("lm", init_lm(&dims, Vocabulary::glyph_world().len(), &mut rng));
        (proj, lm, dims)
    }

    fn feats(rows: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::trunc_normal(&[rows, 32], 1.0, &mut rng)
    }

    #[test]
    fn zero_row_projects_to_closed_form() {
        let (proj, _, _) = model(1);
        let mut p = proj.clone();
        p.tensors_mut()[1] = Tensor::new(vec![64], (0..64).map(|i| i as f32 / 32.0 - 1.0).collect()).unwrap();
        p.tensors_mut()[3] = Tensor::filled(&[64], 0.25);
        let out = project(&Tensor::zeros(&[1, 32]), &p).unwrap();
        let b1 = p.tensors()[1].data();
        let w2 = p.tensors()[2].data();
        for j in 0..64 {
            let mut expect = 0.25f64;
            for i in 0..64 {
                expect += crate::autograd::gelu_scalar(b1[i]) as f64 * w2[i * 64 + j] as f64;
            }
            assert!((out.data()[j] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_projection_is_gelu() {
        let mut eye = vec![0.0; 32 * 32];
        (0..32).for_each(|i| eye[i * 32 + i] = 1.0);
        let eye = Tensor::new(vec![32, 32], eye).unwrap();
        let p = ParamGroup::new(
            "projection",
            vec![eye.clone(), Tensor::zeros(&[32]), eye, Tensor::zeros(&[32])],
        );
        let x = feats(3, 2);
        let out = project(&x, &p).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, crate::autograd::gelu_scalar(*v));
        }
    }

    #[test]
    fn assembled_length_counts_visual_rows() {
        let (proj, lm, dims) = model(0);
        let mut g = Graph::new();
        let pp = proj.bind(&mut g).unwrap();
        let pl = lm.bind(&mut g).unwrap();
        let ids = [BOS, 4, VIS, 10, 11, 12, 13, 14, 5, 15];
        let f = feats(16, 0);
        let batch = assemble(
            &mut g,
            &pp,
            &pl,
            &dims,
            &[SequenceInput { ids: &ids, mask: None, visual: Some(&f) }],
        )
        .unwrap();
        assert_eq!(batch.lengths, vec![25]);
        assert_eq!(batch.sources.iter().filter(|s| **s == Source::Visual).count(), 16);

        let text = assemble(
            &mut g,
            &pp,
            &pl,
            &dims,
            &[SequenceInput { ids: &[BOS, 10, 11], mask: None, visual: None }],
        )
        .unwrap();
        assert_eq!(text.lengths, vec![3]);

        let two = [VIS, 10, VIS];
        let err = assemble(
            &mut g,
            &pp,
            &pl,
            &dims,
            &[SequenceInput { ids: &two, mask: None, visual: Some(&f) }],
        );
        assert!(matches!(err, Err(Error::VisualSlot(2))));
        let none = [BOS, 10];
        assert!(matches!(
            assemble(&mut g, &pp, &pl, &dims, &[SequenceInput { ids: &none, mask: None, visual: Some(&f) }]),
            Err(Error::VisualSlot(0))
        ));
    }

    #[test]
    fn context_overflow_is_reported() {
        let (proj, lm, mut dims) = model(0);
        dims.context = 8;
        let mut g = Graph::new();
        let pp = proj.bind(&mut g).unwrap();
        let pl = ParamGroup::new("lm", {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            init_lm(&dims, lm.tensors()[0].shape()[0], &mut rng)
        })
        .bind(&mut g)
        .unwrap();
        let ids = [BOS, VIS, 10];
        let f = feats(16, 0);
        assert!(matches!(
            assemble(&mut g, &pp, &pl, &dims, &[SequenceInput { ids: &ids, mask: None, visual: Some(&f) }]),
            Err(Error::ContextOverflow { len: 18, window: 8 })
        ));
    }

    fn logits_for(ids: &[usize], lm: &ParamGroup, proj: &ParamGroup, dims: &LmDims, f: &Tensor) -> Vec<f32> {
        let mut g = Graph::new();
        let pp = proj.bind(&mut g).unwrap();
        let pl = lm.bind(&mut g).unwrap();
        let batch = assemble(&mut g, &pp, &pl, dims, &[SequenceInput { ids, mask: None, visual: Some(f) }]).unwrap();
        let l = forward_lm(&mut g, &pl, dims, &batch).unwrap();
        g.value(l).to_vec()
    }

    #[test]
    fn perturbing_the_future_leaves_the_past_bit_identical() {
        let (proj, lm, dims) = model(3);
        let v = lm.tensors()[0].shape()[0];
        let f = feats(16, 1);
        let a = [BOS, USER, VIS, 10, 11, 12, ASSISTANT, 13];
        for j in 3..a.len() {
            let mut b = a;
            b[j] = 20;
            let la = logits_for(&a, &lm, &proj, &dims, &f);
            let lb = logits_for(&b, &lm, &proj, &dims, &f);
            // position j in token space sits at row j + 15 after expansion
            let row = j + 15;
            assert_eq!(la[..row * v], lb[..row * v]);
        }
    }

    #[test]
    fn single_token_gives_one_row_of_logits() {
        let (proj, lm, dims) = model(0);
        let mut g = Graph::new();
        let pp = proj.bind(&mut g).unwrap();
        let pl = lm.bind(&mut g).unwrap();
        let batch = assemble(&mut g, &pp, &pl, &dims, &[SequenceInput { ids: &[BOS], mask: None, visual: None }]).unwrap();
        let l = forward_lm(&mut g, &pl, &dims, &batch).unwrap();
        assert_eq!(g.shape(l), &[1, 43]);
    }

    #[test]
    fn untrained_nll_is_near_ln_v() {
        let (proj, lm, dims) = model(9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ids: Vec<usize> = std::iter::once(BOS).chain((0..40).map(|_| rng.gen_range(7..43))).collect();
        let mask = vec![true; ids.len()];
        let mut g = Graph::new();
        let pp = proj.bind(&mut g).unwrap();
        let pl = lm.bind(&mut g).unwrap();
        let batch = assemble(&mut g, &pp, &pl, &dims, &[SequenceInput { ids: &ids, mask: Some(&mask), visual: None }]).unwrap();
        let logits = forward_lm(&mut g, &pl, &dims, &batch).unwrap();
        let loss = lm_loss(&mut g, logits, &batch).unwrap();
        assert!((g.scalar_value(loss) - (43f32).ln()).abs() < 0.5);
    }

    #[test]
    fn visual_rows_are_never_targets() {
        let (proj, lm, dims) = model(0);
        let mut g = Graph::new();
        let pp = proj.bind(&mut g).unwrap();
        let pl = lm.bind(&mut g).unwrap();
        let ids = [BOS, VIS, 10, 11, EOS];
        let mask = [false, true, false, true, true];
        let f = feats(4, 0);
        let batch = assemble(&mut g, &pp, &pl, &dims, &[SequenceInput { ids: &ids, mask: Some(&mask), visual: Some(&f) }]).unwrap();
        assert_eq!(batch.mask, vec![false, false, false, false, false, false, true, true]);
        let (targets, m) = shifted_targets(&batch);
        assert_eq!(m, vec![false, false, false, false, false, true, true, false]);
        assert_eq!(&targets[5..7], &[11, EOS]);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let (proj, lm, dims) = model(5);
        let f = feats(16, 3);
        let prompt = [BOS, USER, VIS, 10, ASSISTANT];
        let none = generate(Some(&f), &prompt, &proj, &lm, &dims, 0, Decoding::Greedy).unwrap();
        assert!(none.is_empty());
        let a = generate(Some(&f), &prompt, &proj, &lm, &dims, 6, Decoding::Greedy).unwrap();
        let b = generate(Some(&f), &prompt, &proj, &lm, &dims, 6, Decoding::Greedy).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        let mode = Decoding::Sample { temperature: 1.0, seed: 3 };
        let s1 = generate(Some(&f), &prompt, &proj, &lm, &dims, 6, mode).unwrap();
        let s2 = generate(Some(&f), &prompt, &proj, &lm, &dims, 6, mode).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn greedy_tokens_minimise_position_nll() {
        let (proj, lm, dims) = model(8);
        let f = feats(16, 8);
        let prompt = [BOS, USER, VIS, 12, ASSISTANT];
        let out = generate(Some(&f), &prompt, &proj, &lm, &dims, 4, Decoding::Greedy).unwrap();
        let base = continuation_nll(Some(&f), &prompt, &out, &proj, &lm, &dims).unwrap();
        for pos in 0..out.len() {
            for sub in (0..43).filter(|t| !SUPPRESSED.contains(t)) {
                let mut alt = out.clone();
                alt[pos] = sub;
                let nll = continuation_nll(Some(&f), &prompt, &alt[..=pos], &proj, &lm, &dims).unwrap();
                assert!(base[pos] <= nll[pos]);
            }
        }
    }

    #[test]
    fn projection_has_no_modality_branch() {
        let (proj, _, _) = model(0);
        let f = feats(5, 0);
        assert_eq!(project(&f, &proj).unwrap(), project(&f.clone(), &proj).unwrap());
    }
}
