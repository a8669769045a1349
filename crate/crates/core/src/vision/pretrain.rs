//! Contrastive alignment of the visual towers to a caption tower, the
//! masked-patch reconstruction baseline, and the alignment-gap diagnostic.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamGroup};
use crate::optim::{AdamWConfig, AdamWState, Schedule};
use crate::tensor::Tensor;
use crate::vision::encoder::{
    stack_patches, text_forward, visual_forward, visual_pool, TextDims, VisionDims,
};
use crate::vision::input::Frame;

pub const DEFAULT_TEMPERATURE: f32 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_ratio: f32,
    pub weight_decay: f32,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            lr: 2e-3,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

/// One visual item (an image, or the sampled frames of a video) and its
/// caption token ids.
#[derive(Debug, Clone)]
pub struct AlignPair<'a> {
    pub frames: Vec<&'a Frame>,
    pub caption: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignTrace {
    pub image: Vec<f32>,
    pub video: Vec<f32>,
}

/// Symmetric InfoNCE over the diagonal of `a·bᵀ/τ`; rows of `a` and `b`
/// are expected to be unit-norm. A single pair has no negatives and
/// yields a constant zero.
pub fn info_nce(g: &mut Graph, a: Var, b: Var, temperature: f32) -> Result<Var> {
    let n = g.shape(a)[0];
    if g.shape(b)[0] != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: g.shape(b)[0],
        });
    }
    if n < 2 {
        return g.constant(vec![1], vec![0.0]);
    }
    let bt = g.transpose(b)?;
    let sim = g.matmul(a, bt)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let logits_t = g.transpose(logits)?;
    let targets: Vec<usize> = (0..n).collect();
    let mask = vec![true; n];
    let ab = g.masked_cross_entropy(logits, &targets, &mask)?;
    let ba = g.masked_cross_entropy(logits_t, &targets, &mask)?;
    let both = g.add(ab, ba)?;
    g.scale(both, 0.5)
}

fn batches<R: Rng>(n: usize, batch: usize, epochs: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                warn!("skipping a contrastive batch of one pair");
                continue;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

fn contrastive_step(
    visual: &ParamGroup,
    text: &ParamGroup,
    dims: &VisionDims,
    text_dims: &TextDims,
    pairs: &[&AlignPair],
    temperature: f32,
) -> Result<(f32, Vec<Var>, Vec<Var>, crate::autograd::Gradients)> {
    let mut g = Graph::new();
    let pv = visual.bind(&mut g)?;
    let pt = text.bind(&mut g)?;
    let frames: Vec<&Frame> = pairs.iter().flat_map(|p| p.frames.iter().copied()).collect();
    let n = dims.tokens_per_frame();
    let x = g.constant(vec![frames.len() * n, dims.patch_len()], stack_patches(dims, &frames)?)?;
    let outs = visual_forward(&mut g, &pv, dims, x, dims.blocks - 1)?;
    let segments: Vec<usize> = pairs.iter().map(|p| p.frames.len() * n).collect();
    let zv = visual_pool(&mut g, &pv, dims, outs[dims.blocks - 1], &segments)?;
    let captions: Vec<Vec<usize>> = pairs.iter().map(|p| p.caption.clone()).collect();
    let zt = text_forward(&mut g, &pt, text_dims, &captions)?;
    let zv = g.l2_normalize(zv)?;
    let zt = g.l2_normalize(zt)?;
    let loss = info_nce(&mut g, zv, zt, temperature)?;
    let value = g.scalar_value(loss);
    let grads = g.backward(loss)?;
    Ok((value, pv, pt, grads))
}

/// Two-phase alignment. Phase 1 trains the image and caption towers on
/// image pairs; phase 2 copies the image tower into the video tower and
/// trains it against the now-frozen caption tower on video pairs. All
/// three groups are left frozen.
#[allow(clippy::too_many_arguments)]
pub fn align_pretrain(
    image: &mut ParamGroup,
    video: &mut ParamGroup,
    text: &mut ParamGroup,
    image_pairs: &[AlignPair],
    video_pairs: &[AlignPair],
    dims: &VisionDims,
    text_dims: &TextDims,
    cfg: &AlignConfig,
) -> Result<AlignTrace> {
    if image_pairs.is_empty() || video_pairs.is_empty() {
        return Err(Error::EmptyCorpus(
            "alignment needs both image-caption and video-caption pairs".into(),
        ));
    }
    if cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(Error::InvalidConfig(
            "alignment needs batch_size >= 2 and epochs >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut trace = AlignTrace::default();

    image.set_trainable(true);
    text.set_trainable(true);
    video.set_trainable(false);
    let plan = batches(image_pairs.len(), cfg.batch_size, cfg.epochs, &mut rng);
    let sched = Schedule::new(cfg.lr, plan.len().max(1), cfg.warmup_ratio)?;
    let mut opt = AdamWState::new(adam, image.tensors().iter().chain(text.tensors()));
    for (step, idx) in plan.iter().enumerate() {
        let pairs: Vec<&AlignPair> = idx.iter().map(|&i| &image_pairs[i]).collect();
        let (loss, pv, pt, grads) =
            contrastive_step(image, text, dims, text_dims, &pairs, cfg.temperature)
                .map_err(|e| diverged(step, e))?;
        image.accumulate(&grads, &pv)?;
        text.accumulate(&grads, &pt)?;
        nn::step_groups(&mut [image, text], &mut opt, sched.lr(step)?)?;
        debug!("align image step {step} loss {loss:.4}");
        trace.image.push(loss);
    }

    image.set_trainable(false);
    text.set_trainable(false);
    *video = ParamGroup::new(video.name().to_string(), image.tensors().to_vec());
    video.set_trainable(true);
    let plan = batches(video_pairs.len(), cfg.batch_size, cfg.epochs, &mut rng);
    let sched = Schedule::new(cfg.lr, plan.len().max(1), cfg.warmup_ratio)?;
    let mut opt = AdamWState::new(adam, video.tensors());
    for (step, idx) in plan.iter().enumerate() {
        let pairs: Vec<&AlignPair> = idx.iter().map(|&i| &video_pairs[i]).collect();
        let (loss, pv, _, grads) =
            contrastive_step(video, text, dims, text_dims, &pairs, cfg.temperature)
                .map_err(|e| diverged(step, e))?;
        video.accumulate(&grads, &pv)?;
        nn::step_groups(&mut [video], &mut opt, sched.lr(step)?)?;
        debug!("align video step {step} loss {loss:.4}");
        trace.video.push(loss);
    }
    video.set_trainable(false);
    Ok(trace)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NumericFault { .. } => Error::Diverged {
            step,
            batch: step,
            source: Box::new(e),
        },
        other => other,
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean cosine of matched pairs minus mean cosine of all unmatched pairs.
pub fn alignment_gap(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::NotEnoughMaterial(
            "alignment gap needs at least two matched pairs".into(),
        ));
    }
    let mut matched = 0.0;
    let mut unmatched = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = cosine(&a[i], &b[j]);
            if i == j {
                matched += c;
            } else {
                unmatched += c;
            }
        }
    }
    Ok(matched / n as f64 - unmatched / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_ratio: f32,
    pub mask_ratio: f32,
    pub seed: u64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            lr: 2e-3,
            warmup_ratio: 0.03,
            mask_ratio: 0.5,
            seed: 0,
        }
    }
}

/// Trains `tower` to reconstruct randomly masked patches through a linear
/// decoder that is discarded afterwards. Returns the per-step loss trace.
pub fn mae_pretrain(
    tower: &mut ParamGroup,
    images: &[&Frame],
    dims: &VisionDims,
    cfg: &MaeConfig,
) -> Result<Vec<f32>> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus("no images for masked reconstruction".into()));
    }
    if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "mask_ratio {} outside (0, 1)",
            cfg.mask_ratio
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidConfig("batch_size and epochs must be positive".into()));
    }
    let n = dims.tokens_per_frame();
    let plen = dims.patch_len();
    let masked = ((cfg.mask_ratio * n as f32).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut decoder = ParamGroup::new(
        "mae_decoder",
        vec![nn::init_matrix(dims.dim, plen, &mut rng), Tensor::zeros(&[plen])],
    );
    decoder.set_trainable(true);
    tower.set_trainable(true);

    let mut plan = Vec::new();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        plan.extend(order.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }
    let sched = Schedule::new(cfg.lr, plan.len(), cfg.warmup_ratio)?;
    let mut opt = AdamWState::new(
        AdamWConfig::default(),
        tower.tensors().iter().chain(decoder.tensors()),
    );
    let mut trace = Vec::with_capacity(plan.len());
    let lnf = 3 + dims.blocks * nn::BLOCK_TENSORS;
    for (step, idx) in plan.iter().enumerate() {
        let frames: Vec<&Frame> = idx.iter().map(|&i| images[i]).collect();
        let target = stack_patches(dims, &frames)?;
        let mut input = target.clone();
        let mut row_mask = vec![false; frames.len() * n];
        for f in 0..frames.len() {
            let mut slots: Vec<usize> = (0..n).collect();
            slots.shuffle(&mut rng);
            for &s in &slots[..masked] {
                let r = f * n + s;
                row_mask[r] = true;
                input[r * plen..(r + 1) * plen].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let pv = tower.bind(&mut g)?;
        let pd = decoder.bind(&mut g)?;
        let x = g.constant(vec![frames.len() * n, plen], input)?;
        let outs = visual_forward(&mut g, &pv, dims, x, dims.blocks - 1)?;
        let h = g.layer_norm(outs[dims.blocks - 1], pv[lnf], pv[lnf + 1])?;
        let pred = nn::linear(&mut g, h, pd[0], pd[1])?;
        let loss = g
            .masked_mse(pred, &target, &row_mask)
            .map_err(|e| diverged(step, e))?;
        let value = g.scalar_value(loss);
        let grads = g.backward(loss)?;
        tower.accumulate(&grads, &pv)?;
        decoder.accumulate(&grads, &pd)?;
        nn::step_groups(&mut [tower, &mut decoder], &mut opt, sched.lr(step)?)?;
        debug!("mae step {step} loss {value:.5}");
        trace.push(value);
    }
    tower.set_trainable(false);
    Ok(trace)
}
