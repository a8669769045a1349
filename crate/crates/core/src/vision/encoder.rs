//! Patch-transformer image/video towers and the small caption tower.
//!
//! Visual tower layout: `[patch_w, patch_b, pos, block₀ … block_{n-1}, lnf_g, lnf_b]`.
//! Text tower layout: `[tok_emb, pos, block₀ … block_{n-1}, lnf_g, lnf_b]`.
//! The image and video towers share this layout, so per-frame encoding is
//! interchangeable between them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BlockDims, ParamGroup, BLOCK_TENSORS};
use crate::tensor::Tensor;
use crate::vision::input::{sample_frames, Frame, Modality, VisualInput};

/// Desk-scale tower geometry. The original setting uses 224×224 inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionDims {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
}

impl Default for VisionDims {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 8,
            dim: 32,
            blocks: 2,
            heads: 4,
            ff: 128,
        }
    }
}

impl VisionDims {
    pub fn tokens_per_frame(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    fn block(&self) -> BlockDims {
        BlockDims {
            dim: self.dim,
            heads: self.heads,
            ff: self.ff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextDims {
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
}

impl Default for TextDims {
    fn default() -> Self {
        Self {
            blocks: 1,
            heads: 4,
            ff: 128,
            max_len: 24,
        }
    }
}

/// How video frames become visual tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// Per-patch-position mean over the sampled frames.
    #[default]
    Pooled,
    /// Every sampled frame's tokens, in time order.
    PerFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    /// `n_tokens × d_v`.
    pub tokens: Tensor,
    pub modality: Modality,
    /// 1-based index of the block the tokens were read from.
    pub block: usize,
}

pub fn init_visual_tower<R: Rng + ?Sized>(dims: &VisionDims, rng: &mut R) -> Vec<Tensor> {
    let mut t = vec![
        nn::init_matrix(dims.patch_len(), dims.dim, rng),
        Tensor::zeros(&[dims.dim]),
        nn::init_matrix(dims.tokens_per_frame(), dims.dim, rng),
    ];
    for _ in 0..dims.blocks {
        t.extend(nn::init_block(dims.block(), rng));
    }
    t.push(Tensor::ones(&[dims.dim]));
    t.push(Tensor::zeros(&[dims.dim]));
    t
}

pub fn init_text_tower<R: Rng + ?Sized>(
    text: &TextDims,
    dim: usize,
    vocab: usize,
    rng: &mut R,
) -> Vec<Tensor> {
    let mut t = vec![
        nn::init_matrix(vocab, dim, rng),
        nn::init_matrix(text.max_len, dim, rng),
    ];
    let bd = BlockDims {
        dim,
        heads: text.heads,
        ff: text.ff,
    };
    for _ in 0..text.blocks {
        t.extend(nn::init_block(bd, rng));
    }
    t.push(Tensor::ones(&[dim]));
    t.push(Tensor::zeros(&[dim]));
    t
}

/// Maps `select_layer` (negative counts from the end, `-1` = last block;
/// non-negative is a 0-based block index) to a 0-based block index.
pub fn resolve_select_layer(select_layer: i32, blocks: usize) -> Result<usize> {
    let idx = if select_layer < 0 {
        blocks as i64 + select_layer as i64
    } else {
        select_layer as i64
    };
    if idx < 0 || idx >= blocks as i64 {
        return Err(Error::SelectLayer {
            layer: select_layer,
            blocks,
        });
    }
    Ok(idx as usize)
}

/// Stacks the patch matrices of `frames` into `(F·n) × patch_len`.
pub fn stack_patches(dims: &VisionDims, frames: &[&Frame]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(frames.len() * dims.tokens_per_frame() * dims.patch_len());
    for f in frames {
        if (f.height, f.width, f.channels) != (dims.image_size, dims.image_size, dims.channels) {
            return Err(Error::InvalidVisual(format!(
                "expected {0}x{0}x{1} frames, got {2}x{3}x{4}",
                dims.image_size, dims.channels, f.height, f.width, f.channels
            )));
        }
        out.extend(f.patches(dims.patch)?);
    }
    Ok(out)
}

/// Runs the tower over packed frames (`patches` is `(F·n) × patch_len`) and
/// returns the residual stream after each of the first `upto + 1` blocks.
pub fn visual_forward(
    g: &mut Graph,
    p: &[Var],
    dims: &VisionDims,
    patches: Var,
    upto: usize,
) -> Result<Vec<Var>> {
    let n = dims.tokens_per_frame();
    let rows = g.shape(patches)[0];
    if !rows.is_multiple_of(n) {
        return Err(Error::shape("visual_forward", format!("{rows} rows for {n}-token frames")));
    }
    let frames = rows / n;
    let x = nn::linear(g, patches, p[0], p[1])?;
    let pos_ids: Vec<usize> = (0..frames).flat_map(|_| 0..n).collect();
    let pos = g.gather(p[2], &pos_ids)?;
    let mut x = g.add(x, pos)?;
    let segments = vec![n; frames];
    let mut outs = Vec::with_capacity(upto + 1);
    for b in 0..=upto.min(dims.blocks - 1) {
        let bp = &p[3 + b * BLOCK_TENSORS..3 + (b + 1) * BLOCK_TENSORS];
        x = nn::block_forward(g, bp, x, dims.heads, &segments, false)?;
        outs.push(x);
    }
    Ok(outs)
}

/// Final layer norm of the last block's output, mean-pooled per item.
/// `segments` gives the number of token rows belonging to each item.
pub fn visual_pool(
    g: &mut Graph,
    p: &[Var],
    dims: &VisionDims,
    last: Var,
    segments: &[usize],
) -> Result<Var> {
    let base = 3 + dims.blocks * BLOCK_TENSORS;
    let x = g.layer_norm(last, p[base], p[base + 1])?;
    g.segment_mean(x, segments)
}

/// Encodes packed caption token ids into one pooled embedding per caption.
pub fn text_forward(
    g: &mut Graph,
    p: &[Var],
    text: &TextDims,
    captions: &[Vec<usize>],
) -> Result<Var> {
    let mut ids = Vec::new();
    let mut pos_ids = Vec::new();
    let mut segments = Vec::with_capacity(captions.len());
    for c in captions {
        if c.is_empty() || c.len() > text.max_len {
            return Err(Error::ContextOverflow {
                len: c.len(),
                window: text.max_len,
            });
        }
        ids.extend_from_slice(c);
        pos_ids.extend(0..c.len());
        segments.push(c.len());
    }
    let tok = g.gather(p[0], &ids)?;
    let pos = g.gather(p[1], &pos_ids)?;
    let mut x = g.add(tok, pos)?;
    for b in 0..text.blocks {
        let bp = &p[2 + b * BLOCK_TENSORS..2 + (b + 1) * BLOCK_TENSORS];
        x = nn::block_forward(g, bp, x, text.heads, &segments, false)?;
    }
    let base = 2 + text.blocks * BLOCK_TENSORS;
    let x = g.layer_norm(x, p[base], p[base + 1])?;
    g.segment_mean(x, &segments)
}

/// Maximum number of frames pushed through a tower in one graph.
const FRAME_CHUNK: usize = 256;

/// Selected-block token matrices (`n × d_v`, flattened) for each frame.
pub fn encode_frames(
    tower: &ParamGroup,
    dims: &VisionDims,
    frames: &[&Frame],
    select_layer: i32,
) -> Result<Vec<Vec<f32>>> {
    let layer = resolve_select_layer(select_layer, dims.blocks)?;
    let per = dims.tokens_per_frame() * dims.dim;
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(FRAME_CHUNK) {
        let mut g = Graph::new();
        let p = tower.bind_frozen(&mut g)?;
        let patches = stack_patches(dims, chunk)?;
        let x = g.constant(
            vec![chunk.len() * dims.tokens_per_frame(), dims.patch_len()],
            patches,
        )?;
        let outs = visual_forward(&mut g, &p, dims, x, layer)?;
        let feats = g.value(outs[layer]);
        out.extend(feats.chunks_exact(per).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Pooled final-layer embedding per item; an item is one image or all
/// sampled frames of one video.
pub fn embed_items(
    tower: &ParamGroup,
    dims: &VisionDims,
    items: &[Vec<&Frame>],
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(items.len());
    let n = dims.tokens_per_frame();
    let mut start = 0;
    while start < items.len() {
        let mut end = start;
        let mut frames = 0;
        while end < items.len() && (frames == 0 || frames + items[end].len() <= FRAME_CHUNK) {
            frames += items[end].len();
            end += 1;
        }
        let batch = &items[start..end];
        let flat: Vec<&Frame> = batch.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let p = tower.bind_frozen(&mut g)?;
        let x = g.constant(vec![flat.len() * n, dims.patch_len()], stack_patches(dims, &flat)?)?;
        let outs = visual_forward(&mut g, &p, dims, x, dims.blocks - 1)?;
        let segments: Vec<usize> = batch.iter().map(|fs| fs.len() * n).collect();
        let pooled = visual_pool(&mut g, &p, dims, *outs.last().expect("blocks > 0"), &segments)?;
        out.extend(g.value(pooled).chunks_exact(dims.dim).map(<[f32]>::to_vec));
        start = end;
    }
    Ok(out)
}

pub fn encode_image(
    img: &VisualInput,
    tower: &ParamGroup,
    dims: &VisionDims,
    select_layer: i32,
) -> Result<VisualFeatures> {
    let VisualInput::Image(frame) = img else {
        return Err(Error::WrongVariant {
            expected: "image",
            got: "video",
        });
    };
    let block = resolve_select_layer(select_layer, dims.blocks)? + 1;
    let tokens = encode_frames(tower, dims, &[frame], select_layer)?.remove(0);
    Ok(VisualFeatures {
        tokens: Tensor::new(vec![dims.tokens_per_frame(), dims.dim], tokens)?,
        modality: Modality::Image,
        block,
    })
}

pub fn encode_video(
    video: &VisualInput,
    tower: &ParamGroup,
    dims: &VisionDims,
    k: usize,
    select_layer: i32,
    mode: TokenMode,
) -> Result<VisualFeatures> {
    let frames = sample_frames(video, k)?;
    let block = resolve_select_layer(select_layer, dims.blocks)? + 1;
    let per_frame = encode_frames(tower, dims, &frames, select_layer)?;
    Ok(VisualFeatures {
        tokens: temporal_aggregate(per_frame, dims, mode)?,
        modality: Modality::Video,
        block,
    })
}

/// Combines per-frame token matrices according to `mode`.
pub fn temporal_aggregate(
    per_frame: Vec<Vec<f32>>,
    dims: &VisionDims,
    mode: TokenMode,
) -> Result<Tensor> {
    let n = dims.tokens_per_frame();
    let k = per_frame.len();
    match mode {
        TokenMode::Pooled => {
            // f64 accumulation keeps the mean of identical frames exact
            let mut sum = vec![0.0f64; n * dims.dim];
            for f in &per_frame {
                sum.iter_mut().zip(f).for_each(|(m, &x)| *m += x as f64);
            }
            let mean = sum.into_iter().map(|m| (m / k as f64) as f32).collect();
            Tensor::new(vec![n, dims.dim], mean)
        }
        TokenMode::PerFrame => {
            Tensor::new(vec![k * n, dims.dim], per_frame.into_iter().flatten().collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tower(seed: u64) -> (ParamGroup, VisionDims) {
        let dims = VisionDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (ParamGroup::new("image_tower", init_visual_tower(&dims, &mut rng)), dims)
    }

    fn frame(seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Frame::new(32, 32, 3, data).unwrap()
    }

    #[test]
    fn image_features_have_one_row_per_patch() {
        let (t, dims) = tower(0);
        let img = VisualInput::image(frame(1)).unwrap();
        let f = encode_image(&img, &t, &dims, -2).unwrap();
        assert_eq!(f.tokens.shape(), &[16, 32]);
        assert_eq!(f.block, 1);
        assert_eq!(encode_image(&img, &t, &dims, -1).unwrap().block, 2);
        let again = encode_image(&img.clone(), &t, &dims, -2).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn select_layer_bounds() {
        assert_eq!(resolve_select_layer(-2, 2).unwrap(), 0);
        assert_eq!(resolve_select_layer(-1, 2).unwrap(), 1);
        assert!(resolve_select_layer(-3, 2).is_err());
        assert!(resolve_select_layer(2, 2).is_err());
        let (t, dims) = tower(0);
        let img = VisualInput::image(frame(1)).unwrap();
        assert!(matches!(
            encode_image(&img, &t, &dims, -3),
            Err(Error::SelectLayer { .. })
        ));
    }

    #[test]
    fn encoding_does_not_touch_parameters() {
        let (t, dims) = tower(3);
        let before = t.digest();
        let video = VisualInput::video((0..5).map(frame).collect()).unwrap();
        encode_video(&video, &t, &dims, 8, -2, TokenMode::Pooled).unwrap();
        assert_eq!(before, t.digest());
    }

    #[test]
    fn pooled_video_of_a_still_frame_matches_the_image() {
        let (t, dims) = tower(2);
        let f = frame(9);
        let video = VisualInput::video(vec![f.clone(); 8]).unwrap();
        let img = VisualInput::image(f).unwrap();
        let v = encode_video(&video, &t, &dims, 8, -2, TokenMode::Pooled).unwrap();
        let i = encode_image(&img, &t, &dims, -2).unwrap();
        assert_eq!(v.tokens, i.tokens);
        assert_eq!(v.modality, Modality::Video);
    }

    #[test]
    fn per_frame_mode_concatenates_in_time_order() {
        let (t, dims) = tower(2);
        let frames: Vec<Frame> = (0..8).map(frame).collect();
        let video = VisualInput::video(frames.clone()).unwrap();
        let v = encode_video(&video, &t, &dims, 8, -2, TokenMode::PerFrame).unwrap();
        assert_eq!(v.tokens.shape(), &[128, 32]);

        let mut reversed = frames.clone();
        reversed.reverse();
        let r = VisualInput::video(reversed).unwrap();
        let pooled_a = encode_video(&video, &t, &dims, 8, -2, TokenMode::Pooled).unwrap();
        let pooled_b = encode_video(&r, &t, &dims, 8, -2, TokenMode::Pooled).unwrap();
        let close = pooled_a
            .tokens
            .data()
            .iter()
            .zip(pooled_b.tokens.data())
            .all(|(a, b)| (a - b).abs() < 1e-6);
        assert!(close, "pooled mode must not depend on frame order");
        let per_b = encode_video(&r, &t, &dims, 8, -2, TokenMode::PerFrame).unwrap();
        assert_ne!(v.tokens, per_b.tokens);
    }

    #[test]
    fn text_tower_pools_each_caption() {
        let text = TextDims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let group = ParamGroup::new("text_tower", init_text_tower(&text, 32, 20, &mut rng));
        let mut g = Graph::new();
        let p = group.bind(&mut g).unwrap();
        let out = text_forward(&mut g, &p, &text, &[vec![1, 2, 3], vec![4]]).unwrap();
        assert_eq!(g.shape(out), &[2, 32]);
        assert!(text_forward(&mut g, &p, &text, &[vec![]]).is_err());
    }
}
