//! Deterministic evaluation suites and the ablation runner.

mod ablation;
mod pope;
mod qa;
mod report;

pub use ablation::*;
pub use pope::*;
pub use qa::*;
pub use report::*;

use crate::data::{Corpus, Split};
use crate::error::Result;
use crate::train::{EncodeConfig, ModelState, IMAGE_TOWER, VIDEO_TOWER};
use crate::vision::{alignment_gap, embed_items, sample_frames, Modality};

/// Gap between the image tower's view of each video's middle frame and
/// the video tower's view of its sampled frames, over the videos of a
/// stage-2 split.
pub fn eval_gap(state: &ModelState, corpus: &Corpus, split: Split, enc: &EncodeConfig) -> Result<f64> {
    let videos: Vec<usize> = corpus
        .select(2, split)
        .into_iter()
        .filter(|&i| corpus.records[i].modality == Modality::Video)
        .collect();
    let dims = &state.dims.vision;
    let mut stills = Vec::with_capacity(videos.len());
    let mut clips = Vec::with_capacity(videos.len());
    for &i in &videos {
        let frames = corpus.visuals[i].frames();
        stills.push(vec![&frames[frames.len() / 2]]);
        clips.push(sample_frames(&corpus.visuals[i], enc.frames)?);
    }
    let a = embed_items(state.group(IMAGE_TOWER)?, dims, &stills)?;
    let b = embed_items(state.group(VIDEO_TOWER)?, dims, &clips)?;
    alignment_gap(&a, &b)
}
