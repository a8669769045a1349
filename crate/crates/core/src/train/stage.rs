//! Feature caching and the two instruction-following training stages.

use std::collections::HashMap;
use std::path::PathBuf;

use log::{debug, error, info};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{build_training_example, mixed_batches, Corpus, Split, TrainingExample};
use crate::error::{Error, Result};
use crate::lm::{assemble, forward_lm, lm_loss, SequenceInput, Vocabulary};
use crate::nn;
use crate::optim::{AdamWConfig, AdamWState, Schedule};
use crate::tensor::Tensor;
use crate::train::checkpoint::save_checkpoint;
use crate::train::state::{ModelState, Phase, IMAGE_TOWER, LM, PROJECTION, VIDEO_TOWER};
use crate::vision::{encode_frames, sample_frames, temporal_aggregate, Modality, TokenMode, VisualInput};

/// How visual inputs become features for the language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    /// Frames sampled per video.
    pub frames: usize,
    pub select_layer: i32,
    pub token_mode: TokenMode,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            select_layer: -2,
            token_mode: TokenMode::Pooled,
        }
    }
}

impl EncodeConfig {
    pub fn tokens(&self, per_frame: usize, modality: Modality) -> usize {
        match (modality, self.token_mode) {
            (Modality::Video, TokenMode::PerFrame) => per_frame * self.frames,
            _ => per_frame,
        }
    }
}

/// Which modalities a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMix {
    #[default]
    Joint,
    ImageOnly,
    VideoOnly,
}

impl DataMix {
    pub fn admits(self, m: Modality) -> bool {
        match self {
            DataMix::Joint => true,
            DataMix::ImageOnly => m == Modality::Image,
            DataMix::VideoOnly => m == Modality::Video,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Where to dump state when a step produces a non-finite value.
    pub dump_dir: Option<PathBuf>,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 1,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            seed: 0,
            dump_dir: None,
        }
    }

    pub fn stage2() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 64,
            epochs: 8,
            ..Self::stage1()
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

/// Visual features per corpus record, computed once with frozen towers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCache {
    feats: HashMap<usize, Tensor>,
}

impl FeatureCache {
    pub fn get(&self, record: usize) -> Result<&Tensor> {
        self.feats
            .get(&record)
            .ok_or_else(|| Error::MissingPrerequisite(format!("features for record {record}")))
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}

/// Encodes the visual input of each listed record: images through the
/// image tower, videos through the video tower.
pub fn encode_records(
    state: &ModelState,
    corpus: &Corpus,
    records: &[usize],
    enc: &EncodeConfig,
) -> Result<FeatureCache> {
    let dims = &state.dims.vision;
    let mut cache = FeatureCache::default();
    let (images, videos): (Vec<usize>, Vec<usize>) = records
        .iter()
        .partition(|&&i| corpus.visuals[i].modality() == Modality::Image);
    let per = dims.tokens_per_frame();
    let frames: Vec<_> = images.iter().map(|&i| &corpus.visuals[i].frames()[0]).collect();
    let encoded = encode_frames(state.group(IMAGE_TOWER)?, dims, &frames, enc.select_layer)?;
    for (&i, f) in images.iter().zip(encoded) {
        cache.feats.insert(i, Tensor::new(vec![per, dims.dim], f)?);
    }
    let mut sampled = Vec::new();
    for &i in &videos {
        sampled.extend(sample_frames(&corpus.visuals[i], enc.frames)?);
    }
    let encoded = encode_frames(state.group(VIDEO_TOWER)?, dims, &sampled, enc.select_layer)?;
    let mut it = encoded.into_iter();
    for &i in &videos {
        let per_frame: Vec<Vec<f32>> = it.by_ref().take(enc.frames).collect();
        cache.feats.insert(i, temporal_aggregate(per_frame, dims, enc.token_mode)?);
    }
    Ok(cache)
}

/// Encodes a single input outside any corpus.
pub fn encode_visual(state: &ModelState, input: &VisualInput, enc: &EncodeConfig) -> Result<Tensor> {
    let dims = &state.dims.vision;
    match input {
        VisualInput::Image(f) => {
            let out = encode_frames(state.group(IMAGE_TOWER)?, dims, &[f], enc.select_layer)?;
            Tensor::new(vec![dims.tokens_per_frame(), dims.dim], out.concat())
        }
        VisualInput::Video(_) => {
            let frames = sample_frames(input, enc.frames)?;
            let out = encode_frames(state.group(VIDEO_TOWER)?, dims, &frames, enc.select_layer)?;
            temporal_aggregate(out, dims, enc.token_mode)
        }
    }
}

/// Templated examples for every listed record.
pub fn build_examples(
    corpus: &Corpus,
    records: &[usize],
    vocab: &Vocabulary,
    state: &ModelState,
    enc: &EncodeConfig,
) -> Result<HashMap<usize, TrainingExample>> {
    let per = state.dims.vision.tokens_per_frame();
    records
        .iter()
        .map(|&i| {
            let r = &corpus.records[i];
            let visual = Some((r.modality, enc.tokens(per, r.modality)));
            let ex = build_training_example(&r.conversation(), visual, vocab, state.dims.lm.context)?;
            Ok((i, ex))
        })
        .collect()
}

/// Prepared inputs for one stage: the records, their examples and features.
#[derive(Debug, Clone)]
pub struct StageData {
    pub images: Vec<usize>,
    pub videos: Vec<usize>,
    pub examples: HashMap<usize, TrainingExample>,
    pub features: FeatureCache,
}

impl StageData {
    pub fn prepare(
        state: &ModelState,
        corpus: &Corpus,
        stage: u8,
        split: Split,
        mix: DataMix,
        enc: &EncodeConfig,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let records: Vec<usize> = corpus
            .select(stage, split)
            .into_iter()
            .filter(|&i| mix.admits(corpus.records[i].modality))
            .collect();
        if records.is_empty() {
            return Err(Error::EmptySplit(format!("stage {stage} {}", split.as_str())));
        }
        let (images, videos) = records
            .iter()
            .partition(|&&i| corpus.records[i].modality == Modality::Image);
        Ok(Self {
            images,
            videos,
            examples: build_examples(corpus, &records, vocab, state, enc)?,
            features: encode_records(state, corpus, &records, enc)?,
        })
    }

    /// Every batch of every epoch, as record indices.
    pub fn plan(&self, cfg: &StageConfig) -> Result<Vec<Vec<usize>>> {
        let mut plan = Vec::new();
        for epoch in 0..cfg.epochs {
            for batch in mixed_batches(
                self.images.len(),
                self.videos.len(),
                cfg.batch_size,
                cfg.seed,
                epoch as u64,
            )? {
                plan.push(
                    batch
                        .iter()
                        .map(|item| match item.modality {
                            Modality::Image => self.images[item.index],
                            Modality::Video => self.videos[item.index],
                        })
                        .collect(),
                );
            }
        }
        Ok(plan)
    }

    fn inputs<'a>(&'a self, batch: &[usize]) -> Result<Vec<SequenceInput<'a>>> {
        batch
            .iter()
            .map(|i| {
                let ex = &self.examples[i];
                Ok(SequenceInput {
                    ids: &ex.ids,
                    mask: Some(&ex.mask),
                    visual: Some(self.features.get(*i)?),
                })
            })
            .collect()
    }

    pub fn records(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.images.iter().chain(&self.videos).copied().collect();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn phase(self) -> Phase {
        match self {
            Stage::One => Phase::Stage1,
            Stage::Two => Phase::Stage2,
        }
    }

    fn prerequisite(self) -> Phase {
        match self {
            Stage::One => Phase::Aligned,
            Stage::Two => Phase::Stage1,
        }
    }

    pub fn trainable(self) -> &'static [&'static str] {
        match self {
            Stage::One => &[PROJECTION],
            Stage::Two => &[PROJECTION, LM],
        }
    }
}

/// Mean masked NLL per supervised token of one batch, without gradients.
pub fn batch_nll(state: &ModelState, data: &StageData, batch: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let pp = state.group(PROJECTION)?.bind_frozen(&mut g)?;
    let pl = state.group(LM)?.bind_frozen(&mut g)?;
    let inputs = data.inputs(batch)?;
    let assembled = assemble(&mut g, &pp, &pl, &state.dims.lm, &inputs)?;
    let logits = forward_lm(&mut g, &pl, &state.dims.lm, &assembled)?;
    let loss = lm_loss(&mut g, logits, &assembled)?;
    Ok(g.scalar_value(loss) as f64)
}

/// Mean masked NLL per supervised token over every record.
pub fn masked_nll(state: &ModelState, data: &StageData, batch_size: usize) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in data.records().chunks(batch_size.max(1)) {
        let n: usize = chunk.iter().map(|i| data.examples[i].supervised()).sum();
        total += batch_nll(state, data, chunk)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Puts `state` into `stage`: a state from the preceding phase starts the
/// stage at step 0 with a fresh optimizer; a state already in the stage
/// resumes where it stopped.
pub fn enter_stage(state: &mut ModelState, stage: Stage, cfg: &StageConfig) -> Result<()> {
    if state.phase == stage.phase() {
        if state.optimizer.is_none() {
            return Err(Error::MissingPrerequisite(format!(
                "stage {} checkpoint without optimizer state",
                stage.number()
            )));
        }
    } else if state.phase == stage.prerequisite() {
        state.phase = stage.phase();
        state.step = 0;
        let adam = AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        };
        let params = state.group(PROJECTION)?.tensors().iter().chain(state.group(LM)?.tensors());
        state.optimizer = Some(AdamWState::new(adam, params));
    } else {
        let need = match stage {
            Stage::One => "an aligned-encoder checkpoint",
            Stage::Two => "a stage-1 checkpoint",
        };
        return Err(Error::MissingPrerequisite(format!(
            "stage {} needs {need}, got a {:?} state",
            stage.number(),
            state.phase
        )));
    }
    state.set_trainable(stage.trainable())
}

/// Trains `stage` from `state.step` up to `until` (or the end of the
/// plan) and returns the per-step losses.
pub fn train_stage(
    state: &mut ModelState,
    stage: Stage,
    data: &StageData,
    cfg: &StageConfig,
    until: Option<u64>,
) -> Result<Vec<(u64, f32)>> {
    enter_stage(state, stage, cfg)?;
    let plan = data.plan(cfg)?;
    let total = plan.len();
    let sched = Schedule::new(cfg.lr, total, cfg.warmup_ratio)?;
    let end = until.map_or(total, |u| (u as usize).min(total));
    let mut trace = Vec::with_capacity(end.saturating_sub(state.step as usize));
    while (state.step as usize) < end {
        let step = state.step as usize;
        let batch = &plan[step];
        match train_step(state, data, batch, sched.lr(step)?) {
            Ok(loss) => {
                debug!("stage {} step {step} loss {loss:.4}", stage.number());
                trace.push((state.step, loss));
                state.step += 1;
            }
            Err(e @ Error::NumericFault { .. }) => {
                error!("stage {} diverged at step {step}", stage.number());
                dump(state, stage, step, batch, cfg)?;
                return Err(Error::Diverged {
                    step,
                    batch: step,
                    source: Box::new(e),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if let Some((_, last)) = trace.last() {
        info!(
            "stage {} finished {} steps, last loss {last:.4}",
            stage.number(),
            state.step
        );
    }
    Ok(trace)
}

fn train_step(state: &mut ModelState, data: &StageData, batch: &[usize], lr: f32) -> Result<f32> {
    let mut g = Graph::new();
    let pp = state.group(PROJECTION)?.bind(&mut g)?;
    let pl = state.group(LM)?.bind(&mut g)?;
    let inputs = data.inputs(batch)?;
    let assembled = assemble(&mut g, &pp, &pl, &state.dims.lm, &inputs)?;
    let logits = forward_lm(&mut g, &pl, &state.dims.lm, &assembled)?;
    let loss = lm_loss(&mut g, logits, &assembled)?;
    let value = g.scalar_value(loss);
    let grads = g.backward(loss)?;
    state.group_mut(PROJECTION)?.accumulate(&grads, &pp)?;
    state.group_mut(LM)?.accumulate(&grads, &pl)?;
    let mut opt = state.optimizer.take().expect("entered stage has an optimizer");
    let res = {
        let (head, tail) = state.groups.split_at_mut(4);
        nn::step_groups(&mut [&mut head[3], &mut tail[0]], &mut opt, lr)
    };
    state.optimizer = Some(opt);
    res?;
    if state
        .groups
        .iter()
        .filter(|g| g.trainable())
        .any(|g| g.tensors().iter().any(|t| !t.is_finite()))
    {
        return Err(Error::NumericFault { op: "adamw_step" });
    }
    Ok(value)
}

fn dump(state: &ModelState, stage: Stage, step: usize, batch: &[usize], cfg: &StageConfig) -> Result<()> {
    let Some(dir) = &cfg.dump_dir else {
        return Ok(());
    };
    let base = dir.join(format!("diverged-stage{}-step{step}", stage.number()));
    save_checkpoint(state, &base.with_extension("uvck"))?;
    let meta = serde_json::json!({ "stage": stage.number(), "step": step, "batch_records": batch });
    let path = base.with_extension("json");
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    error!("dumped diverged state to {}", base.display());
    Ok(())
}
