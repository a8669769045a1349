//! End-to-end orchestration: alignment, the reconstruction baseline and
//! both instruction stages on a generated corpus.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, CorpusConfig, ModalityCounts, Split};
use crate::error::{Error, Result};
use crate::lm::Vocabulary;
use crate::nn::ParamGroup;
use crate::train::stage::{train_stage, DataMix, EncodeConfig, Stage, StageConfig, StageData};
use crate::train::state::{ModelDims, ModelState, Phase, IMAGE_TOWER, TEXT_TOWER, VIDEO_TOWER};
use crate::vision::{
    align_pretrain, init_visual_tower, mae_pretrain, sample_frames, AlignConfig, AlignPair,
    AlignTrace, MaeConfig, Modality,
};

/// Which image tower feeds the projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Both towers aligned through the shared caption space.
    #[default]
    United,
    /// The image tower comes from masked reconstruction instead.
    Separated,
}

/// Everything needed to reproduce a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub dims: ModelDims,
    pub encode: EncodeConfig,
    pub align: AlignConfig,
    pub mae: MaeConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub representation: Representation,
    pub mix: DataMix,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig::default(),
            dims: ModelDims::default(),
            encode: EncodeConfig::default(),
            align: AlignConfig::default(),
            mae: MaeConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            representation: Representation::United,
            mix: DataMix::Joint,
        }
    }
}

impl PipelineConfig {
    /// A smaller corpus and shorter stage 2 for multi-seed studies; about
    /// a minute per run.
    pub fn compact() -> Self {
        let mut c = Self::default();
        c.corpus.stage2_train = ModalityCounts { images: 1500, videos: 1500 };
        c.stage2.batch_size = 32;
        c.stage2.epochs = 6;
        c
    }

    /// Propagates the run seed into every sub-configuration that owns one
    /// (the corpus keeps its own seed so arms can share data).
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.align.seed = seed;
        self.mae.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self
    }

    /// Field-level diff against another config, as dotted JSON paths.
    pub fn differences(&self, other: &Self) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let mut out = Vec::new();
        diff_values("", &a, &b, &mut out);
        out
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(va), Some(vb)) => diff_values(&p, va, vb, out),
                    _ => out.push(p),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

/// Caption pairs from the stage-1 records, split by modality.
fn caption_pairs<'a>(
    corpus: &'a Corpus,
    vocab: &Vocabulary,
    enc: &EncodeConfig,
) -> Result<(Vec<AlignPair<'a>>, Vec<AlignPair<'a>>)> {
    let mut images = Vec::new();
    let mut videos = Vec::new();
    for i in corpus.select(1, Split::Train) {
        let r = &corpus.records[i];
        let caption = vocab.tokenize(&r.rounds[0].answer);
        match r.modality {
            Modality::Image => images.push(AlignPair {
                frames: vec![&corpus.visuals[i].frames()[0]],
                caption,
            }),
            Modality::Video => videos.push(AlignPair {
                frames: sample_frames(&corpus.visuals[i], enc.frames)?,
                caption,
            }),
        }
    }
    Ok((images, videos))
}

/// Aligns the image, video and caption towers of `state`.
pub fn run_align(
    state: &mut ModelState,
    corpus: &Corpus,
    enc: &EncodeConfig,
    cfg: &AlignConfig,
) -> Result<AlignTrace> {
    let vocab = Vocabulary::glyph_world();
    let (images, videos) = caption_pairs(corpus, &vocab, enc)?;
    let dims = state.dims;
    let mut image = state.group(IMAGE_TOWER)?.clone();
    let mut video = state.group(VIDEO_TOWER)?.clone();
    let mut text = state.group(TEXT_TOWER)?.clone();
    let trace = align_pretrain(
        &mut image,
        &mut video,
        &mut text,
        &images,
        &videos,
        &dims.vision,
        &dims.text,
        cfg,
    )?;
    *state.group_mut(IMAGE_TOWER)? = image;
    *state.group_mut(VIDEO_TOWER)? = video;
    *state.group_mut(TEXT_TOWER)? = text;
    state.phase = Phase::Aligned;
    state.step = 0;
    state.optimizer = None;
    state.set_trainable(&[])?;
    Ok(trace)
}

/// A freshly initialized image tower trained only by masked
/// reconstruction on the stage-1 images.
pub fn run_mae(
    dims: &ModelDims,
    corpus: &Corpus,
    cfg: &MaeConfig,
) -> Result<(ParamGroup, Vec<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x004D_4145);
    let mut tower = ParamGroup::new(IMAGE_TOWER, init_visual_tower(&dims.vision, &mut rng));
    let images: Vec<_> = corpus
        .select(1, Split::Train)
        .into_iter()
        .filter(|&i| corpus.records[i].modality == Modality::Image)
        .map(|i| &corpus.visuals[i].frames()[0])
        .collect();
    let trace = mae_pretrain(&mut tower, &images, &dims.vision, cfg)?;
    Ok((tower, trace))
}

/// Loss traces of a full run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineTrace {
    pub align: AlignTrace,
    pub mae: Vec<f32>,
    pub stage1: Vec<(u64, f32)>,
    pub stage2: Vec<(u64, f32)>,
}

/// Runs align (and MAE for the separated representation), then stages 1
/// and 2. `aligned` may supply an already aligned state to skip alignment.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    aligned: Option<ModelState>,
    mae_tower: Option<ParamGroup>,
) -> Result<(ModelState, PipelineTrace)> {
    let vocab = Vocabulary::glyph_world();
    if cfg.dims.vocab != vocab.len() {
        return Err(Error::InvalidConfig(format!(
            "dims.vocab {} does not match the vocabulary size {}",
            cfg.dims.vocab,
            vocab.len()
        )));
    }
    let mut trace = PipelineTrace::default();
    let mut state = match aligned {
        Some(s) if s.phase == Phase::Aligned => s,
        Some(s) => {
            return Err(Error::MissingPrerequisite(format!(
                "expected an aligned state, got {:?}",
                s.phase
            )))
        }
        None => {
            let mut s = ModelState::init(cfg.dims, cfg.seed);
            info!("aligning towers");
            trace.align = run_align(&mut s, corpus, &cfg.encode, &cfg.align)?;
            s
        }
    };
    if cfg.representation == Representation::Separated {
        let tower = match mae_tower {
            Some(t) => t,
            None => {
                info!("training the reconstruction image tower");
                let (t, losses) = run_mae(&cfg.dims, corpus, &cfg.mae)?;
                trace.mae = losses;
                t
            }
        };
        *state.group_mut(IMAGE_TOWER)? = tower;
        state.set_trainable(&[])?;
    }
    let data = StageData::prepare(&state, corpus, 1, Split::Train, cfg.mix, &cfg.encode, &vocab)?;
    info!("stage 1: {} image / {} video records", data.images.len(), data.videos.len());
    trace.stage1 = train_stage(&mut state, Stage::One, &data, &cfg.stage1, None)?;
    let data = StageData::prepare(&state, corpus, 2, Split::Train, cfg.mix, &cfg.encode, &vocab)?;
    info!("stage 2: {} image / {} video records", data.images.len(), data.videos.len());
    trace.stage2 = train_stage(&mut state, Stage::Two, &data, &cfg.stage2, None)?;
    Ok((state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn differences_name_dotted_paths() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.mix = DataMix::VideoOnly;
        b.stage2.lr = 0.5;
        assert_eq!(a.differences(&b), vec!["mix".to_string(), "stage2.lr".to_string()]);
        assert!(a.differences(&a).is_empty());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn seeding_reaches_every_trainer() {
        let c = PipelineConfig::default().seeded(7);
        assert_eq!((c.align.seed, c.mae.seed, c.stage1.seed, c.stage2.seed), (7, 7, 7, 7));
        assert_eq!(c.corpus.seed, 0);
    }
}
