use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{init_lm, init_projection, LmDims};
use crate::nn::ParamGroup;
use crate::optim::AdamWState;
use crate::vision::{init_text_tower, init_visual_tower, TextDims, VisionDims};

pub const IMAGE_TOWER: &str = "image_tower";
pub const VIDEO_TOWER: &str = "video_tower";
pub const TEXT_TOWER: &str = "text_tower";
pub const PROJECTION: &str = "projection";
pub const LM: &str = "lm";

pub const GROUPS: [&str; 5] = [IMAGE_TOWER, VIDEO_TOWER, TEXT_TOWER, PROJECTION, LM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub vision: VisionDims,
    pub text: TextDims,
    pub lm: LmDims,
    pub vocab: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vision: VisionDims::default(),
            text: TextDims::default(),
            lm: LmDims::default(),
            vocab: crate::lm::Vocabulary::glyph_world().len(),
        }
    }
}

/// Which phase produced the current parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Aligned,
    Mae,
    Stage1,
    Stage2,
}

impl Phase {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        [Phase::Init, Phase::Aligned, Phase::Mae, Phase::Stage1, Phase::Stage2]
            .into_iter()
            .find(|p| p.tag() == tag)
    }
}

/// Serializable ChaCha8 position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Every parameter group of the model plus the bookkeeping needed to
/// resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub dims: ModelDims,
    pub groups: Vec<ParamGroup>,
    pub optimizer: Option<AdamWState>,
    pub phase: Phase,
    pub rng: RngState,
    /// Optimizer steps taken in the current phase.
    pub step: u64,
}

impl ModelState {
    /// Fresh weights; every group frozen.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = vec![
            ParamGroup::new(IMAGE_TOWER, init_visual_tower(&dims.vision, &mut rng)),
            ParamGroup::new(VIDEO_TOWER, init_visual_tower(&dims.vision, &mut rng)),
            ParamGroup::new(
                TEXT_TOWER,
                init_text_tower(&dims.text, dims.vision.dim, dims.vocab, &mut rng),
            ),
            ParamGroup::new(PROJECTION, init_projection(dims.vision.dim, dims.lm.dim, &mut rng)),
            ParamGroup::new(LM, init_lm(&dims.lm, dims.vocab, &mut rng)),
        ];
        Self {
            dims,
            groups,
            optimizer: None,
            phase: Phase::Init,
            rng: RngState::capture(&rng),
            step: 0,
        }
    }

    fn index(name: &str) -> Result<usize> {
        GROUPS
            .iter()
            .position(|g| *g == name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    pub fn group(&self, name: &str) -> Result<&ParamGroup> {
        Ok(&self.groups[Self::index(name)?])
    }

    pub fn group_mut(&mut self, name: &str) -> Result<&mut ParamGroup> {
        Ok(&mut self.groups[Self::index(name)?])
    }

    /// Sets every group's flag: groups named in `trainable` train, the
    /// rest are frozen.
    pub fn set_trainable(&mut self, trainable: &[&str]) -> Result<()> {
        for name in trainable {
            Self::index(name)?;
        }
        for g in &mut self.groups {
            let on = trainable.contains(&g.name());
            g.set_trainable(on);
        }
        Ok(())
    }

    pub fn trainable_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.trainable())
            .map(ParamGroup::name)
            .collect()
    }

    pub fn trainable_numel(&self) -> usize {
        self.groups.iter().filter(|g| g.trainable()).map(ParamGroup::numel).sum()
    }

    /// SHA-256 digest per group.
    pub fn digests(&self) -> Vec<(String, String)> {
        self.groups
            .iter()
            .map(|g| (g.name().to_string(), g.digest()))
            .collect()
    }
}
