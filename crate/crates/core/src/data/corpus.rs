//! Synthetic corpus generation and the JSON-lines manifest.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::conversation::{Conversation, Round};
use crate::data::glyph::{self, Scene, VIDEO_FRAMES};
use crate::data::payload::{read_payload, write_payload};
use crate::error::{Error, Result};
use crate::lm::{COLORS, SHAPES};
use crate::vision::{Modality, VisualInput};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PAYLOAD_DIR: &str = "payloads";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub modality: Modality,
    /// Payload path relative to the manifest directory.
    pub payload: String,
    /// 1 for caption records, 2 for instruction records.
    pub stage: u8,
    pub split: Split,
    pub rounds: Vec<Round>,
    /// Every glyph present, as "color shape".
    pub objects: Vec<String>,
    /// Motion direction for videos.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<String>,
}

impl Record {
    pub fn conversation(&self) -> Conversation {
        Conversation {
            rounds: self.rounds.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityCounts {
    pub images: usize,
    pub videos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub frames: usize,
    /// Caption records (all in the train split).
    pub stage1: ModalityCounts,
    pub stage2_train: ModalityCounts,
    pub stage2_val: ModalityCounts,
    pub stage2_test: ModalityCounts,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: VIDEO_FRAMES,
            stage1: ModalityCounts { images: 500, videos: 500 },
            stage2_train: ModalityCounts { images: 14000, videos: 6000 },
            stage2_val: ModalityCounts { images: 50, videos: 50 },
            stage2_test: ModalityCounts { images: 100, videos: 100 },
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidConfig("videos need at least one frame".into()));
        }
        let s1 = self.stage1.images + self.stage1.videos;
        let s2 = self.stage2_train.images + self.stage2_train.videos;
        if s1 == 0 || s2 == 0 {
            return Err(Error::InvalidConfig(
                "stage 1 and stage 2 training splits must be non-empty".into(),
            ));
        }
        Ok(())
    }

    fn plan(&self) -> Vec<(u8, Split, Modality)> {
        let mut out = Vec::new();
        let mut add = |stage, split, c: &ModalityCounts| {
            out.extend(std::iter::repeat_n((stage, split, Modality::Image), c.images));
            out.extend(std::iter::repeat_n((stage, split, Modality::Video), c.videos));
        };
        add(1, Split::Train, &self.stage1);
        add(2, Split::Train, &self.stage2_train);
        add(2, Split::Val, &self.stage2_val);
        add(2, Split::Test, &self.stage2_test);
        out
    }
}

/// A generated corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub visuals: Vec<VisualInput>,
}

impl Corpus {
    pub fn select(&self, stage: u8, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].stage == stage && self.records[i].split == split)
            .collect()
    }
}

pub fn caption(scene: &Scene) -> String {
    match scene {
        Scene::Still { glyphs } => glyphs
            .iter()
            .map(|g| format!("a {}", g.name()))
            .collect::<Vec<_>>()
            .join(" and "),
        Scene::Motion { glyph, direction, .. } => {
            format!("a {} moves {}", glyph.name(), direction.word())
        }
    }
}

/// "is there a {object} in the {image|video}?"
pub fn existence_question(object: &str, modality: Modality) -> String {
    format!("is there a {object} in the {modality}?")
}

fn absent_object<R: Rng + ?Sized>(present: &[String], rng: &mut R) -> String {
    let absent: Vec<String> = glyph::all_objects()
        .into_iter()
        .filter(|o| !present.contains(o))
        .collect();
    absent.choose(rng).expect("at most 3 of 18 objects present").clone()
}

fn existence_round<R: Rng + ?Sized>(scene: &Scene, modality: Modality, rng: &mut R) -> Round {
    let present = scene.objects();
    if rng.gen_bool(0.5) {
        let obj = present.choose(rng).expect("scenes are non-empty").clone();
        Round {
            question: existence_question(&obj, modality),
            answer: "yes".into(),
        }
    } else {
        Round {
            question: existence_question(&absent_object(&present, rng), modality),
            answer: "no".into(),
        }
    }
}

/// 1–3 rounds of distinct question kinds about `scene`.
pub fn qa_rounds<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Vec<Round> {
    let n = rng.gen_range(1..=3);
    let mut kinds: Vec<usize> = (0..4).collect();
    kinds.shuffle(rng);
    let mut rounds = Vec::with_capacity(n);
    for &kind in &kinds[..n] {
        let round = match scene {
            Scene::Still { glyphs } => {
                let g = glyphs.choose(rng).expect("non-empty");
                match kind {
                    0 => Round {
                        question: format!("what color is the {}?", SHAPES[g.shape]),
                        answer: COLORS[g.color].into(),
                    },
                    1 => Round {
                        question: format!("which shape is {}?", COLORS[g.color]),
                        answer: SHAPES[g.shape].into(),
                    },
                    _ => existence_round(scene, Modality::Image, rng),
                }
            }
            Scene::Motion { glyph, direction, .. } => match kind {
                0 => Round {
                    question: "which direction does it move?".into(),
                    answer: direction.word().into(),
                },
                1 => Round {
                    question: "what shape moves?".into(),
                    answer: SHAPES[glyph.shape].into(),
                },
                2 => Round {
                    question: "what color is it?".into(),
                    answer: COLORS[glyph.color].into(),
                },
                _ => existence_round(scene, Modality::Video, rng),
            },
        };
        rounds.push(round);
    }
    rounds
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates one record. Each record draws from its own RNG stream, so
/// the corpus does not depend on generation order.
pub fn gen_record(config: &CorpusConfig, index: usize) -> Result<(Record, VisualInput, Scene)> {
    let plan = config.plan();
    let &(stage, split, modality) = plan.get(index).ok_or(Error::InvalidConfig(format!(
        "record index {index} beyond corpus of {}",
        plan.len()
    )))?;
    let mut rng = record_rng(config.seed, index);
    let scene = match modality {
        Modality::Image => glyph::random_still(&mut rng),
        Modality::Video => glyph::random_motion(&mut rng, config.frames),
    };
    let rounds = if stage == 1 {
        vec![Round {
            question: format!("describe the {modality}."),
            answer: caption(&scene),
        }]
    } else {
        qa_rounds(&scene, &mut rng)
    };
    let kind = if modality == Modality::Image { "img" } else { "vid" };
    let id = match stage {
        1 => format!("s1-{kind}-{index:05}"),
        _ => format!("s2-{}-{kind}-{index:05}", split.as_str()),
    };
    let motion = match &scene {
        Scene::Motion { direction, .. } => Some(direction.word().to_string()),
        Scene::Still { .. } => None,
    };
    let record = Record {
        payload: format!("{PAYLOAD_DIR}/{id}.uvlm"),
        id,
        modality,
        stage,
        split,
        rounds,
        objects: scene.objects(),
        motion,
    };
    let visual = glyph::render(&scene);
    Ok((record, visual, scene))
}

pub fn gen_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let n = config.plan().len();
    let mut records = Vec::with_capacity(n);
    let mut visuals = Vec::with_capacity(n);
    for i in 0..n {
        let (r, v, _) = gen_record(config, i)?;
        records.push(r);
        visuals.push(v);
    }
    Ok(Corpus { records, visuals })
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    let payloads = dir.join(PAYLOAD_DIR);
    std::fs::create_dir_all(&payloads).map_err(|e| Error::io(&payloads, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let file = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(file);
    for (r, v) in corpus.records.iter().zip(&corpus.visuals) {
        write_payload(&dir.join(&r.payload), v)?;
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)?;
        if !ids.insert(r.id.clone()) {
            return Err(Error::InvalidConfig(format!("duplicate record id `{}`", r.id)));
        }
        records.push(r);
    }
    Ok(records)
}

/// Loads a corpus directory written by [`write_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let records = read_manifest(&dir.join(MANIFEST_FILE))?;
    if records.is_empty() {
        return Err(Error::EmptyCorpus(format!("{} has no records", dir.display())));
    }
    let visuals = records
        .iter()
        .map(|r| {
            let v = read_payload(&dir.join(&r.payload))?;
            if v.modality() != r.modality {
                return Err(Error::InvalidVisual(format!(
                    "record `{}` declares {} but its payload is {}",
                    r.id,
                    r.modality,
                    v.modality()
                )));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { records, visuals })
}

/// Frequency of each object across a set of records, most common first
/// (ties broken by name).
pub fn object_frequencies<'a>(records: impl IntoIterator<Item = &'a Record>) -> Vec<(String, usize)> {
    let mut counts: std::collections::BTreeMap<String, usize> = glyph::all_objects()
        .into_iter()
        .map(|o| (o, 0))
        .collect();
    for r in records {
        for o in &r.objects {
            *counts.entry(o.clone()).or_default() += 1;
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            seed: 4,
            frames: 16,
            stage1: ModalityCounts { images: 6, videos: 6 },
            stage2_train: ModalityCounts { images: 6, videos: 6 },
            stage2_val: ModalityCounts { images: 2, videos: 2 },
            stage2_test: ModalityCounts { images: 3, videos: 3 },
        }
    }

    #[test]
    fn generation_is_deterministic_and_order_free() {
        let a = gen_corpus(&small()).unwrap();
        let b = gen_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let (r, v, _) = gen_record(&small(), 17).unwrap();
        assert_eq!(r, a.records[17]);
        assert_eq!(v, a.visuals[17]);
    }

    #[test]
    fn ids_are_unique_and_splits_counted() {
        let c = gen_corpus(&small()).unwrap();
        let ids: HashSet<&str> = c.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), c.records.len());
        assert_eq!(c.select(1, Split::Train).len(), 12);
        assert_eq!(c.select(2, Split::Test).len(), 6);
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let c = gen_corpus(&small()).unwrap();
        write_corpus(&c, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), c);
    }

    #[test]
    fn invalid_counts_are_rejected() {
        let mut cfg = small();
        cfg.stage1 = ModalityCounts { images: 0, videos: 0 };
        assert!(gen_corpus(&cfg).is_err());
        let mut cfg = small();
        cfg.frames = 0;
        assert!(gen_corpus(&cfg).is_err());
    }

    #[test]
    fn captions_follow_the_grammar() {
        let scene = Scene::Motion {
            glyph: glyph::Glyph { color: 2, shape: 1, x: 12, y: 12 },
            direction: glyph::Direction::Left,
            frames: 16,
        };
        assert_eq!(caption(&scene), "a blue circle moves left");
    }
}
