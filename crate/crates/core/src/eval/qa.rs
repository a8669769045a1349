//! Exact-match question answering.

use serde::{Deserialize, Serialize};

use crate::data::{build_round_input, Corpus, Split};
use crate::error::{Error, Result};
use crate::lm::{generate, Decoding, Vocabulary, DEFAULT_MAX_NEW};
use crate::train::{encode_records, EncodeConfig, ModelState, LM, PROJECTION};
use crate::vision::Modality;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, drops punctuation and articles, and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One question of one record, with the history the model sees.
#[derive(Debug, Clone, PartialEq)]
pub struct QaItem {
    pub record: usize,
    /// 1-based.
    pub round: usize,
    pub modality: Modality,
    pub prompt: Vec<usize>,
    pub gold: String,
}

/// Every round of every stage-2 record in `split`, with gold history.
pub fn qa_items(corpus: &Corpus, split: Split, vocab: &Vocabulary) -> Result<Vec<QaItem>> {
    let mut items = Vec::new();
    for i in corpus.select(2, split) {
        let r = &corpus.records[i];
        let conv = r.conversation();
        for round in 1..=conv.len() {
            items.push(QaItem {
                record: i,
                round,
                modality: r.modality,
                prompt: build_round_input(&conv, round)?.prompt_ids(vocab, true),
                gold: conv.rounds[round - 1].answer.clone(),
            });
        }
    }
    if items.is_empty() {
        return Err(Error::EmptySplit(format!("no stage-2 questions in split `{}`", split.as_str())));
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPrediction {
    pub record: usize,
    pub round: usize,
    pub modality: Modality,
    pub gold: String,
    pub predicted: String,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    /// Percentage, or `None` for an empty tally.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaResult {
    pub overall: Tally,
    pub image: Tally,
    pub video: Tally,
    pub predictions: Vec<QaPrediction>,
}

impl QaResult {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy().unwrap_or(0.0)
    }
}

/// Scores the answers `predict` gives to each item.
pub fn score_qa<F>(items: &[QaItem], mut predict: F) -> Result<QaResult>
where
    F: FnMut(&QaItem) -> Result<String>,
{
    if items.is_empty() {
        return Err(Error::EmptySplit("no questions to score".into()));
    }
    let mut res = QaResult {
        overall: Tally::default(),
        image: Tally::default(),
        video: Tally::default(),
        predictions: Vec::with_capacity(items.len()),
    };
    for item in items {
        let predicted = predict(item)?;
        let correct = normalize_answer(&predicted) == normalize_answer(&item.gold);
        let per = match item.modality {
            Modality::Image => &mut res.image,
            Modality::Video => &mut res.video,
        };
        for t in [&mut res.overall, per] {
            t.total += 1;
            t.correct += usize::from(correct);
        }
        res.predictions.push(QaPrediction {
            record: item.record,
            round: item.round,
            modality: item.modality,
            gold: item.gold.clone(),
            predicted,
            correct,
        });
    }
    Ok(res)
}

/// Greedy answers from `state` to every question of `split`.
pub fn eval_qa(state: &ModelState, corpus: &Corpus, split: Split, enc: &EncodeConfig) -> Result<QaResult> {
    let vocab = Vocabulary::glyph_world();
    let items = qa_items(corpus, split, &vocab)?;
    let mut records: Vec<usize> = items.iter().map(|q| q.record).collect();
    records.dedup();
    let feats = encode_records(state, corpus, &records, enc)?;
    let projection = state.group(PROJECTION)?;
    let lm = state.group(LM)?;
    score_qa(&items, |item| {
        let out = generate(
            Some(feats.get(item.record)?),
            &item.prompt,
            projection,
            lm,
            &state.dims.lm,
            DEFAULT_MAX_NEW,
            Decoding::Greedy,
        )?;
        vocab.detokenize(&out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, CorpusConfig, ModalityCounts};

    fn tiny() -> Corpus {
        let one = ModalityCounts { images: 1, videos: 1 };
        gen_corpus(&CorpusConfig {
            stage1: one,
            stage2_train: one,
            stage2_val: ModalityCounts { images: 0, videos: 0 },
            stage2_test: ModalityCounts { images: 6, videos: 6 },
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  The Red, square. "), "red square");
        assert_eq!(normalize_answer("A yes!"), "yes");
        assert_eq!(normalize_answer("an"), "");
    }

    #[test]
    fn oracle_scores_full_marks() {
        let c = tiny();
        let items = qa_items(&c, Split::Test, &Vocabulary::glyph_world()).unwrap();
        let r = score_qa(&items, |q| Ok(format!("the {}.", q.gold))).unwrap();
        assert_eq!(r.accuracy(), 100.0);
        assert_eq!(r.image.total + r.video.total, items.len());
    }

    #[test]
    fn fixed_wrong_word_scores_zero() {
        let c = tiny();
        let items = qa_items(&c, Split::Test, &Vocabulary::glyph_world()).unwrap();
        let r = score_qa(&items, |_| Ok("describe".into())).unwrap();
        assert_eq!(r.accuracy(), 0.0);
    }

    #[test]
    fn empty_split_is_an_error() {
        let c = tiny();
        let vocab = Vocabulary::glyph_world();
        assert!(matches!(qa_items(&c, Split::Val, &vocab), Err(Error::EmptySplit(_))));
        assert!(matches!(score_qa(&[], |_| Ok(String::new())), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn prompts_end_at_the_assistant_marker() {
        let c = tiny();
        let vocab = Vocabulary::glyph_world();
        for q in qa_items(&c, Split::Test, &vocab).unwrap() {
            assert_eq!(*q.prompt.last().unwrap(), crate::lm::ASSISTANT);
            assert_eq!(q.prompt.iter().filter(|&&t| t == crate::lm::VIS).count(), 1);
        }
    }

    #[test]
    fn untrained_model_is_idempotent() {
        let c = tiny();
        let s = ModelState::init(crate::train::ModelDims::default(), 0);
        let enc = EncodeConfig::default();
        let a = eval_qa(&s, &c, Split::Test, &enc).unwrap();
        assert_eq!(a, eval_qa(&s, &c, Split::Test, &enc).unwrap());
    }
}
