//! Polling-based object existence questions.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::glyph::all_objects;
use crate::data::{existence_question, object_frequencies, Corpus, Record};
use crate::error::{Error, Result};
use crate::lm::{generate, Decoding, Vocabulary};
use crate::train::{encode_records, EncodeConfig, ModelState, LM, PROJECTION};
use crate::data::{build_round_input, Conversation};

/// How negative objects are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeStrategy {
    /// Uniform over absent objects.
    Random,
    /// Absent objects that are most frequent corpus-wide.
    Popular,
    /// Absent objects that co-occur most with the present ones.
    Adversarial,
}

impl PopeStrategy {
    pub const ALL: [PopeStrategy; 3] = [PopeStrategy::Random, PopeStrategy::Popular, PopeStrategy::Adversarial];

    pub fn as_str(self) -> &'static str {
        match self {
            PopeStrategy::Random => "random",
            PopeStrategy::Popular => "popular",
            PopeStrategy::Adversarial => "adversarial",
        }
    }
}

impl FromStr for PopeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeItem {
    /// Index into the records the set was built from.
    pub record: usize,
    pub record_id: String,
    pub object: String,
    pub label: bool,
    pub strategy: PopeStrategy,
}

impl PopeItem {
    pub fn question(&self, record: &Record) -> String {
        existence_question(&self.object, record.modality)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeQuestionSet {
    pub strategy: PopeStrategy,
    pub items: Vec<PopeItem>,
}

impl PopeQuestionSet {
    /// Fraction of "yes" labels.
    pub fn balance(&self) -> f64 {
        let yes = self.items.iter().filter(|i| i.label).count();
        yes as f64 / self.items.len().max(1) as f64
    }
}

/// Co-occurrence counts of object pairs within records.
fn cooccurrence(records: &[&Record]) -> HashMap<(String, String), usize> {
    let mut m = HashMap::new();
    for r in records {
        for a in &r.objects {
            for b in &r.objects {
                if a != b {
                    *m.entry((a.clone(), b.clone())).or_insert(0) += 1;
                }
            }
        }
    }
    m
}

/// Absent objects of `r`, best negative first.
fn ranked_negatives<R: rand::Rng>(
    r: &Record,
    strategy: PopeStrategy,
    freq: &BTreeMap<String, usize>,
    co: &HashMap<(String, String), usize>,
    rng: &mut R,
) -> Vec<String> {
    let mut absent: Vec<String> = all_objects()
        .into_iter()
        .filter(|o| !r.objects.contains(o))
        .collect();
    match strategy {
        PopeStrategy::Random => absent.shuffle(rng),
        PopeStrategy::Popular => {
            absent.sort_by(|a, b| freq[b].cmp(&freq[a]).then_with(|| a.cmp(b)));
        }
        PopeStrategy::Adversarial => {
            let score = |o: &String| -> usize {
                r.objects
                    .iter()
                    .map(|p| co.get(&(p.clone(), o.clone())).copied().unwrap_or(0))
                    .sum()
            };
            absent.sort_by(|a, b| score(b).cmp(&score(a)).then_with(|| a.cmp(b)));
        }
    }
    absent
}

/// Takes `n` (record, object) pairs, one rank level at a time across a
/// shuffled record order, so every record contributes before any gives two.
fn take_levels(lists: &[(usize, Vec<String>)], n: usize) -> Option<Vec<(usize, String)>> {
    let mut out = Vec::with_capacity(n);
    let depth = lists.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
    for level in 0..depth {
        for (r, l) in lists {
            if out.len() == n {
                return Some(out);
            }
            if let Some(o) = l.get(level) {
                out.push((*r, o.clone()));
            }
        }
    }
    (out.len() == n).then_some(out)
}

/// Builds a balanced set of `n` existence questions over `records`
/// (`n / 2` rounded down are labelled yes).
pub fn pope_build(records: &[Record], strategy: PopeStrategy, n: usize, seed: u64) -> Result<PopeQuestionSet> {
    if n == 0 {
        return Err(Error::NotEnoughMaterial("n must be positive".into()));
    }
    let all: Vec<&Record> = records.iter().collect();
    let freq: BTreeMap<String, usize> = object_frequencies(all.iter().copied()).into_iter().collect();
    let co = cooccurrence(&all);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let mut positives = Vec::with_capacity(order.len());
    let mut negatives = Vec::with_capacity(order.len());
    for &i in &order {
        let mut present = records[i].objects.clone();
        present.shuffle(&mut rng);
        positives.push((i, present));
        negatives.push((i, ranked_negatives(&records[i], strategy, &freq, &co, &mut rng)));
    }
    let n_yes = n / 2;
    let n_no = n - n_yes;
    let short = |kind: &str| {
        Error::NotEnoughMaterial(format!(
            "{n} {} questions need {} {kind} pairs from {} records",
            strategy.as_str(),
            if kind == "yes" { n_yes } else { n_no },
            records.len()
        ))
    };
    let yes = take_levels(&positives, n_yes).ok_or_else(|| short("yes"))?;
    let no = take_levels(&negatives, n_no).ok_or_else(|| short("no"))?;
    let mut items: Vec<PopeItem> = yes
        .into_iter()
        .map(|p| (p, true))
        .chain(no.into_iter().map(|p| (p, false)))
        .map(|((record, object), label)| PopeItem {
            record,
            record_id: records[record].id.clone(),
            object,
            label,
            strategy,
        })
        .collect();
    items.shuffle(&mut rng);
    Ok(PopeQuestionSet { strategy, items })
}

/// A model response reduced to its leading yes/no token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeAnswer {
    Yes,
    No,
    Unparseable,
}

impl PopeAnswer {
    pub fn parse(text: &str) -> Self {
        let first = text
            .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
            .find(|w| !w.is_empty())
            .map(str::to_lowercase);
        match first.as_deref() {
            Some("yes") => PopeAnswer::Yes,
            Some("no") => PopeAnswer::No,
            _ => PopeAnswer::Unparseable,
        }
    }
}

impl From<bool> for PopeAnswer {
    fn from(yes: bool) -> Self {
        if yes {
            PopeAnswer::Yes
        } else {
            PopeAnswer::No
        }
    }
}

/// Confusion counts over parsed answers plus the unparseable tallies, and
/// the percentages derived from them (one decimal).
///
/// An unparseable answer is always wrong and never counts as a yes; those
/// on positive items still count as missed positives for recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeScore {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub unparseable_yes: usize,
    pub unparseable_no: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub yes_rate: f64,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        return 0.0;
    }
    (1000.0 * num as f64 / den as f64).round() / 10.0
}

pub fn pope_score(predictions: &[PopeAnswer], labels: &[bool]) -> Result<PopeScore> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptySplit("no POPE items to score".into()));
    }
    let mut s = PopeScore {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
        unparseable_yes: 0,
        unparseable_no: 0,
        accuracy: 0.0,
        f1: 0.0,
        yes_rate: 0.0,
    };
    for (p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (PopeAnswer::Yes, true) => s.tp += 1,
            (PopeAnswer::Yes, false) => s.fp += 1,
            (PopeAnswer::No, false) => s.tn += 1,
            (PopeAnswer::No, true) => s.fn_ += 1,
            (PopeAnswer::Unparseable, true) => s.unparseable_yes += 1,
            (PopeAnswer::Unparseable, false) => s.unparseable_no += 1,
        }
    }
    let n = labels.len();
    s.accuracy = pct(s.tp + s.tn, n);
    s.f1 = pct(2 * s.tp, 2 * s.tp + s.fp + s.fn_ + s.unparseable_yes);
    s.yes_rate = pct(s.tp + s.fp, n);
    Ok(s)
}

/// Answers of `state` to every question of `set`, in item order.
pub fn pope_predict(
    state: &ModelState,
    corpus: &Corpus,
    records: &[usize],
    set: &PopeQuestionSet,
    enc: &EncodeConfig,
) -> Result<Vec<PopeAnswer>> {
    let vocab = Vocabulary::glyph_world();
    let mut needed: Vec<usize> = set.items.iter().map(|i| records[i.record]).collect();
    needed.sort_unstable();
    needed.dedup();
    let feats = encode_records(state, corpus, &needed, enc)?;
    set.items
        .iter()
        .map(|item| {
            let idx = records[item.record];
            let conv = Conversation::single(&item.question(&corpus.records[idx]), "");
            let prompt = build_round_input(&conv, 1)?.prompt_ids(&vocab, true);
            let out = generate(
                Some(feats.get(idx)?),
                &prompt,
                state.group(PROJECTION)?,
                state.group(LM)?,
                &state.dims.lm,
                4,
                Decoding::Greedy,
            )?;
            Ok(PopeAnswer::parse(&vocab.detokenize(&out)?))
        })
        .collect()
}
