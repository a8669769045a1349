//! Chat templating, round inputs and loss-masked training examples.
//!
//! Template: `USER: <VIS> {q} ASSISTANT: {a}</s>` for the first round and
//! `USER: {q} ASSISTANT: {a}</s>` afterwards; sequences start with BOS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{normalize_text, Vocabulary, ASSISTANT, BOS, EOS, USER, VIS};
use crate::vision::Modality;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub rounds: Vec<Round>,
}

impl Conversation {
    pub fn new(rounds: Vec<Round>) -> Result<Self> {
        let c = Self { rounds };
        c.validate()?;
        Ok(c)
    }

    pub fn single(question: &str, answer: &str) -> Self {
        Self {
            rounds: vec![Round {
                question: question.into(),
                answer: answer.into(),
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() {
            return Err(Error::EmptyConversation);
        }
        if self
            .rounds
            .iter()
            .any(|r| r.question.trim().is_empty() || r.answer.trim().is_empty())
        {
            return Err(Error::InvalidConfig("conversation with an empty turn".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Query(String),
    Answer(String),
}

/// The text the model conditions on in round `r`: every earlier turn
/// followed by the current instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundInput {
    pub segments: Vec<Segment>,
}

impl RoundInput {
    /// Templated prompt ending with the `ASSISTANT:` marker.
    pub fn render(&self, visual: bool) -> String {
        let mut out = String::new();
        let mut first = true;
        for s in &self.segments {
            match s {
                Segment::Query(q) => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str("USER: ");
                    if visual && first {
                        out.push_str("<VIS> ");
                    }
                    first = false;
                    out.push_str(q);
                    out.push_str(" ASSISTANT:");
                }
                Segment::Answer(a) => {
                    out.push(' ');
                    out.push_str(a);
                    out.push_str("</s>");
                }
            }
        }
        out
    }

    /// BOS followed by the tokenized prompt.
    pub fn prompt_ids(&self, vocab: &Vocabulary, visual: bool) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(vocab.tokenize(&self.render(visual)))
            .collect()
    }
}

/// `r` is 1-based.
pub fn build_round_input(conv: &Conversation, r: usize) -> Result<RoundInput> {
    if r == 0 || r > conv.rounds.len() {
        return Err(Error::RoundOutOfRange {
            round: r,
            rounds: conv.rounds.len(),
        });
    }
    let mut segments = Vec::with_capacity(2 * r - 1);
    for round in &conv.rounds[..r - 1] {
        segments.push(Segment::Query(round.question.clone()));
        segments.push(Segment::Answer(round.answer.clone()));
    }
    segments.push(Segment::Query(conv.rounds[r - 1].question.clone()));
    Ok(RoundInput { segments })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub ids: Vec<usize>,
    /// Set exactly over answer tokens and the EOS closing each answer.
    pub mask: Vec<bool>,
    pub visual_slot: Option<usize>,
    pub modality: Option<Modality>,
}

impl TrainingExample {
    pub fn supervised(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Tokenizes every round of `conv` through the template. `visual_tokens`
/// is the number of rows the VIS slot expands to, used for the context
/// check; `None` means a text-only conversation.
pub fn build_training_example(
    conv: &Conversation,
    visual: Option<(Modality, usize)>,
    vocab: &Vocabulary,
    context: usize,
) -> Result<TrainingExample> {
    conv.validate()?;
    let mut ids = vec![BOS];
    let mut mask = vec![false];
    let mut slot = None;
    for (i, round) in conv.rounds.iter().enumerate() {
        ids.push(USER);
        mask.push(false);
        if i == 0 && visual.is_some() {
            slot = Some(ids.len());
            ids.push(VIS);
            mask.push(false);
        }
        let q = vocab.tokenize(&round.question);
        mask.extend(std::iter::repeat_n(false, q.len() + 1));
        ids.extend(q);
        ids.push(ASSISTANT);
        let a = vocab.tokenize(&round.answer);
        mask.extend(std::iter::repeat_n(true, a.len() + 1));
        ids.extend(a);
        ids.push(EOS);
    }
    let expanded = ids.len() + visual.map_or(0, |(_, n)| n.saturating_sub(1));
    if expanded > context {
        return Err(Error::ContextOverflow {
            len: expanded,
            window: context,
        });
    }
    Ok(TrainingExample {
        ids,
        mask,
        visual_slot: slot,
        modality: visual.map(|(m, _)| m),
    })
}

/// Recovers the round structure from templated ids.
pub fn parse_example(ids: &[usize], vocab: &Vocabulary) -> Result<(Conversation, bool)> {
    let bad = |offset: usize, detail: &str| Error::Format {
        offset,
        detail: detail.to_string(),
    };
    if ids.first() != Some(&BOS) {
        return Err(bad(0, "missing BOS"));
    }
    let mut i = 1;
    let mut rounds = Vec::new();
    let mut visual = false;
    while i < ids.len() {
        if ids[i] != USER {
            return Err(bad(i, "expected USER marker"));
        }
        i += 1;
        if rounds.is_empty() && ids.get(i) == Some(&VIS) {
            visual = true;
            i += 1;
        }
        let q_end = ids[i..]
            .iter()
            .position(|&t| t == ASSISTANT)
            .ok_or_else(|| bad(i, "missing ASSISTANT marker"))?
            + i;
        let a_end = ids[q_end..]
            .iter()
            .position(|&t| t == EOS)
            .ok_or_else(|| bad(q_end, "missing EOS"))?
            + q_end;
        rounds.push(Round {
            question: vocab.detokenize(&ids[i..q_end])?,
            answer: vocab.detokenize(&ids[q_end + 1..a_end])?,
        });
        i = a_end + 1;
    }
    Ok((Conversation::new(rounds)?, visual))
}

/// Conversation with every turn in tokenizer-normal form.
pub fn normalize_conversation(conv: &Conversation, vocab: &Vocabulary) -> Conversation {
    Conversation {
        rounds: conv
            .rounds
            .iter()
            .map(|r| Round {
                question: normalize_text(vocab, &r.question),
                answer: normalize_text(vocab, &r.answer),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn conv(pairs: &[(&str, &str)]) -> Conversation {
        Conversation::new(
            pairs
                .iter()
                .map(|(q, a)| Round {
                    question: q.to_string(),
                    answer: a.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn first_round_is_the_first_query() {
        let c = conv(&[("what color is the circle?", "red"), ("which shape is blue?", "square")]);
        let r1 = build_round_input(&c, 1).unwrap();
        assert_eq!(r1.segments, vec![Segment::Query("what color is the circle?".into())]);
        assert_eq!(r1.render(true), "USER: <VIS> what color is the circle? ASSISTANT:");
        let r2 = build_round_input(&c, 2).unwrap();
        assert_eq!(
            r2.segments,
            vec![
                Segment::Query("what color is the circle?".into()),
                Segment::Answer("red".into()),
                Segment::Query("which shape is blue?".into()),
            ]
        );
        assert_eq!(
            r2.render(true),
            "USER: <VIS> what color is the circle? ASSISTANT: red</s> USER: which shape is blue? ASSISTANT:"
        );
        assert!(matches!(build_round_input(&c, 0), Err(Error::RoundOutOfRange { .. })));
        assert!(matches!(build_round_input(&c, 3), Err(Error::RoundOutOfRange { .. })));
    }

    #[test]
    fn third_round_carries_full_history() {
        let c = conv(&[("q one", "a"), ("q two", "b"), ("q three", "c")]);
        let r3 = build_round_input(&c, 3).unwrap();
        assert_eq!(r3.segments.len(), 5);
        assert_eq!(r3.segments[3], Segment::Answer("b".into()));
    }

    #[test]
    fn mask_sums_count_answers_and_eos() {
        let v = Vocabulary::glyph_world();
        let c = conv(&[("describe the image.", "a red square")]);
        let ex = build_training_example(&c, Some((Modality::Image, 16)), &v, 256).unwrap();
        assert_eq!(ex.supervised(), 4);
        assert_eq!(ex.ids[ex.visual_slot.unwrap()], VIS);
        assert!(!ex.mask[ex.visual_slot.unwrap()]);

        let c = conv(&[("q", "red square"), ("q", "a red square and a")]);
        let ex = build_training_example(&c, None, &v, 256).unwrap();
        assert_eq!(ex.supervised(), 9);
        assert!(ex.visual_slot.is_none());
    }

    #[test]
    fn overflow_and_empty_are_errors() {
        let v = Vocabulary::glyph_world();
        let c = conv(&[("describe the image.", "a red square")]);
        assert!(matches!(
            build_training_example(&c, Some((Modality::Image, 16)), &v, 20),
            Err(Error::ContextOverflow { .. })
        ));
        let empty = Conversation { rounds: vec![] };
        assert!(matches!(
            build_training_example(&empty, None, &v, 256),
            Err(Error::EmptyConversation)
        ));
    }

    #[test]
    fn example_ids_match_the_rendered_template() {
        let v = Vocabulary::glyph_world();
        let c = conv(&[("what color is the circle?", "red"), ("is there a blue square in the image?", "no")]);
        let ex = build_training_example(&c, Some((Modality::Image, 16)), &v, 256).unwrap();
        let mut full = build_round_input(&c, 2).unwrap();
        full.segments.push(Segment::Answer("no".into()));
        assert_eq!(full.prompt_ids(&v, true), ex.ids);
    }

    fn word() -> impl Strategy<Value = String> {
        proptest::sample::select(vec![
            "red", "green", "blue", "yellow", "purple", "orange", "square", "circle", "triangle",
            "left", "right", "up", "down", "a", "and", "moves", "the", "image", "video", "what",
            "color", "is", "shape", "which", "direction", "does", "it", "move", "yes", "no",
            "there", "in", "describe", "?", ".", ",",
        ])
        .prop_map(String::from)
    }

    fn phrase() -> impl Strategy<Value = String> {
        proptest::collection::vec(word(), 1..8).prop_map(|w| {
            let v = Vocabulary::glyph_world();
            let ids: Vec<usize> = w.iter().map(|x| v.id(x).unwrap()).collect();
            v.detokenize(&ids).unwrap()
        })
    }

    fn conversation() -> impl Strategy<Value = Conversation> {
        proptest::collection::vec((phrase(), phrase()), 1..5).prop_map(|rs| Conversation {
            rounds: rs
                .into_iter()
                .map(|(question, answer)| Round { question, answer })
                .collect(),
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_inputs_grow_by_prefix(c in conversation(), visual in any::<bool>()) {
            let v = Vocabulary::glyph_world();
            let r1 = build_round_input(&c, 1).unwrap();
            prop_assert_eq!(&r1.segments, &vec![Segment::Query(c.rounds[0].question.clone())]);
            for r in 1..c.len() {
                let cur = build_round_input(&c, r).unwrap();
                let next = build_round_input(&c, r + 1).unwrap();
                let mut extended = cur.segments.clone();
                extended.push(Segment::Answer(c.rounds[r - 1].answer.clone()));
                prop_assert!(next.segments.starts_with(&extended));
                let text = format!("{} {}</s>", cur.render(visual), c.rounds[r - 1].answer);
                prop_assert!(next.render(visual).starts_with(&text));
                let ids = next.prompt_ids(&v, visual);
                let mut prefix = cur.prompt_ids(&v, visual);
                prefix.extend(v.tokenize(&c.rounds[r - 1].answer));
                prefix.push(EOS);
                prop_assert!(ids.starts_with(&prefix));
            }
        }

        #[test]
        fn masks_cover_exactly_answers(c in conversation(), visual in any::<bool>()) {
            let v = Vocabulary::glyph_world();
            let vis = visual.then_some((Modality::Video, 16));
            let ex = build_training_example(&c, vis, &v, 256).unwrap();
            let expect: usize = c.rounds.iter().map(|r| v.tokenize(&r.answer).len() + 1).sum();
            prop_assert_eq!(ex.supervised(), expect);
            prop_assert_eq!(ex.mask.len(), ex.ids.len());
            for (i, &m) in ex.mask.iter().enumerate() {
                if m {
                    prop_assert!(ex.ids[i] != USER && ex.ids[i] != ASSISTANT && ex.ids[i] != VIS);
                }
            }
            let (parsed, had_visual) = parse_example(&ex.ids, &v).unwrap();
            prop_assert_eq!(parsed, normalize_conversation(&c, &v));
            prop_assert_eq!(had_visual, visual);
        }
    }
}
