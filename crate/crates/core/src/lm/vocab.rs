use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const VIS: usize = 3;
pub const USER: usize = 4;
pub const ASSISTANT: usize = 5;
pub const UNK: usize = 6;

const RESERVED: [&str; 7] = ["<pad>", "<s>", "</s>", "<VIS>", "USER:", "ASSISTANT:", "<unk>"];

/// Markers matched verbatim before any normalization.
const MARKERS: [(&str, usize); 5] = [
    ("<s>", BOS),
    ("</s>", EOS),
    ("<VIS>", VIS),
    ("USER:", USER),
    ("ASSISTANT:", ASSISTANT),
];

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const DIRECTIONS: [&str; 4] = ["left", "right", "up", "down"];

const GRAMMAR: [&str; 23] = [
    "a", "and", "moves", "describe", "the", "image", "video", "what", "color", "is", "shape",
    "which", "direction", "does", "it", "move", "yes", "no", "there", "in", ".", "?", ",",
];

const PUNCTUATION: [char; 4] = ['.', '?', ',', '!'];

/// Word-level vocabulary: reserved ids first, then the corpus grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::glyph_world()
    }
}

impl Vocabulary {
    pub fn glyph_world() -> Self {
        let words = RESERVED
            .iter()
            .chain(&COLORS)
            .chain(&SHAPES)
            .chain(&DIRECTIONS)
            .chain(&GRAMMAR);
        let tokens: Vec<String> = words.map(|w| w.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IdOutOfRange {
                id,
                vocab: self.tokens.len(),
            })
    }

    /// Lowercases words, splits off punctuation and maps unknown words to
    /// UNK. Special markers are recognised case-sensitively.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for chunk in text.split_whitespace() {
            let mut rest = chunk;
            while !rest.is_empty() {
                if let Some((m, id)) = MARKERS.iter().find(|(m, _)| rest.starts_with(m)) {
                    ids.push(*id);
                    rest = &rest[m.len()..];
                    continue;
                }
                let stop = rest
                    .char_indices()
                    .skip(1)
                    .find(|&(i, c)| PUNCTUATION.contains(&c) || rest[i..].starts_with('<'))
                    .map_or(rest.len(), |(i, _)| i);
                let word = rest[..stop].to_lowercase();
                ids.push(self.id(&word).unwrap_or(UNK));
                rest = &rest[stop..];
            }
        }
        ids
    }

    /// Joins tokens with single spaces, attaching punctuation and `</s>` to
    /// the preceding token.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id)?;
            let attach = id == EOS || tok.chars().all(|c| PUNCTUATION.contains(&c));
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }
}

/// Canonical text form that survives a tokenize/detokenize round trip.
pub fn normalize_text(vocab: &Vocabulary, text: &str) -> String {
    vocab
        .detokenize(&vocab.tokenize(text))
        .expect("tokenize only yields in-range ids")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reserved_ids_are_dense_and_distinct() {
        let v = Vocabulary::glyph_world();
        assert_eq!(v.token(VIS).unwrap(), "<VIS>");
        assert_eq!(v.token(EOS).unwrap(), "</s>");
        assert_eq!(v.len(), 43);
        let mut seen = std::collections::HashSet::new();
        for i in 0..v.len() {
            assert!(seen.insert(v.token(i).unwrap().to_string()));
        }
    }

    #[test]
    fn golden_tokenization() {
        let v = Vocabulary::glyph_world();
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.detokenize(&[]).unwrap(), "");
        let ids = v.tokenize("red square");
        assert_eq!(ids, vec![v.id("red").unwrap(), v.id("square").unwrap()]);
        assert_eq!(v.detokenize(&ids).unwrap(), "red square");
        assert!(v.detokenize(&[v.len()]).is_err());
        assert_eq!(v.tokenize("Zebra"), vec![UNK]);
    }

    #[test]
    fn markers_and_punctuation_split() {
        let v = Vocabulary::glyph_world();
        let ids = v.tokenize("USER: <VIS> What color is the circle? ASSISTANT: red</s>");
        assert_eq!(ids[0], USER);
        assert_eq!(ids[1], VIS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert!(ids.contains(&v.id("?").unwrap()));
        assert!(!ids.contains(&UNK));
        assert_eq!(
            v.detokenize(&ids).unwrap(),
            "USER: <VIS> what color is the circle? ASSISTANT: red</s>"
        );
    }

    proptest! {
        #[test]
        fn in_vocabulary_text_round_trips(words in proptest::collection::vec(7usize..43, 0..20)) {
            let v = Vocabulary::glyph_world();
            let text = v.detokenize(&words).unwrap();
            prop_assert_eq!(v.tokenize(&text), words.clone());
            prop_assert_eq!(normalize_text(&v, &text), text);
        }
    }
}
