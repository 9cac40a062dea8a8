use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::CaptionRecord;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, drops ASCII punctuation and splits on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Fixed-length caption ids: `BOS, tokens.., EOS, PAD..`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Count of non-PAD ids, BOS and EOS included.
    pub len: usize,
}

impl TokenSequence {
    /// Teacher-forcing decoder input (drops the last position).
    pub fn input(&self) -> &[usize] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Next-token targets aligned with [`TokenSequence::input`].
    pub fn target(&self) -> &[usize] {
        &self.ids[1..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved ids first, then every caption token in sorted order.
    pub fn build(records: &[CaptionRecord]) -> Self {
        let words: BTreeSet<String> = records
            .iter()
            .flat_map(|r| r.captions.iter())
            .flat_map(|c| tokenize(c))
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect::<Vec<_>>();
        Vocabulary::from(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Vocab("reserved tokens must occupy ids 0..4".into()));
        }
        let v = Vocabulary::from(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Vocab("duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("id {id} out of range for {} tokens", self.len())))
    }

    /// Truncates to `max_len - 2` tokens, wraps in BOS/EOS and pads to
    /// `max_len`.
    pub fn encode(&self, caption: &str, max_len: usize) -> Result<TokenSequence> {
        if max_len < 3 {
            return Err(Error::config("max_len", "must be at least 3"));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(tokenize(caption).iter().take(max_len - 2).map(|w| self.id(w)));
        ids.push(EOS);
        let len = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids, len })
    }

    /// Joins the tokens between BOS and the first EOS; PAD is skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token(id)?;
            match id {
                EOS => break,
                BOS | PAD => continue,
                _ => words.push(tok),
            }
        }
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageSource, Split};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn vocab(captions: &[&str]) -> Vocabulary {
        let rec = CaptionRecord {
            id: "r".into(),
            image: ImageSource::Pixels(Tensor::zeros(&[1, 1, 3])),
            captions: captions.iter().map(|s| s.to_string()).collect(),
            split: Split::Train,
        };
        Vocabulary::build(&[rec])
    }

    #[test]
    fn round_trip() {
        let v = vocab(&["A red square."]);
        let seq = v.encode("a red square", 8).unwrap();
        assert_eq!(seq.ids.len(), 8);
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(v.decode(&seq.ids).unwrap(), "a red square");
    }

    #[test]
    fn truncation_keeps_eos() {
        let v = vocab(&["one two three four five six"]);
        let seq = v.encode("one two three four five six", 5).unwrap();
        assert_eq!(seq.ids.len(), 5);
        assert_eq!(seq.ids[4], EOS);
        assert_eq!(seq.len, 5);
        assert_eq!(v.decode(&seq.ids).unwrap(), "one two three");
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let v = vocab(&["a red square"]);
        let seq = v.encode("a purple square", 6).unwrap();
        assert_eq!(seq.ids[2], UNK);
    }

    #[test]
    fn reserved_ids_fixed() {
        let v = vocab(&["x"]);
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.token(BOS).unwrap(), "<bos>");
        assert_eq!(v.token(EOS).unwrap(), "<eos>");
        assert_eq!(v.token(UNK).unwrap(), "<unk>");
    }

    #[test]
    fn decode_out_of_range_is_error() {
        let v = vocab(&["x"]);
        assert!(v.decode(&[BOS, 99]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = vocab(&["a red square", "two blue circles"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn encode_is_idempotent(words in proptest::collection::vec("[a-e]{1,3}", 0..12), max_len in 3usize..10) {
            let v = vocab(&["a b c d e aa bb"]);
            let s = words.join(" ");
            let once = v.encode(&s, max_len).unwrap();
            let again = v.encode(&v.decode(&once.ids).unwrap(), max_len).unwrap();
            prop_assert_eq!(&once, &again);
            // PAD only after EOS, exact length.
            prop_assert_eq!(once.ids.len(), max_len);
            let eos = once.ids.iter().position(|&i| i == EOS).unwrap();
            prop_assert!(once.ids[..eos].iter().all(|&i| i != PAD));
            prop_assert!(once.ids[eos + 1..].iter().all(|&i| i == PAD));
        }
    }
}
