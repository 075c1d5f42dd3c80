//! Tokenizer, vocabulary and POS-tagged captions.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which part of a `subject predicate object` caption a word belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PosTag {
    Subj = 0,
    Pred = 1,
    Obj = 2,
}

impl PosTag {
    pub const COUNT: usize = 3;
    pub const ALL: [PosTag; 3] = [PosTag::Subj, PosTag::Pred, PosTag::Obj];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        PosTag::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Index(format!("POS class {i} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Subj => "SUBJ",
            PosTag::Pred => "PRED",
            PosTag::Obj => "OBJ",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<u8> for PosTag {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        PosTag::from_index(v as usize)
    }
}

impl From<PosTag> for u8 {
    fn from(t: PosTag) -> u8 {
        t as u8
    }
}

/// True when tags never step backwards in SUBJ < PRED < OBJ order.
pub fn tags_monotone(tags: &[PosTag]) -> bool {
    tags.windows(2).all(|w| w[0] <= w[1])
}

/// Lowercases, splits on whitespace and strips punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an ordered word list, reserved entries excluded.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words.into_iter().map(Into::into));
        Vocabulary::try_from(all)
    }

    /// Frequency-ranked vocabulary; ties broken lexicographically. Words seen
    /// fewer than `min_count` times are left out and will encode as UNK.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for caption in corpus {
            for w in caption {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(w, c)| c >= min_count && !RESERVED.contains(&w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Vocabulary::from_words(ranked.into_iter().map(|(w, _)| w))
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == RESERVED.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Index(format!("token id {id} out of range for {}", self.len())))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(&tokenize(text))
    }

    /// Token strings up to (excluding) the first EOS. PAD and SOS are skipped.
    pub fn decode_tokens(&self, ids: &[usize]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            let w = self.word(id)?;
            if id != PAD && id != SOS {
                out.push(w.to_string());
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(self.decode_tokens(ids)?.join(" "))
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Format(
                "vocabulary must start with <pad> <sos> <eos> <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

/// Token ids with a parallel POS tag per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedCaption {
    tokens: Vec<usize>,
    tags: Vec<PosTag>,
}

impl TaggedCaption {
    pub fn new(tokens: Vec<usize>, tags: Vec<PosTag>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(TaggedCaption { tokens, tags })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn tags(&self) -> &[PosTag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Splits a tagged token sequence into its subject, predicate and object
/// spans, in that order.
pub fn split_spans<S: AsRef<str>>(tokens: &[S], tags: &[PosTag]) -> [Vec<String>; 3] {
    let mut spans: [Vec<String>; 3] = Default::default();
    for (t, tag) in tokens.iter().zip(tags) {
        spans[tag.index()].push(t.as_ref().to_string());
    }
    spans
}
