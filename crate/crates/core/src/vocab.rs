//! Word-level vocabulary with reserved control tokens.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];
pub const DEFAULT_MAX_LEN: usize = 12;
pub const FORMAT_VERSION: u32 = 1;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Canonical form used for exact-match comparison.
pub fn normalize(caption: &str) -> String {
    tokenize(caption).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    max_len: usize,
    tokens: Vec<String>,
}

impl Vocab {
    /// Reserved tokens take ids 0..4; the remaining distinct words follow in
    /// lexicographic order.
    pub fn build<S: AsRef<str>>(captions: &[S], max_len: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Empty("caption list"));
        }
        if max_len < 2 {
            return Err(Error::Config("max_len must leave room for START and END".into()));
        }
        let words: BTreeSet<String> = captions
            .iter()
            .flat_map(|c| tokenize(c.as_ref()))
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens, max_len)
    }

    fn from_tokens(tokens: Vec<String>, max_len: usize) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary must start with the reserved tokens".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Format("duplicate vocabulary token".into()));
        }
        Ok(Self {
            tokens,
            index,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[START, tokens.., END, PAD..]` of length `max_len`.
    pub fn encode(&self, caption: &str) -> Result<Vec<usize>> {
        let words = tokenize(caption);
        let limit = self.max_len - 2;
        if words.len() > limit {
            return Err(Error::CaptionTooLong {
                caption: caption.to_string(),
                tokens: words.len(),
                limit,
            });
        }
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(START);
        ids.extend(words.iter().map(|w| self.id(w).unwrap_or(UNK)));
        ids.push(END);
        ids.resize(self.max_len, PAD);
        Ok(ids)
    }

    /// Joins the words up to the first END, skipping control tokens.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let token = self.token(id).ok_or(Error::InvalidTokenId(id))?;
            match id {
                END => break,
                PAD | START => {}
                _ => words.push(token),
            }
        }
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            version: FORMAT_VERSION,
            max_len: self.max_len,
            tokens: self.tokens.clone(),
        })
        .expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported vocabulary version {}", file.version)));
        }
        Self::from_tokens(file.tokens, file.max_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        VocabFile {
            version: FORMAT_VERSION,
            max_len: self.max_len,
            tokens: self.tokens.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = VocabFile::deserialize(d)?;
        Vocab::from_tokens(file.tokens, file.max_len).map_err(serde::de::Error::custom)
    }
}
