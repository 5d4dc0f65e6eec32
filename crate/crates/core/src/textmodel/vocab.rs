//! Whitespace tokenization and the token vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const CLS: u32 = 3;

pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]"];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '…')
}

/// Lowercases, splits on whitespace and peels leading/trailing punctuation
/// into single-character tokens. Inner punctuation (`zzz-unseen`) is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let start = chars.iter().position(|&c| !is_punct(c)).unwrap_or(chars.len());
        let end = chars.iter().rposition(|&c| !is_punct(c)).map_or(start, |i| i + 1);
        out.extend(chars[..start].iter().map(|c| c.to_string()));
        if start < end {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(chars[end.max(start)..].iter().map(|c| c.to_string()));
    }
    out
}

/// Word tokens with punctuation removed, used for keyword matching.
pub fn keyword_tokens(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !t.chars().all(is_punct))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    pub min_freq: usize,
}

impl Vocab {
    fn with_specials(min_freq: usize) -> Self {
        let mut v = Vocab {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            min_freq,
        };
        for s in SPECIALS {
            v.insert(s);
        }
        v
    }

    fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.to_string(), id);
        self.id_to_token.push(token.to_string());
        id
    }

    /// Specials first, then the verbalizer tokens, then every corpus token with
    /// frequency at least `min_freq` in order of first appearance.
    pub fn build(data: &Dataset, min_freq: usize, verbalizer: &Verbalizer) -> Vocab {
        let min_freq = min_freq.max(1);
        let mut vocab = Vocab::with_specials(min_freq);
        vocab.insert(&verbalizer.positive);
        vocab.insert(&verbalizer.negative);
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        for ex in &data.examples {
            for tok in tokenize(&ex.text) {
                let c = counts.entry(tok.clone()).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        for tok in order {
            if counts[&tok] >= min_freq {
                vocab.insert(&tok);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        serde_json::to_string_pretty(&map).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Vocab> {
        let map: BTreeMap<String, u32> = serde_json::from_str(json)?;
        let mut id_to_token = vec![String::new(); map.len()];
        for (tok, &id) in &map {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Serde(format!("vocab id {id} out of range")))?;
            if !slot.is_empty() {
                return Err(Error::Serde(format!("vocab id {id} assigned twice")));
            }
            *slot = tok.clone();
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Serde(format!("special {s} must have id {i}")));
            }
        }
        let token_to_id = map.into_iter().collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
            min_freq: 1,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::harness::io::write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_json(&json)
    }
}

/// Label words read out of the MLM head at the mask slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Verbalizer {
    pub positive: String,
    pub negative: String,
}

impl Default for Verbalizer {
    fn default() -> Self {
        Self {
            positive: "funny".into(),
            negative: "normal".into(),
        }
    }
}

impl Verbalizer {
    /// Vocabulary ids as `[negative, positive]`, i.e. in label order.
    pub fn ids(&self, vocab: &Vocab) -> Result<[u32; 2]> {
        if self.positive == self.negative {
            return Err(Error::InvalidSpec("verbalizer tokens must differ".into()));
        }
        let lookup = |t: &str| {
            vocab
                .id(t)
                .ok_or_else(|| Error::InvalidSpec(format!("verbalizer token `{t}` not in vocab")))
        };
        Ok([lookup(&self.negative)?, lookup(&self.positive)?])
    }
}
