//! Word-level tokenizer. Splits on whitespace, peels leading/trailing
//! punctuation into their own tokens, and keeps case. The vocabulary is a
//! sorted list of unique tokens behind three reserved specials, capped at 512
//! entries.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

pub const MAX_VOCAB: usize = 512;

const PUNCT: &[char] = &['.', ',', '?', '!', ';', ':', '"', '(', ')', '\''];

/// Split text into word and punctuation tokens.
pub fn word_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        // leading punctuation
        while let Some(c) = rest.chars().next() {
            if PUNCT.contains(&c) {
                out.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            } else {
                break;
            }
        }
        // trailing punctuation (collected, then re-emitted in order)
        let mut tail = Vec::new();
        while let Some(c) = rest.chars().last() {
            if PUNCT.contains(&c) {
                tail.push(c.to_string());
                rest = &rest[..rest.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        tail.reverse();
        out.extend(tail);
    }
    out
}

fn attaches_left(token: &str) -> bool {
    token.len() == 1 && matches!(token.chars().next(), Some('.' | ',' | '?' | '!' | ';' | ':'))
}

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build a vocabulary from the given texts: specials first, then every
    /// unique token in sorted order. Errors if the result would exceed
    /// [`MAX_VOCAB`] entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Vocab> {
        let mut uniq: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for t in texts {
            for tok in word_tokenize(t) {
                uniq.insert(tok);
            }
        }
        let mut tokens = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(uniq);
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary would need {} entries, max is {MAX_VOCAB}",
                tokens.len()
            )));
        }
        Self::from_tokens(tokens)
    }

    /// Rebuild a vocabulary from a stored token list (checkpoint load path).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 3
            || tokens[BOS as usize] != BOS_TOKEN
            || tokens[EOS as usize] != EOS_TOKEN
            || tokens[UNK as usize] != UNK_TOKEN
        {
            return Err(Error::Config(
                "vocabulary must start with <bos>, <eos>, <unk>".into(),
            ));
        }
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary has {} entries, max is {MAX_VOCAB}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    /// Encode text; unknown words map to `<unk>` with a warning.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        word_tokenize(text)
            .into_iter()
            .map(|t| match self.index.get(&t) {
                Some(&id) => id,
                None => {
                    log::warn!("token '{t}' not in vocabulary, using <unk>");
                    UNK
                }
            })
            .collect()
    }

    /// Decode ids back to text. Specials are skipped; sentence punctuation
    /// attaches to the preceding word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == BOS || id == EOS {
                continue;
            }
            let tok = self.token(id);
            if out.is_empty() || attaches_left(tok) {
                out.push_str(tok);
            } else {
                out.push(' ');
                out.push_str(tok);
            }
        }
        out
    }
}
