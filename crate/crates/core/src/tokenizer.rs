//! Word- and byte-level vocabularies with reserved special ids.
//!
//! Word mode splits on whitespace and treats every ASCII punctuation
//! character as its own token. Decoding joins tokens with single spaces, so
//! `decode(encode(t))` reproduces `t` after [`Vocab::normalize`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<mask>", "<sep>", "<unk>"];

/// Number of byte tokens plus reserved ids in byte mode.
pub const BYTE_VOCAB_SIZE: usize = 256 + RESERVED.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    Word,
    Byte,
}

/// Token ↔ id mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    mode: TokenizerMode,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Splits text into word-mode tokens: whitespace-separated runs, with each
/// ASCII punctuation character standing alone.
pub fn pre_tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(split_punct)
}

fn split_punct(word: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in word.char_indices() {
        if c.is_ascii_punctuation() {
            if start < i {
                out.push(&word[start..i]);
            }
            out.push(&word[i..i + 1]);
            start = i + 1;
        }
    }
    if start < word.len() {
        out.push(&word[start..]);
    }
    out
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl Vocab {
    /// Builds a vocabulary from corpus lines.
    ///
    /// Word mode keeps the most frequent tokens (ties broken lexicographically)
    /// so that the total size including reserved ids is at most `max_size`.
    /// Byte mode always has [`BYTE_VOCAB_SIZE`] entries.
    pub fn build<I, S>(corpus: I, max_size: usize, mode: TokenizerMode) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        match mode {
            TokenizerMode::Byte => {
                let mut any = false;
                for line in corpus {
                    if !line.as_ref().is_empty() {
                        any = true;
                        break;
                    }
                }
                if !any {
                    return Err(Error::EmptyCorpus);
                }
                Ok(Self::bytes())
            }
            TokenizerMode::Word => {
                if max_size <= RESERVED.len() {
                    return Err(Error::Config(format!(
                        "vocabulary size must exceed the {} reserved ids, got {max_size}",
                        RESERVED.len()
                    )));
                }
                let mut counts: HashMap<String, u64> = HashMap::new();
                for line in corpus {
                    for tok in pre_tokenize(line.as_ref()) {
                        if RESERVED.contains(&tok) {
                            continue;
                        }
                        *counts.entry(tok.to_string()).or_default() += 1;
                    }
                }
                if counts.is_empty() {
                    return Err(Error::EmptyCorpus);
                }
                let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                ranked.truncate(max_size - RESERVED.len());
                Self::from_tokens(TokenizerMode::Word, ranked.into_iter().map(|(t, _)| t))
            }
        }
    }

    /// The fixed byte-level vocabulary.
    pub fn bytes() -> Self {
        Self::from_tokens(TokenizerMode::Byte, (0..=255u8).map(byte_token))
            .expect("byte tokens are distinct")
    }

    fn from_tokens(mode: TokenizerMode, rest: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(rest);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { mode, tokens, index })
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self.mode {
            TokenizerMode::Byte => text.bytes().map(|b| b as u32 + RESERVED.len() as u32).collect(),
            TokenizerMode::Word => pre_tokenize(text)
                .map(|t| match self.index.get(t) {
                    Some(&id) if id as usize >= RESERVED.len() => id,
                    _ => UNK,
                })
                .collect(),
        }
    }

    /// Renders ids as text, skipping PAD and MASK. UNK renders as `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.len()) {
            return Err(Error::TokenOutOfRange { id: bad, size: self.len() });
        }
        let kept = ids.iter().copied().filter(|&i| i != PAD && i != MASK);
        Ok(match self.mode {
            TokenizerMode::Word => kept.map(|i| self.tokens[i as usize].as_str()).collect::<Vec<_>>().join(" "),
            TokenizerMode::Byte => {
                let mut bytes = Vec::new();
                for i in kept {
                    if i >= RESERVED.len() as u32 {
                        bytes.push((i - RESERVED.len() as u32) as u8);
                    } else {
                        bytes.extend_from_slice(RESERVED[i as usize].as_bytes());
                    }
                }
                String::from_utf8_lossy(&bytes).into_owned()
            }
        })
    }

    /// The canonical form that `decode(encode(text))` reproduces for in-vocabulary text.
    pub fn normalize(&self, text: &str) -> String {
        match self.mode {
            TokenizerMode::Word => pre_tokenize(text).collect::<Vec<_>>().join(" "),
            TokenizerMode::Byte => text.to_string(),
        }
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.tokens {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            tokens.push(line.map_err(|e| Error::io(path, e))?);
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data(format!(
                "{}: vocabulary must start with the reserved tokens {RESERVED:?}",
                path.display()
            )));
        }
        let rest = tokens.split_off(RESERVED.len());
        let is_bytes = rest.len() == 256 && rest.iter().enumerate().all(|(b, t)| *t == byte_token(b as u8));
        let mode = if is_bytes { TokenizerMode::Byte } else { TokenizerMode::Word };
        if mode == TokenizerMode::Word && rest.is_empty() {
            return Err(Error::Data(format!("{}: vocabulary has no tokens", path.display())));
        }
        Self::from_tokens(mode, rest)
    }
}
