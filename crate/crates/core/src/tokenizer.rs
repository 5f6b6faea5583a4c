//! Whitespace + lowercase tokenizer over a newline-delimited vocabulary file.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::TextPrompt;

pub const PAD_TOKEN: &str = "[pad]";
pub const UNK_TOKEN: &str = "[unk]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// The first two entries are always the padding and unknown tokens.
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        for w in words {
            let w = w.trim().to_lowercase();
            if !w.is_empty() && !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Collects every word of the given captions, sorted.
    pub fn from_corpus<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = captions.into_iter().flat_map(split_words).collect();
        Self::new(words)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_lines(&text))
    }

    pub fn from_lines(text: &str) -> Self {
        Self::new(
            text.lines()
                .filter(|l| {
                    let l = l.trim();
                    l != PAD_TOKEN && l != UNK_TOKEN
                })
                .map(str::to_string),
        )
    }

    pub fn to_lines(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownPolicy {
    #[default]
    Error,
    MapToUnk,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocabulary,
    max_len: usize,
    unknown: UnknownPolicy,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Self {
        Self {
            vocab,
            max_len,
            unknown: UnknownPolicy::Error,
        }
    }

    pub fn with_unknown_policy(mut self, policy: UnknownPolicy) -> Self {
        self.unknown = policy;
        self
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Tokenizes a caption; long captions are truncated to `max_len`.
    pub fn encode(&self, text: &str) -> Result<TextPrompt> {
        let mut tokens = Vec::new();
        for word in split_words(text) {
            let id = match (self.vocab.id(&word), self.unknown) {
                (Some(id), _) => id,
                (None, UnknownPolicy::MapToUnk) => self.vocab.unk_id(),
                (None, UnknownPolicy::Error) => {
                    return Err(Error::Tokenizer(format!(
                        "`{word}` is not in the vocabulary"
                    )))
                }
            };
            tokens.push(id);
        }
        if tokens.is_empty() {
            return Err(Error::Tokenizer(format!("caption `{text}` has no tokens")));
        }
        tokens.truncate(self.max_len);
        Ok(TextPrompt {
            raw_text: text.to_string(),
            tokens,
        })
    }

    /// Validates externally supplied token ids.
    pub fn check(&self, prompt: &TextPrompt) -> Result<()> {
        if prompt.tokens.is_empty() {
            return Err(Error::Tokenizer("empty token sequence".into()));
        }
        if let Some(bad) = prompt
            .tokens
            .iter()
            .find(|&&id| id as usize >= self.vocab.len())
        {
            return Err(Error::Tokenizer(format!(
                "token id {bad} outside a vocabulary of {}",
                self.vocab.len()
            )));
        }
        Ok(())
    }
}
