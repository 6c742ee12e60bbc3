use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const UNK: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<sep>", "<unk>"];

const CONTENT_SUFFIX: &str = "\t#content";

/// Token ↔ id bijection with per-token content flags.
///
/// Ids `0..5` are always the reserved tokens above and are never content.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    content: Vec<bool>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
            content: Vec::new(),
        };
        for tok in RESERVED {
            v.tokens.push(tok.to_string());
            v.ids.insert(tok.to_string(), v.tokens.len() - 1);
            v.content.push(false);
        }
        v
    }

    /// Adds `token` (or updates its content flag) and returns its id.
    pub fn add(&mut self, token: &str, content: bool) -> Result<usize> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Vocab(format!("invalid token {token:?}")));
        }
        if let Some(&id) = self.ids.get(token) {
            if id < RESERVED.len() {
                if content {
                    return Err(Error::Vocab(format!("reserved token {token} cannot be content")));
                }
                return Ok(id);
            }
            self.content[id] = content;
            return Ok(id);
        }
        self.tokens.push(token.to_string());
        self.content.push(content);
        let id = self.tokens.len() - 1;
        self.ids.insert(token.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, or `UNK`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_content(&self, id: usize) -> bool {
        self.content.get(id).copied().unwrap_or(false)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id_or_unk(t)).collect()
    }

    /// Space-joined tokens, skipping reserved ids other than `UNK`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id == UNK || id >= RESERVED.len())
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line in id order; content tokens carry `\t#content`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (tok, &c) in self.tokens.iter().zip(&self.content) {
            out.push_str(tok);
            if c {
                out.push_str(CONTENT_SUFFIX);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut v = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tok, content) = match line.strip_suffix(CONTENT_SUFFIX) {
                Some(t) => (t, true),
                None => (line, false),
            };
            if tok.contains('\t') {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("unexpected field in vocabulary line {line:?}"),
                });
            }
            if v.id(tok).is_some_and(|id| id >= RESERVED.len()) {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("duplicate token {tok:?}"),
                });
            }
            v.add(tok, content).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(v)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn fingerprint(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_file_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<s>"), Some(BOS));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("<sep>"), Some(SEP));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert!((0..5).all(|i| !v.is_content(i)));
    }

    #[test]
    fn file_round_trip_is_exact() {
        let mut v = Vocabulary::new();
        v.add("query", false).unwrap();
        v.add("v1", true).unwrap();
        v.add("k1", false).unwrap();
        let text = v.to_file_string();
        let back = Vocabulary::parse(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_file_string(), text);
        assert!(back.is_content(back.id("v1").unwrap()));
    }

    #[test]
    fn reserved_tokens_cannot_be_content() {
        let mut v = Vocabulary::new();
        assert!(v.add("<sep>", true).is_err());
        assert!(Vocabulary::parse("<s>\t#content\n").is_err());
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let mut v = Vocabulary::new();
        v.add("a", false).unwrap();
        assert_eq!(v.encode("a zz a"), vec![5, UNK, 5]);
    }

    #[test]
    fn duplicate_lines_are_rejected() {
        assert!(matches!(
            Vocabulary::parse("a\nb\na\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
