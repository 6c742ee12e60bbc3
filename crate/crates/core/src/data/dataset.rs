use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Tokenized source, context (possibly empty), and target.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExampleTriple {
    pub source: Vec<usize>,
    pub context: Vec<usize>,
    pub target: Vec<usize>,
}

impl ExampleTriple {
    pub fn new(source: Vec<usize>, context: Vec<usize>, target: Vec<usize>) -> Self {
        Self {
            source,
            context,
            target,
        }
    }

    pub fn has_context(&self) -> bool {
        !self.context.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let all = self.source.iter().chain(&self.context).chain(&self.target);
        if let Some(bad) = all.copied().find(|&id| id >= vocab_size) {
            return Err(Error::Vocab(format!(
                "token id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

/// Parses `S \t C \t T` lines; blank lines are skipped.
pub fn parse_dataset(text: &str, vocab: &Vocabulary) -> Result<Vec<ExampleTriple>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() && !line.contains('\t') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        out.push(ExampleTriple::new(
            vocab.encode(fields[0]),
            vocab.encode(fields[1]),
            vocab.encode(fields[2]),
        ));
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<ExampleTriple>> {
    parse_dataset(&std::fs::read_to_string(path)?, vocab)
}

pub fn format_dataset(examples: &[ExampleTriple], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&vocab.decode(&ex.source));
        out.push('\t');
        out.push_str(&vocab.decode(&ex.context));
        out.push('\t');
        out.push_str(&vocab.decode(&ex.target));
        out.push('\n');
    }
    out
}
