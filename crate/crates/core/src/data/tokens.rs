//! Plain-text token files: a vocabulary with one token per line (id = line
//! index) and a sequences file with one space-separated id list per line.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary token {t:?} on line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits on whitespace and maps every word; unknown words are an error.
    pub fn encode(&self, sentence: &str) -> Result<Vec<u32>> {
        sentence
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Data(format!("token {w:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn write_vocab_file(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut text = String::new();
    for t in &vocab.tokens {
        text.push_str(t);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_vocab_file(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Vocab::new(text.lines().map(str::to_owned).collect())
}

pub fn format_sequences(seqs: &[Vec<u32>]) -> String {
    let mut text = String::new();
    for s in seqs {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    text
}

pub fn parse_sequences(text: &str, vocab_size: Option<usize>) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|tok| {
                    let id: u32 = tok
                        .parse()
                        .map_err(|_| Error::Data(format!("line {}: bad id {tok:?}", n + 1)))?;
                    if let Some(v) = vocab_size {
                        if id as usize >= v {
                            return Err(Error::Data(format!(
                                "line {}: id {id} out of range for vocabulary of {v}",
                                n + 1
                            )));
                        }
                    }
                    Ok(id)
                })
                .collect()
        })
        .collect()
}

pub fn write_sequences_file(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    fs::write(path, format_sequences(seqs)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_sequences_file(path: &Path, vocab_size: Option<usize>) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_sequences(&text, vocab_size)
}
