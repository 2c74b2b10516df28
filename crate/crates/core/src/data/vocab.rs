use std::collections::HashMap;
use std::path::Path;

use super::{atomic_write, read_file};
use crate::error::{Error, Result};
use crate::tokens::{EOS, RESERVED, UNK};

/// Token list with ids assigned by position; ids 0..4 are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens followed by `words`.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::invalid(format!(
                    "vocabulary line {} must be `{r}` (reserved header <unk>, <pad>, <bos>, <eos>)",
                    i + 1
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("vocabulary line {}: token `{t}` is empty or has whitespace", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Space-joined words, stopping at EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&t| t != EOS)
            .map(|&t| self.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::invalid(format!("{}: vocabulary is not valid UTF-8", path.display())))?;
    let tokens = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
    Vocab::from_tokens(tokens).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut text = vocab.tokens.join("\n");
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn read_str(s: &str) -> Result<Vocab> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        fs::write(&p, s).unwrap();
        read_vocab(&p)
    }

    #[test]
    fn reserved_only_file() {
        let v = read_str("<unk>\n<pad>\n<bos>\n<eos>\n").unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn duplicate_is_named() {
        let err = read_str("<unk>\n<pad>\n<bos>\n<eos>\nregen\nregen\n").unwrap_err();
        assert!(err.to_string().contains("`regen`"), "{err}");
    }

    #[test]
    fn missing_header_rejected() {
        assert!(read_str("<pad>\n<unk>\n<bos>\n<eos>\n").is_err());
        assert!(read_str("").is_err());
    }

    #[test]
    fn phoenix_sized_vocab() {
        let words: Vec<String> = (0..2887).map(|i| format!("w{i}")).collect();
        let v = Vocab::from_words(words).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        write_vocab(&p, &v).unwrap();
        let back = read_vocab(&p).unwrap();
        assert_eq!(back.len(), 2891);
        assert_eq!(back, v);
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::from_words(["morgen", "regen"]).unwrap();
        assert_eq!(v.encode("regen morgen schnee"), vec![5, 4, UNK]);
        assert_eq!(v.decode(&[5, 4, EOS, 5]), "regen morgen");
    }
}
