//! Vocabularies: byte-level and word-table.
//!
//! Ids 0, 1 and 2 are reserved for padding, end-of-sequence and unknown
//! tokens in every vocabulary.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const PAD_ID: i32 = 0;
pub const EOS_ID: i32 = 1;
pub const UNK_ID: i32 = 2;
pub const NUM_SPECIAL: u32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum Vocabulary {
    /// Byte `b` maps to token `b + 3`.
    ByteLevel,
    /// Whitespace-separated words looked up in a table; line `n` of the
    /// table file is token `n + 3`.
    Table(TokenTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    path: PathBuf,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk_fallback: bool,
}

impl TokenTable {
    pub fn from_tokens(path: impl Into<PathBuf>, tokens: Vec<String>, unk_fallback: bool) -> Result<Self> {
        let path = path.into();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("{}: line {} is not a single token", path.display(), i + 1)));
            }
            if index.insert(t.clone(), i as u32 + NUM_SPECIAL).is_some() {
                return Err(Error::Config(format!("{}: duplicate token `{t}`", path.display())));
            }
        }
        Ok(Self { path, tokens, index, unk_fallback })
    }

    /// Read `file`; `recorded_path` is what [`Vocabulary::descriptor`] reports.
    pub fn load(file: &Path, recorded_path: impl Into<PathBuf>, unk_fallback: bool) -> Result<Self> {
        let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
        let tokens = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
        Self::from_tokens(recorded_path, tokens, unk_fallback)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn unk_fallback(&self) -> bool {
        self.unk_fallback
    }
}

impl Vocabulary {
    pub fn size(&self) -> u32 {
        match self {
            Vocabulary::ByteLevel => 256 + NUM_SPECIAL,
            Vocabulary::Table(t) => t.tokens.len() as u32 + NUM_SPECIAL,
        }
    }

    pub fn encode(&self, text: &[u8]) -> Result<Vec<i32>> {
        match self {
            Vocabulary::ByteLevel => Ok(text.iter().map(|&b| b as i32 + NUM_SPECIAL as i32).collect()),
            Vocabulary::Table(t) => {
                let s = std::str::from_utf8(text)
                    .map_err(|_| Error::UnknownToken(String::from_utf8_lossy(text).into_owned()))?;
                s.split_whitespace()
                    .map(|w| match t.index.get(w) {
                        Some(&id) => Ok(id as i32),
                        None if t.unk_fallback => Ok(UNK_ID),
                        None => Err(Error::UnknownToken(w.to_string())),
                    })
                    .collect()
            }
        }
    }

    /// Decode up to the first EOS. Padding is skipped; unknown tokens
    /// decode to nothing for byte-level and to `<unk>` for tables.
    pub fn decode(&self, ids: &[i64]) -> Result<Vec<u8>> {
        let size = self.size();
        let mut out = Vec::new();
        let mut words: Vec<&str> = Vec::new();
        for &id in ids {
            if id < 0 || id >= size as i64 {
                return Err(Error::InvalidTokenId { id, size });
            }
            match id as i32 {
                EOS_ID => break,
                PAD_ID => {}
                UNK_ID => match self {
                    Vocabulary::ByteLevel => out.extend_from_slice(b"<unk>"),
                    Vocabulary::Table(_) => words.push("<unk>"),
                },
                id => match self {
                    Vocabulary::ByteLevel => out.push((id - NUM_SPECIAL as i32) as u8),
                    Vocabulary::Table(t) => words.push(&t.tokens[(id as u32 - NUM_SPECIAL) as usize]),
                },
            }
        }
        if let Vocabulary::Table(_) = self {
            out = words.join(" ").into_bytes();
        }
        Ok(out)
    }

    /// Stable description folded into cache fingerprints.
    pub fn descriptor(&self) -> String {
        match self {
            Vocabulary::ByteLevel => "byte_level".to_string(),
            Vocabulary::Table(t) => {
                format!("table({};unk_fallback={})", t.path.display(), t.unk_fallback)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words() -> Vocabulary {
        let toks = ["the", "cat", "sat"].iter().map(|s| s.to_string()).collect();
        Vocabulary::Table(TokenTable::from_tokens("w.txt", toks, true).unwrap())
    }

    #[test]
    fn byte_level_examples() {
        let v = Vocabulary::ByteLevel;
        assert_eq!(v.encode(b"hi").unwrap(), vec![107, 108]);
        assert_eq!(v.encode(b"").unwrap(), Vec::<i32>::new());
        assert_eq!(v.decode(&[107, 108, 1]).unwrap(), b"hi");
        assert_eq!(v.decode(&[107, 1, 108]).unwrap(), b"h");
        assert_eq!(v.size(), 259);
    }

    #[test]
    fn byte_level_rejects_out_of_range_ids() {
        assert!(matches!(Vocabulary::ByteLevel.decode(&[259]), Err(Error::InvalidTokenId { id: 259, size: 259 })));
        assert!(Vocabulary::ByteLevel.decode(&[-1]).is_err());
    }

    #[test]
    fn table_encode_decode() {
        let v = words();
        assert_eq!(v.size(), 6);
        assert_eq!(v.encode(b"the cat  sat").unwrap(), vec![3, 4, 5]);
        assert_eq!(v.encode(b"the dog").unwrap(), vec![3, UNK_ID]);
        assert_eq!(v.decode(&[3, 2, 5, 1, 4]).unwrap(), b"the <unk> sat");
    }

    #[test]
    fn table_without_fallback_errors() {
        let toks = vec!["a".to_string()];
        let v = Vocabulary::Table(TokenTable::from_tokens("t", toks, false).unwrap());
        assert!(matches!(v.encode(b"a b"), Err(Error::UnknownToken(w)) if w == "b"));
    }

    #[test]
    fn table_rejects_duplicates() {
        let toks = vec!["a".to_string(), "a".to_string()];
        assert!(TokenTable::from_tokens("t", toks, true).is_err());
    }

    proptest! {
        #[test]
        fn byte_level_round_trip(s in proptest::collection::vec(any::<u8>(), 0..200)) {
            let v = Vocabulary::ByteLevel;
            let ids: Vec<i64> = v.encode(&s).unwrap().into_iter().map(i64::from).collect();
            prop_assert_eq!(ids.len(), s.len());
            prop_assert!(ids.iter().all(|&i| (0..259).contains(&i)));
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }
    }
}
