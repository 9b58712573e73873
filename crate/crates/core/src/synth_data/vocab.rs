//! Token vocabulary with fixed part-of-speech tags, keyword tagging and the
//! vocabulary sidecar format.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Noun,
    Adj,
    Verb,
    Rel,
    Func,
}

pub const MASK_WORD: &str = "[MASK]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub word: String,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary; the mask token is always id 0.
    pub fn new(words: impl IntoIterator<Item = (String, Pos)>) -> Result<Self> {
        let mut v = Self {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        v.push(MASK_WORD.to_string(), Pos::Func)?;
        for (w, p) in words {
            v.push(w, p)?;
        }
        Ok(v)
    }

    fn push(&mut self, word: String, pos: Pos) -> Result<()> {
        if self.index.contains_key(&word) {
            return Err(Error::InvalidArgument(format!("duplicate word `{word}`")));
        }
        self.index.insert(word.clone(), self.entries.len());
        self.entries.push(VocabEntry { word, pos });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mask_id(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown word `{word}`")))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|e| e.word.as_str())
    }

    pub fn pos(&self, id: usize) -> Option<Pos> {
        self.entries.get(id).map(|e| e.pos)
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.word.as_str())
    }

    pub fn pos_table(&self) -> HashMap<usize, Pos> {
        self.entries.iter().enumerate().map(|(i, e)| (i, e.pos)).collect()
    }

    /// Sidecar JSON: token id (as a string key) to `{"word", "pos"}`.
    pub fn to_sidecar(&self) -> serde_json::Value {
        let map: BTreeMap<String, &VocabEntry> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i.to_string(), e))
            .collect();
        serde_json::to_value(map).expect("vocabulary serializes")
    }

    pub fn from_sidecar(value: &serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, VocabEntry> = serde_json::from_value(value.clone())?;
        let mut by_id = BTreeMap::new();
        for (k, e) in map {
            let id: usize = k
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("vocabulary key `{k}` is not an id")))?;
            by_id.insert(id, e);
        }
        if by_id.keys().copied().ne(0..by_id.len()) {
            return Err(Error::InvalidArgument("vocabulary ids are not contiguous".into()));
        }
        let mut entries = by_id.into_values();
        match entries.next() {
            Some(first) if first.word == MASK_WORD => {}
            _ => return Err(Error::InvalidArgument("vocabulary id 0 must be the mask token".into())),
        }
        Self::new(entries.map(|e| (e.word, e.pos)))
    }
}

/// Positions of tokens whose part of speech is in `keyword_pos`.
pub fn tag_keywords(
    tokens: &[usize],
    pos_table: &HashMap<usize, Pos>,
    keyword_pos: &BTreeSet<Pos>,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        let pos = pos_table
            .get(t)
            .ok_or_else(|| Error::OutOfRange(format!("token id {t} has no part-of-speech tag")))?;
        if keyword_pos.contains(pos) {
            out.push(i);
        }
    }
    Ok(out)
}

pub fn default_keyword_pos() -> BTreeSet<Pos> {
    [Pos::Noun, Pos::Adj].into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(
            [
                ("the", Pos::Func),
                ("red", Pos::Adj),
                ("chair", Pos::Noun),
                ("near", Pos::Rel),
                ("table", Pos::Noun),
            ]
            .map(|(w, p)| (w.to_string(), p)),
        )
        .unwrap()
    }

    #[test]
    fn keyword_tagging() {
        let v = vocab();
        let toks = v.encode(&["the", "red", "chair", "near", "the", "table"]).unwrap();
        let table = v.pos_table();
        assert_eq!(tag_keywords(&toks, &table, &default_keyword_pos()).unwrap(), vec![1, 2, 5]);
        assert!(tag_keywords(&toks, &table, &BTreeSet::new()).unwrap().is_empty());
        let nouns: BTreeSet<Pos> = [Pos::Noun].into_iter().collect();
        assert_eq!(tag_keywords(&toks, &table, &nouns).unwrap(), vec![2, 5]);
        assert!(tag_keywords(&[99], &table, &nouns).is_err());
    }

    #[test]
    fn sidecar_roundtrip() {
        let v = vocab();
        let side = v.to_sidecar();
        assert_eq!(side["2"]["word"], "red");
        assert_eq!(side["2"]["pos"], "adj");
        assert_eq!(Vocabulary::from_sidecar(&side).unwrap(), v);
    }

    #[test]
    fn duplicate_words_rejected() {
        assert!(Vocabulary::new([("a".to_string(), Pos::Func), ("a".to_string(), Pos::Noun)]).is_err());
    }
}
