//! Closed word vocabulary mapping expressions to token ids.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::metrics::tokenize;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Reserved tokens followed by every distinct word of `texts`, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let mut all = vec![PAD.to_string(), UNK.to_string()];
        all.extend(words.into_iter().filter(|w| w != PAD && w != UNK));
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Token ids of an expression; unknown words map to the UNK id. An
    /// expression without any word encodes as a single UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text).iter().map(|w| self.id(w).unwrap_or(UNK_ID)).collect();
        if ids.is_empty() {
            vec![UNK_ID]
        } else {
            ids
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::build(["grasp the red box"]);
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id(UNK), Some(UNK_ID));
        let ids = v.encode("Grasp the green box");
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[2], UNK_ID);
        assert_eq!(ids[3], v.id("box").unwrap());
        assert_eq!(v.encode("   "), vec![UNK_ID]);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(["pick the blue mug", "locate the mug"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
