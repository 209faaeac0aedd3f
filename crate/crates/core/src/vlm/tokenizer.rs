use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercase whitespace tokenizer over a fixed word list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Vocabulary = every word of `corpus` plus `extra`, sorted, after the
    /// `<pad>` and `<unk>` entries.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, extra: &[&str]) -> Self {
        let mut set = BTreeSet::new();
        for text in corpus {
            set.extend(split(text));
        }
        set.extend(extra.iter().map(|w| w.to_lowercase()));
        let words = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(set)
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    /// Token ids, truncated to `max_len`. Fails when nothing but unknown
    /// words remain.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        let ids: Vec<u32> = split(text)
            .take(max_len)
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK))
            .collect();
        if ids.iter().all(|&i| i == UNK) {
            let sample: Vec<&str> = self.words.iter().skip(2).take(12).map(|s| s.as_str()).collect();
            return Err(Error::Tokenizer(format!(
                "{text:?} has no known tokens; vocabulary has {} words, e.g. {}",
                self.words.len() - 2,
                sample.join(", ")
            )));
        }
        Ok(ids)
    }
}

fn split(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowercases_and_maps_unknowns() {
        let t = Tokenizer::build(["a red circle", "a blue star"], &["background"]);
        assert_eq!(t.encode("Red Circle", 8).unwrap(), t.encode("red circle", 8).unwrap());
        let ids = t.encode("a pink circle", 8).unwrap();
        assert_eq!(ids[1], UNK);
        assert!(t.encode("", 8).is_err());
        let err = t.encode("zebra", 8).unwrap_err().to_string();
        assert!(err.contains("vocabulary"), "{err}");
        assert!(t.encode("background", 8).is_ok());
        assert_eq!(t.encode("a a a a", 2).unwrap().len(), 2);
    }
}
