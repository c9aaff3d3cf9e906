//! Caption filtering and word-level tokenization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which words survive caption filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WordMode {
    KeepAll,
    #[default]
    ContentWords,
}

impl std::str::FromStr for WordMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "keep_all" => Ok(WordMode::KeepAll),
            "content_words" => Ok(WordMode::ContentWords),
            _ => Err(format!("expected keep_all or content_words, got `{s}`")),
        }
    }
}

impl std::fmt::Display for WordMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WordMode::KeepAll => "keep_all",
            WordMode::ContentWords => "content_words",
        })
    }
}

/// English function words removed in [`WordMode::ContentWords`]. Sorted for binary search.
pub const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "either",
    "every", "few", "for", "from", "further", "had", "has", "have", "having", "he", "her", "here",
    "hers", "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "may", "me", "might", "more", "most", "must", "my", "myself", "neither",
    "no", "nor", "not", "of", "off", "on", "once", "only", "or", "other", "our", "ours",
    "ourselves", "out", "over", "own", "same", "she", "should", "so", "some", "such", "than",
    "that", "the", "their", "theirs", "them", "themselves", "then", "there", "these", "they",
    "this", "those", "through", "to", "too", "under", "until", "up", "upon", "us", "very", "was",
    "we", "were", "what", "when", "where", "which", "while", "who", "whom", "whose", "why", "will",
    "with", "within", "without", "would", "you", "your", "yours", "yourself", "yourselves",
];

pub fn is_stop_word(w: &str) -> bool {
    STOP_WORDS.binary_search(&w).is_ok()
}

/// Lowercases and splits on whitespace and punctuation (apostrophes inside
/// words are kept), then optionally drops stop words. Duplicates pass through.
pub fn extract_words(caption: &str, mode: WordMode) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .filter(|w| mode == WordMode::KeepAll || !is_stop_word(w))
        .map(str::to_string)
        .collect()
}

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word-level vocabulary. Ids 0..4 are reserved for pad, start, eos and unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const START: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    const SPECIALS: [&'static str; 4] = [PAD_TOKEN, START_TOKEN, EOS_TOKEN, UNK_TOKEN];

    /// Builds from tokenized captions: the `max_size - 4` most frequent words,
    /// frequency ties broken alphabetically.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if max_size < Self::SPECIALS.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} cannot hold the 4 special tokens"
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for words in corpus {
            for w in words {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !Self::SPECIALS.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - Self::SPECIALS.len())
                .map(|(w, _)| w.to_string()),
        );
        Self::from_tokens(tokens)
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::SPECIALS.len()
            || tokens[..Self::SPECIALS.len()] != Self::SPECIALS.map(String::from)
        {
            return Err(Error::Input(
                "vocabulary must start with <pad>, <start>, <eos>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
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

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A padded token sequence ready for the text encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionTokens {
    pub ids: Vec<u32>,
    pub eos_index: usize,
}

impl CaptionTokens {
    pub fn context_length(&self) -> usize {
        self.ids.len()
    }
}

/// `[start] + words + [eos]`, truncating words so that eos always fits, then padding.
pub fn tokenize(words: &[String], vocab: &Vocab, context_length: usize) -> Result<CaptionTokens> {
    if context_length < 3 {
        return Err(Error::Config(format!(
            "context length {context_length} leaves no room for start, a word and eos"
        )));
    }
    let keep = words.len().min(context_length - 2);
    let mut ids = Vec::with_capacity(context_length);
    ids.push(Vocab::START);
    ids.extend(words[..keep].iter().map(|w| vocab.id(w)));
    let eos_index = ids.len();
    ids.push(Vocab::EOS);
    ids.resize(context_length, Vocab::PAD);
    Ok(CaptionTokens { ids, eos_index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &[&str]) -> Vec<String> {
        s.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn stop_words_sorted_and_sized() {
        assert!(STOP_WORDS.windows(2).all(|w| w[0] < w[1]));
        assert!((110..=140).contains(&STOP_WORDS.len()));
    }

    #[test]
    fn content_words_example() {
        assert_eq!(
            extract_words("A dog runs on the grass", WordMode::ContentWords),
            words(&["dog", "runs", "grass"])
        );
        assert_eq!(
            extract_words("A dog runs on the grass", WordMode::KeepAll),
            words(&["a", "dog", "runs", "on", "the", "grass"])
        );
        assert!(extract_words("The the a an", WordMode::ContentWords).is_empty());
        for mode in [WordMode::KeepAll, WordMode::ContentWords] {
            assert_eq!(extract_words("cat", mode), words(&["cat"]));
        }
        assert_eq!(
            extract_words("Cats, dogs; and the owner's dog!", WordMode::ContentWords),
            words(&["cats", "dogs", "owner's", "dog"])
        );
    }

    #[test]
    fn tokenize_examples() {
        let vocab = Vocab::build([words(&["dog"]).as_slice()], 16).unwrap();
        let t = tokenize(&[], &vocab, 77).unwrap();
        assert_eq!(t.eos_index, 1);
        assert_eq!(&t.ids[..3], &[Vocab::START, Vocab::EOS, Vocab::PAD]);
        assert_eq!(t.ids.len(), 77);

        let t = tokenize(&words(&["dog"]), &vocab, 77).unwrap();
        assert_eq!(&t.ids[..4], &[Vocab::START, vocab.id("dog"), Vocab::EOS, Vocab::PAD]);
        assert_eq!(t.eos_index, 2);

        let many: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let t = tokenize(&many, &vocab, 77).unwrap();
        assert_eq!(t.eos_index, 76);
        assert_eq!(t.ids.iter().filter(|&&i| i == Vocab::UNK).count(), 75);

        assert!(matches!(tokenize(&[], &vocab, 2), Err(Error::Config(_))));
    }

    #[test]
    fn vocab_caps_and_orders_by_frequency() {
        let corpus = [words(&["b", "a", "b", "c", "a", "b"])];
        let v = Vocab::build(corpus.iter().map(|w| w.as_slice()), 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(4), Some("b"));
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.id("c"), Vocab::UNK);
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
    }

    proptest! {
        #[test]
        fn content_words_is_subsequence(caption in "[A-Za-z ,.']{1,60}") {
            let all = extract_words(&caption, WordMode::KeepAll);
            let content = extract_words(&caption, WordMode::ContentWords);
            let mut it = all.iter();
            for w in &content {
                prop_assert!(it.any(|x| x == w));
            }
        }

        #[test]
        fn tokenize_injective_on_kept_prefix(
            a in proptest::collection::vec(0usize..6, 0..12),
            b in proptest::collection::vec(0usize..6, 0..12),
            ctx in 3usize..10,
        ) {
            let names = ["red", "green", "blue", "cat", "dog", "sky"];
            let vocab = Vocab::build([words(&names).as_slice()], 32).unwrap();
            let wa: Vec<String> = a.iter().map(|&i| names[i].to_string()).collect();
            let wb: Vec<String> = b.iter().map(|&i| names[i].to_string()).collect();
            let keep = ctx - 2;
            let ta = tokenize(&wa, &vocab, ctx).unwrap();
            let tb = tokenize(&wb, &vocab, ctx).unwrap();
            let same_prefix = wa[..wa.len().min(keep)] == wb[..wb.len().min(keep)];
            prop_assert_eq!(same_prefix, ta == tb);
            prop_assert!(ta.ids[ta.eos_index + 1..].iter().all(|&i| i == Vocab::PAD));
        }
    }
}
