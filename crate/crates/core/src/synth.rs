//! Seeded synthetic topic corpora: each topic owns a disjoint set of
//! pseudo-words, and all topics share a handful of function words.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{DatasetItem, GroupedDataset, Role};

pub const FUNCTION_WORDS: [&str; 8] = ["the", "a", "of", "and", "to", "in", "is", "with"];

const ONSETS: [&str; 14] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTopicSpec {
    pub topics: usize,
    pub words_per_topic: usize,
    /// Texts per topic in the evaluation dataset.
    pub texts_per_topic: usize,
    /// Texts per topic in the separate pretraining corpus.
    pub corpus_texts_per_topic: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    /// Probability that a sentence position holds a topic word rather than a
    /// function word.
    pub content_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticTopicSpec {
    fn default() -> Self {
        Self {
            topics: 2,
            words_per_topic: 40,
            texts_per_topic: 100,
            corpus_texts_per_topic: 300,
            min_sentences: 2,
            max_sentences: 4,
            min_sentence_len: 5,
            max_sentence_len: 10,
            content_ratio: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticTopicSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(format!("synthetic spec: {msg}")));
        if self.topics == 0 || self.texts_per_topic == 0 || self.words_per_topic == 0 {
            return bad("topics, texts and words per topic must be >= 1");
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return bad("need 1 <= min_sentences <= max_sentences");
        }
        if self.min_sentence_len == 0 || self.min_sentence_len > self.max_sentence_len {
            return bad("need 1 <= min_sentence_len <= max_sentence_len");
        }
        if !(0.0..=1.0).contains(&self.content_ratio) {
            return bad("content_ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: GroupedDataset,
    pub corpus: Vec<String>,
    pub topic_words: Vec<Vec<String>>,
}

fn pseudo_word(rng: &mut impl Rng) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS.choose(rng).unwrap(),
                VOWELS.choose(rng).unwrap()
            )
        })
        .collect()
}

fn text(spec: &SyntheticTopicSpec, words: &[String], rng: &mut impl Rng) -> String {
    let sentences = rng.random_range(spec.min_sentences..=spec.max_sentences);
    (0..sentences)
        .map(|_| {
            let len = rng.random_range(spec.min_sentence_len..=spec.max_sentence_len);
            let body: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.random_bool(spec.content_ratio) {
                        words.choose(rng).unwrap().as_str()
                    } else {
                        FUNCTION_WORDS.choose(rng).unwrap()
                    }
                })
                .collect();
            format!("{}.", body.join(" "))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn generate(spec: &SyntheticTopicSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used: HashSet<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    let capacity = ONSETS.len() * VOWELS.len();
    if spec.topics * spec.words_per_topic + used.len() > capacity * capacity {
        return Err(Error::InvalidConfig(
            "synthetic spec: too many topic words".into(),
        ));
    }
    let topic_words: Vec<Vec<String>> = (0..spec.topics)
        .map(|_| {
            let mut words = Vec::with_capacity(spec.words_per_topic);
            while words.len() < spec.words_per_topic {
                let w = pseudo_word(&mut rng);
                if used.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        })
        .collect();

    let mut items = Vec::with_capacity(spec.topics * spec.texts_per_topic);
    for i in 0..spec.texts_per_topic {
        for (t, words) in topic_words.iter().enumerate() {
            items.push(DatasetItem {
                id: format!("t{t}-{i:04}"),
                group: format!("topic{t}"),
                role: Role::Both,
                text: Some(text(spec, words, &mut rng)),
            });
        }
    }
    let mut corpus = Vec::with_capacity(spec.topics * spec.corpus_texts_per_topic);
    for _ in 0..spec.corpus_texts_per_topic {
        for words in &topic_words {
            corpus.push(text(spec, words, &mut rng));
        }
    }
    Ok(SyntheticData {
        dataset: GroupedDataset::new(items)?,
        corpus,
        topic_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::count_triplets;

    #[test]
    fn default_shape() {
        let d = generate(&SyntheticTopicSpec::default()).unwrap();
        assert_eq!(d.dataset.len(), 200);
        assert_eq!(d.dataset.num_groups(), 2);
        assert_eq!(count_triplets(&d.dataset), 200 * 99 * 100);
        assert_eq!(d.corpus.len(), 600);
    }

    #[test]
    fn topics_are_disjoint_and_seeded() {
        let spec = SyntheticTopicSpec {
            seed: 3,
            ..SyntheticTopicSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let t0: HashSet<_> = a.topic_words[0].iter().collect();
        assert!(a.topic_words[1].iter().all(|w| !t0.contains(w)));
    }

    #[test]
    fn degenerate_spec() {
        let spec = SyntheticTopicSpec {
            topics: 0,
            ..SyntheticTopicSpec::default()
        };
        assert!(generate(&spec).is_err());
    }
}
