//! Lowercasing whitespace/punctuation tokenizer, sentence splitting and
//! sentence-bounded chunking.
//!
//! Every non-alphanumeric, non-whitespace character is a token of its own, so
//! `"A cat."` becomes `["a", "cat", "."]`. Nothing here is random.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_TOKEN: &str = "[PAD]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Special tokens in their fixed id order (0..5).
pub const SPECIAL_TOKENS: [&str; 5] = [PAD_TOKEN, MASK_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from an id-ordered token list. The first five
    /// entries must be the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s)
        {
            return Err(Error::InvalidConfig(
                "vocabulary must start with [PAD], [MASK], [UNK], [CLS], [SEP]".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate vocabulary token {tok:?}"
                )));
            }
        }
        Ok(Self {
            tokens,
            token_to_id,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }

    pub fn mask_id(&self) -> TokenId {
        1
    }

    pub fn unk_id(&self) -> TokenId {
        2
    }

    pub fn cls_id(&self) -> TokenId {
        3
    }

    pub fn sep_id(&self) -> TokenId {
        4
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for tok in &self.tokens {
            writeln!(out, "{tok}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

/// Lowercases and splits on whitespace and punctuation boundaries.
pub fn normalize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Keeps the `max_size - 5` most frequent tokens (ties broken
/// lexicographically) after the five special tokens.
pub fn build_vocab<S: AsRef<str>>(corpus_lines: &[S], max_size: usize) -> Result<Vocabulary> {
    if max_size < SPECIAL_TOKENS.len() + 1 {
        return Err(Error::InvalidConfig(format!(
            "vocabulary max_size must be at least 6, got {max_size}"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus_lines {
        for tok in normalize(line.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - SPECIAL_TOKENS.len());

    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    normalize(text)
        .iter()
        .map(|t| vocab.id(t).unwrap_or(vocab.unk_id()))
        .collect()
}

/// Splits after `.`, `!` or `?` when followed by whitespace or the end of
/// the text, and after every newline. Terminators stay with their sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = i + c.len_utf8();
        let boundary = match c {
            '\n' => true,
            '.' | '!' | '?' => chars.peek().is_none_or(|&(_, next)| next.is_whitespace()),
            _ => false,
        };
        if boundary {
            push_trimmed(&mut sentences, &text[start..end]);
            start = end;
        }
    }
    push_trimmed(&mut sentences, &text[start..]);
    sentences
}

fn push_trimmed(out: &mut Vec<String>, fragment: &str) {
    let s = fragment.trim();
    if !s.is_empty() {
        out.push(s.to_owned());
    }
}

/// A run of token ids fed to the model as one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub token_ids: Vec<TokenId>,
}

impl Chunk {
    pub fn new(token_ids: Vec<TokenId>) -> Self {
        Self { token_ids }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Greedily packs whole sentences into chunks of at most `max_len` tokens.
/// A sentence longer than `max_len` is cut into `max_len`-sized pieces, each
/// emitted as its own chunk.
pub fn chunk_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<Chunk> {
    assert!(max_len >= 1, "max_len must be positive");
    let mut chunks = Vec::new();
    let mut current: Vec<TokenId> = Vec::new();
    for sentence in split_sentences(text) {
        let ids = tokenize(&sentence, vocab);
        if ids.is_empty() {
            continue;
        }
        if current.len() + ids.len() <= max_len {
            current.extend(ids);
            continue;
        }
        if !current.is_empty() {
            chunks.push(Chunk::new(std::mem::take(&mut current)));
        }
        if ids.len() <= max_len {
            current = ids;
        } else {
            chunks.extend(ids.chunks(max_len).map(|p| Chunk::new(p.to_vec())));
        }
    }
    if !current.is_empty() {
        chunks.push(Chunk::new(current));
    }
    chunks
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cat_vocab() -> Vocabulary {
        build_vocab(&["A cat. A cat sat."], 10).unwrap()
    }

    #[test]
    fn build_vocab_counts_and_specials() {
        let v = cat_vocab();
        assert_eq!(v.size(), 9);
        for t in ["a", "cat", ".", "sat"] {
            assert!(v.id(t).is_some(), "{t} missing");
        }
        assert_eq!(v.id("[PAD]"), Some(0));
        assert_eq!(v.id("[SEP]"), Some(4));
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        assert!(matches!(build_vocab(&[""], 10), Err(Error::EmptyCorpus)));
        assert!(matches!(
            build_vocab::<&str>(&[], 10),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn build_vocab_breaks_ties_lexicographically() {
        let v = build_vocab(&["b a c"], 7).unwrap();
        assert_eq!(v.size(), 7);
        assert!(v.id("a").is_some() && v.id("b").is_some());
        assert!(v.id("c").is_none());
    }

    #[test]
    fn build_vocab_requires_room_for_one_token() {
        assert!(build_vocab(&["a"], 5).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = cat_vocab();
        let ids = tokenize("A cat.", &v);
        assert_eq!(
            ids,
            vec![v.id("a").unwrap(), v.id("cat").unwrap(), v.id(".").unwrap()]
        );
        assert_eq!(tokenize("zebra", &v), vec![v.unk_id()]);
        assert!(tokenize("", &v).is_empty());
    }

    #[test]
    fn split_sentences_examples() {
        assert_eq!(split_sentences("Hi. Bye!"), vec!["Hi.", "Bye!"]);
        assert_eq!(split_sentences("no terminator"), vec!["no terminator"]);
        assert_eq!(split_sentences("a.\n\nb."), vec!["a.", "b."]);
        assert_eq!(split_sentences("pi is 3.14 ok"), vec!["pi is 3.14 ok"]);
        assert!(split_sentences("  \n ").is_empty());
    }

    #[test]
    fn chunk_packs_greedily() {
        let v = build_vocab(&["x y ."], 10).unwrap();
        let chunks = chunk_text("x y. x y. x y.", &v, 6);
        let lens: Vec<_> = chunks.iter().map(Chunk::len).collect();
        assert_eq!(lens, vec![6, 3]);
    }

    #[test]
    fn chunk_hard_truncates_long_sentence() {
        let v = build_vocab(&["w"], 10).unwrap();
        let chunks = chunk_text("w w w w w w w w w w", &v, 4);
        let lens: Vec<_> = chunks.iter().map(Chunk::len).collect();
        assert_eq!(lens, vec![4, 4, 2]);
    }

    #[test]
    fn chunk_empty_text() {
        assert!(chunk_text("", &cat_vocab(), 8).is_empty());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = cat_vocab();
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\n[MASK]\n[UNK]\n[CLS]\n[SEP]\n"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn chunks_cover_tokenization(
            words in proptest::collection::vec("[a-d]{1,3}|[.!?,]|\n", 0..60),
            max_len in 1usize..12,
        ) {
            let text = words.join(" ");
            let v = build_vocab(&["a b c d . ! ? ,"], 20).unwrap();
            let chunks = chunk_text(&text, &v, max_len);
            let joined: Vec<TokenId> = chunks.iter().flat_map(|c| c.token_ids.clone()).collect();
            prop_assert_eq!(joined, tokenize(&text, &v));
            for c in &chunks {
                prop_assert!(!c.is_empty() && c.len() <= max_len);
            }
            prop_assert_eq!(chunk_text(&text, &v, max_len), chunks);
        }
    }
}
