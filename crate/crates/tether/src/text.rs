//! Deterministic tokenization, vocabulary, and token embeddings shared by the
//! detector, resolver, and rewriter models.
//!
//! Word-level tokens with punctuation isolated; no subwords. Whole-token
//! units keep the copy mechanism and rule matchers simple.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

/// Reserved vocabulary slots. Ids are fixed at 0..=6.
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SEP: usize = 4;
pub const USR: usize = 5;
pub const AGT: usize = 6;

pub const RESERVED: [&str; 7] = ["<pad>", "<unk>", "<s>", "</s>", "<sep>", "<usr>", "<agt>"];

/// Lowercase, compatibility-fold, isolate punctuation, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    let mut out = String::with_capacity(folded.len() + 8);
    for ch in folded.chars() {
        if ch.is_whitespace() {
            out.push(' ');
        } else if is_punct(ch) {
            out.push(' ');
            out.push(ch);
            out.push(' ');
        } else {
            out.push(ch);
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_punct(ch: char) -> bool {
    ch.is_ascii_punctuation()
        || matches!(ch, '\u{2018}'..='\u{201F}' | '\u{2026}' | '\u{00A1}' | '\u{00BF}')
}

/// Whitespace split of already-normalized text.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Normalize then tokenize.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    tokenize(&normalize(text))
}

/// Inverse of [`tokenize`] up to single spaces.
pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

// ============================================================================
// Vocabulary
// ============================================================================

/// Token-to-id map with fixed reserved ids. Bijective on non-reserved tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build from an iterator of token streams, keeping tokens that occur at
    /// least `min_freq` times. The result is independent of corpus order:
    /// surviving tokens are assigned ids in lexicographic order after the
    /// reserved block.
    pub fn build<'a, I>(corpus: I, min_freq: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tokens in corpus {
            for t in tokens {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(t, n)| *n >= min_freq && !RESERVED.contains(t))
                .map(|(t, _)| t.to_string()),
        );
        Self::from_tokens(tokens)
    }

    /// Reconstruct from an ordered token list (the serialized form). The
    /// first seven entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        assert!(
            tokens.len() >= RESERVED.len() && tokens[..RESERVED.len()] == RESERVED.map(String::from),
            "vocabulary must start with the reserved token block"
        );
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved block is always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One line per token, reserved block first.
    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(lines: &str) -> Vocabulary {
        Self::from_tokens(lines.lines().map(str::to_string).collect())
    }

    /// Content hash used to bind checkpoints to the vocabulary they were
    /// trained with.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_lines().as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}

// ============================================================================
// Embeddings
// ============================================================================

/// Dense row-major embedding matrix, one row per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> EmbeddingTable {
        EmbeddingTable { rows, dim, weights: vec![0.0; rows * dim] }
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.weights[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.weights[id * self.dim..(id + 1) * self.dim]
    }

    /// One vector per id, in order.
    pub fn embed(&self, ids: &[usize]) -> Vec<Vec<f64>> {
        ids.iter().map(|&id| self.row(id).to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_casefolds_and_splits_punctuation() {
        assert_eq!(normalize("Call Customer Support!"), "call customer support !");
        assert_eq!(normalize("What about United States?"), "what about united states ?");
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn normalize_collapses_whitespace_and_folds_compatibility_forms() {
        assert_eq!(normalize("a\t b\n c"), "a b c");
        // ﬁ ligature folds to "fi" under NFKC
        assert_eq!(normalize("oﬃce"), "office");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            normalize_tokens("how big is this house"),
            vec!["how", "big", "is", "this", "house"]
        );
        assert_eq!(normalize_tokens("Call the second one").len(), 4);
        assert_eq!(normalize_tokens("hi"), vec!["hi"]);
    }

    #[test]
    fn detokenize_round_trips_up_to_single_spaces() {
        let t = "call the second one";
        assert_eq!(detokenize(&tokenize(t)), t);
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn vocabulary_build_applies_frequency_threshold() {
        let a = toks("call the shop the shop");
        let b = toks("call me");
        let v = Vocabulary::build([a.as_slice(), b.as_slice()], 2);
        assert!(v.contains("call"));
        assert!(v.contains("the"));
        assert!(v.contains("shop"));
        assert!(!v.contains("me"));
        assert_eq!(v.id("me"), UNK);
    }

    #[test]
    fn vocabulary_build_is_order_insensitive() {
        let a = toks("alpha beta alpha");
        let b = toks("beta gamma gamma");
        let v1 = Vocabulary::build([a.as_slice(), b.as_slice()], 2);
        let v2 = Vocabulary::build([b.as_slice(), a.as_slice()], 2);
        assert_eq!(v1, v2);
        assert_eq!(v1.hash(), v2.hash());
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build([], 1);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.id("<sep>"), SEP);
        assert_eq!(v.id("<usr>"), USR);
        assert_eq!(v.id("<agt>"), AGT);
    }

    #[test]
    fn encode_maps_oov_to_unk_and_embed_returns_rows() {
        let a = toks("play music play music");
        let v = Vocabulary::build([a.as_slice()], 2);
        let ids = v.encode(&toks("play jazz"));
        assert_eq!(ids[0], v.id("play"));
        assert_eq!(ids[1], UNK);

        let mut table = EmbeddingTable::zeros(v.len(), 4);
        table.row_mut(PAD).copy_from_slice(&[0.0; 4]);
        let vecs = table.embed(&[PAD]);
        assert_eq!(vecs[0], table.row(PAD));
    }

    #[test]
    fn vocabulary_lines_round_trip() {
        let a = toks("x y x y");
        let v = Vocabulary::build([a.as_slice()], 2);
        let back = Vocabulary::from_lines(&v.to_lines());
        assert_eq!(v, back);
    }
}
