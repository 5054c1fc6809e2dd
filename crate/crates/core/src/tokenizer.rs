//! WordPiece-style subword tokenizer over a fixed vocabulary.
//!
//! Text is lowercased and split on whitespace, with every punctuation
//! character standing as its own word. Each word is split greedily into the
//! longest vocabulary prefix followed by `##`-prefixed continuation pieces;
//! a word that cannot be covered becomes a single `[UNK]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIALS: usize = SPECIALS.len();
/// `[CLS]` and `[SEP]` around every encoded sequence.
pub const RESERVED_SPECIALS_PER_SEQUENCE: usize = 2;
pub const CONTINUATION: &str = "##";
/// Longest merged piece considered when building a vocabulary, in characters.
pub const DEFAULT_MAX_PIECE_CHARS: usize = 16;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary size {size} is below the {required} specials and base characters")]
    SizeTooSmall { size: usize, required: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("encoded length {tokens} exceeds budget {max_tokens}")]
    BudgetExceeded { tokens: usize, max_tokens: usize },
    #[error("malformed vocabulary: {0}")]
    MalformedVocab(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Lowercases and splits into words; punctuation characters become words.
pub fn normalize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                current.extend(c.to_lowercase());
            } else {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus of descriptions.
    ///
    /// Layout: the five specials, every character seen (as a word-initial
    /// piece and as a `##` continuation), then merged substrings ranked by
    /// corpus frequency with lexicographic tie-break. Counting is
    /// independent of corpus order. If the corpus runs out of candidates
    /// before `size` is reached, the vocabulary is smaller than `size`.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        size: usize,
    ) -> Result<Self, TokenizerError> {
        Self::build_with(corpus, size, DEFAULT_MAX_PIECE_CHARS)
    }

    pub fn build_with<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        size: usize,
        max_piece_chars: usize,
    ) -> Result<Self, TokenizerError> {
        let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
        for text in corpus {
            for word in normalize(text) {
                *word_counts.entry(word).or_insert(0) += 1;
            }
        }
        let chars: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
        let required = NUM_SPECIALS + 2 * chars.len();
        if size < required {
            return Err(TokenizerError::SizeTooSmall { size, required });
        }

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        tokens.extend(chars.iter().map(|c| format!("{CONTINUATION}{c}")));

        let mut piece_counts: HashMap<String, u64> = HashMap::new();
        for (word, &count) in &word_counts {
            let cs: Vec<char> = word.chars().collect();
            for start in 0..cs.len() {
                let longest = (start + max_piece_chars).min(cs.len());
                for end in (start + 2)..=longest {
                    let piece: String = cs[start..end].iter().collect();
                    let token = if start == 0 {
                        piece
                    } else {
                        format!("{CONTINUATION}{piece}")
                    };
                    *piece_counts.entry(token).or_insert(0) += count;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = piece_counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = size - tokens.len();
        if ranked.len() < room {
            log::warn!(
                "corpus yields only {} merged pieces; vocabulary has {} tokens instead of {size}",
                ranked.len(),
                tokens.len() + ranked.len()
            );
        }
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        if tokens.len() < NUM_SPECIALS {
            return Err(TokenizerError::MalformedVocab("missing special tokens".into()));
        }
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens[i] != *special {
                return Err(TokenizerError::MalformedVocab(format!(
                    "line {i} must be {special}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::MalformedVocab(format!(
                    "token {i} is empty or contains whitespace"
                )));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::MalformedVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|e| TokenizerError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| TokenizerError::Io {
            path: path.display().to_string(),
            source: e,
        })
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

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Greedy longest-match split of one normalized word.
    fn split_word(&self, word: &str, out: &mut Vec<u32>) {
        let cs: Vec<char> = word.chars().collect();
        let mark = out.len();
        let mut start = 0;
        let mut piece = String::new();
        while start < cs.len() {
            let mut found = None;
            for end in (start + 1..=cs.len()).rev() {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.extend(&cs[start..end]);
                if let Some(&id) = self.index.get(piece.as_str()) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(UNK);
                    return;
                }
            }
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in normalize(text) {
            self.split_word(&word, &mut out);
        }
        out
    }

    /// `[CLS]`, every description's tokens in order, `[SEP]`, then padding.
    pub fn encode_sequence(
        &self,
        descriptions: &[&str],
        max_tokens: usize,
    ) -> Result<TokenizedSequence, TokenizerError> {
        let pieces: Vec<Vec<u32>> = descriptions.iter().map(|d| self.tokenize(d)).collect();
        TokenizedSequence::from_pieces(&pieces, max_tokens)
    }

    /// Inverse of [`Vocabulary::tokenize`] on `[UNK]`-free text.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id).ok_or(TokenizerError::UnknownId(id))?;
            if Self::is_special(id) {
                continue;
            }
            if let Some(rest) = token.strip_prefix(CONTINUATION) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
        Ok(out)
    }
}

/// A padded model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    /// Source description of each token; `None` for specials and padding.
    pub description_index: Vec<Option<usize>>,
    pub attention_mask: Vec<u8>,
}

impl TokenizedSequence {
    /// Assembles a sequence from per-description token ids.
    pub fn from_pieces(pieces: &[Vec<u32>], max_tokens: usize) -> Result<Self, TokenizerError> {
        let content: usize = pieces.iter().map(Vec::len).sum();
        let total = content + RESERVED_SPECIALS_PER_SEQUENCE;
        if total > max_tokens {
            return Err(TokenizerError::BudgetExceeded {
                tokens: total,
                max_tokens,
            });
        }
        let mut ids = Vec::with_capacity(max_tokens);
        let mut description_index = Vec::with_capacity(max_tokens);
        ids.push(CLS);
        description_index.push(None);
        for (i, piece) in pieces.iter().enumerate() {
            ids.extend_from_slice(piece);
            description_index.extend(std::iter::repeat_n(Some(i), piece.len()));
        }
        ids.push(SEP);
        description_index.push(None);
        let mut attention_mask = vec![1u8; ids.len()];
        ids.resize(max_tokens, PAD);
        description_index.resize(max_tokens, None);
        attention_mask.resize(max_tokens, 0);
        Ok(Self {
            ids,
            description_index,
            attention_mask,
        })
    }

    pub fn max_tokens(&self) -> usize {
        self.ids.len()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Copy without trailing padding; attention over it is identical.
    pub fn trimmed(&self) -> TokenizedSequence {
        let n = self.real_len();
        TokenizedSequence {
            ids: self.ids[..n].to_vec(),
            description_index: self.description_index[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
        }
    }
}
