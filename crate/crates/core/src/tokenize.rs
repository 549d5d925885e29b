//! Text normalization, word-piece style tokenization and letter-trigram
//! hashing for the two encoder families.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::autodiff::Real;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
const CONTINUATION: &str = "##";

pub const DEFAULT_MAX_SEQ_LEN: usize = 16;

/// NFC-normalizes, lowercases, drops control characters and collapses runs
/// of whitespace to a single space.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.nfc().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if ch.is_control() {
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(ch);
    }
    out
}

pub fn words(text: &str) -> Vec<String> {
    normalize_text(text).split(' ').filter(|w| !w.is_empty()).map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_seq_len: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    max_seq_len: usize,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::from_tokens(r.tokens, r.max_seq_len)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            max_seq_len: v.max_seq_len,
        }
    }
}

/// Padded token ids plus attention mask; the real tokens form a prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.real_len()]
    }
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list. The reserved tokens
    /// are always placed at ids 0..4, whether or not they appear in `tokens`.
    pub fn from_tokens(tokens: Vec<String>, max_seq_len: usize) -> Result<Self> {
        if max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Vocabulary {
            tokens: all,
            index,
            max_seq_len,
        })
    }

    /// Tokens ranked by (frequency desc, token asc), keeping those seen at
    /// least `min_count` times; `max_size` counts the reserved ids too.
    pub fn build<I, S>(corpus: I, min_count: usize, max_size: usize, max_seq_len: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut lines = 0usize;
        for line in corpus {
            lines += 1;
            for w in words(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size.saturating_sub(RESERVED.len()));
        Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t).collect(), max_seq_len)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
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

    /// Same vocabulary with a different padded length.
    pub fn with_max_seq_len(&self, max_seq_len: usize) -> Result<Self> {
        if max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(Vocabulary {
            max_seq_len,
            ..self.clone()
        })
    }

    /// Greedy longest-match split of one word. Pieces after the first carry
    /// the `##` continuation prefix; a word that cannot be fully covered
    /// becomes a single UNK.
    fn word_pieces(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION);
                }
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    pub fn tokenize(&self, text: &str, add_special: bool) -> TokenSequence {
        let mut ids = Vec::new();
        for w in words(text) {
            self.word_pieces(&w, &mut ids);
        }
        let budget = if add_special {
            self.max_seq_len - 2
        } else {
            self.max_seq_len
        };
        ids.truncate(budget);
        if add_special {
            ids.insert(0, CLS);
            ids.push(SEP);
        }
        let real = ids.len();
        ids.resize(self.max_seq_len, PAD);
        let attention_mask = (0..self.max_seq_len).map(|i| i < real).collect();
        TokenSequence { ids, attention_mask }
    }

    /// Inverse of [`Vocabulary::tokenize`] for in-vocabulary text.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        let mut out = String::new();
        for &id in seq.real_ids() {
            if id == PAD || id == CLS || id == SEP {
                continue;
            }
            let tok = self.token(id).unwrap_or(RESERVED[UNK as usize]);
            if let Some(rest) = tok.strip_prefix(CONTINUATION) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }
}

/// Sparse count vector over hash buckets, sorted by bucket.
pub type SparseVector = Vec<(usize, Real)>;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

fn add_word_trigrams(word: &str, buckets: usize, counts: &mut BTreeMap<usize, Real>) {
    let padded: Vec<char> = std::iter::once('#').chain(word.chars()).chain(std::iter::once('#')).collect();
    let mut buf = String::new();
    for w in padded.windows(3) {
        buf.clear();
        buf.extend(w);
        let bucket = (fnv1a64(buf.as_bytes()) % buckets as u64) as usize;
        *counts.entry(bucket).or_default() += 1.0;
    }
}

/// Letter-trigram counts of the whole text: every word is wrapped as
/// `#word#` and each trigram is hashed into `buckets`.
pub fn trigram_hash(text: &str, buckets: usize) -> SparseVector {
    let buckets = buckets.max(1);
    let mut counts = BTreeMap::new();
    for w in words(text) {
        add_word_trigrams(&w, buckets, &mut counts);
    }
    counts.into_iter().collect()
}

/// Per-word trigram vectors, truncated to `max_words`.
pub fn word_trigrams(text: &str, buckets: usize, max_words: usize) -> Vec<SparseVector> {
    let buckets = buckets.max(1);
    words(text)
        .into_iter()
        .take(max_words)
        .map(|w| {
            let mut counts = BTreeMap::new();
            add_word_trigrams(&w, buckets, &mut counts);
            counts.into_iter().collect()
        })
        .collect()
}
