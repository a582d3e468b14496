//! Text normalization and the byte-level tokenizer.
//!
//! Two normalizations are provided: [`normalize_structured`] keeps the text
//! byte-for-byte (newlines, tabs and runs of spaces included), while
//! [`normalize_baseline`] collapses every whitespace run into one space, which
//! is the flattening most code-model fine-tuning scripts apply.
//!
//! [`ByteTokenizer`] maps every byte to its own id after four special ids, so
//! encoding is total and decoding is exact. Anything implementing
//! [`Tokenizer`] (for example a wrapped subword tokenizer) can be used in its
//! place by the preprocessing code.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CslsError, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;

/// Number of special ids preceding the byte ids.
pub const NUM_SPECIAL: u32 = 4;

/// Default truncation length for whole-fragment encodings.
pub const DEFAULT_MAX_LEN: usize = 1024;

/// Common interface for the tokenizers the preprocessing stages accept.
///
/// `encode` returns content ids only; special tokens are added by
/// [`encode_text`] and the line aligner.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> Result<Vec<u8>>;
    fn vocab_size(&self) -> usize;

    fn pad_id(&self) -> u32 {
        PAD
    }

    fn cls_id(&self) -> u32 {
        CLS
    }

    fn is_special(&self, id: u32) -> bool {
        id < NUM_SPECIAL
    }

    /// Number of content tokens in `text`, specials excluded.
    fn token_count(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = 256 + NUM_SPECIAL as usize;

    #[inline]
    pub fn byte_id(b: u8) -> u32 {
        b as u32 + NUM_SPECIAL
    }
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(Self::byte_id).collect()
    }

    fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= Self::VOCAB_SIZE {
                return Err(CslsError::TokenOutOfRange {
                    id,
                    vocab_size: Self::VOCAB_SIZE,
                });
            }
            if id >= NUM_SPECIAL {
                out.push((id - NUM_SPECIAL) as u8);
            }
        }
        Ok(out)
    }

    fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    fn token_count(&self, text: &str) -> usize {
        text.len()
    }
}

/// Serializable description of the byte vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub specials: Vec<(String, u32)>,
    /// `(byte, id)` pairs for all 256 byte values.
    pub bytes: Vec<(u8, u32)>,
    pub size: usize,
}

impl Vocab {
    pub fn byte_level() -> Self {
        Self {
            specials: vec![
                ("[PAD]".into(), PAD),
                ("[CLS]".into(), CLS),
                ("[SEP]".into(), SEP),
                ("[UNK]".into(), UNK),
            ],
            bytes: (0..=255u8)
                .map(|b| (b, ByteTokenizer::byte_id(b)))
                .collect(),
            size: ByteTokenizer::VOCAB_SIZE,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Collapse every maximal whitespace run to a single space and trim the ends.
pub fn normalize_baseline(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    for word in code
        .split(|c: char| c.is_ascii_whitespace())
        .filter(|w| !w.is_empty())
    {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Identity: the structure-preserving path keeps the text untouched.
pub fn normalize_structured(code: &str) -> String {
    code.to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    #[default]
    Structured,
    Baseline,
}

impl NormalizeMode {
    pub fn apply(self, code: &str) -> String {
        match self {
            NormalizeMode::Structured => normalize_structured(code),
            NormalizeMode::Baseline => normalize_baseline(code),
        }
    }
}

/// A fixed-length encoding: `[CLS]` followed by content ids, padded with `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub truncated: bool,
}

impl TokenSeq {
    /// Number of real (unmasked) positions, CLS included.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Encode `text` as `[CLS] ++ ids`, head-truncated and padded to `max_len`.
pub fn encode_text<T: Tokenizer + ?Sized>(tok: &T, text: &str, max_len: usize) -> Result<TokenSeq> {
    if max_len < 2 {
        return Err(CslsError::InvalidArgument(format!(
            "max_len must be at least 2, got {max_len}"
        )));
    }
    Ok(encode_ids(tok, tok.encode(text), max_len))
}

pub(crate) fn encode_ids<T: Tokenizer + ?Sized>(
    tok: &T,
    content: Vec<u32>,
    max_len: usize,
) -> TokenSeq {
    let room = max_len - 1;
    let truncated = content.len() > room;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(tok.cls_id());
    ids.extend(content.into_iter().take(room));
    let real = ids.len();
    ids.resize(max_len, tok.pad_id());
    let mut mask = vec![1u8; real];
    mask.resize(max_len, 0);
    TokenSeq {
        ids,
        mask,
        truncated,
    }
}

/// Decode the content portion of `seq` (specials and padding contribute nothing).
pub fn decode<T: Tokenizer + ?Sized>(tok: &T, seq: &TokenSeq) -> Result<Vec<u8>> {
    let real: Vec<u32> = seq
        .ids
        .iter()
        .zip(&seq.mask)
        .filter(|(_, &m)| m == 1)
        .map(|(&id, _)| id)
        .collect();
    tok.decode(&real)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(b: u8) -> u32 {
        b as u32 + 4
    }

    #[test]
    fn baseline_collapses_whitespace() {
        assert_eq!(normalize_baseline("a  b\n\tc"), "a b c");
        assert_eq!(normalize_baseline("x"), "x");
        assert_eq!(normalize_baseline("\n\n"), "");
        assert_eq!(normalize_baseline("  lead\r\ntrail  "), "lead trail");
    }

    #[test]
    fn structured_is_identity() {
        for s in ["a  b\n\tc", "", "if (x)\n  y();"] {
            assert_eq!(normalize_structured(s), s);
        }
    }

    #[test]
    fn encode_pads_and_masks() {
        let seq = encode_text(&ByteTokenizer, "ab", 5).unwrap();
        assert_eq!(seq.ids, vec![CLS, id(b'a'), id(b'b'), PAD, PAD]);
        assert_eq!(seq.mask, vec![1, 1, 1, 0, 0]);
        assert!(!seq.truncated);
    }

    #[test]
    fn encode_truncates_head_keep() {
        let seq = encode_text(&ByteTokenizer, "abcd", 3).unwrap();
        assert_eq!(seq.ids, vec![CLS, id(b'a'), id(b'b')]);
        assert!(seq.truncated);
        assert_eq!(decode(&ByteTokenizer, &seq).unwrap(), b"ab");
    }

    #[test]
    fn encode_empty_is_cls_then_pad() {
        let seq = encode_text(&ByteTokenizer, "", 4).unwrap();
        assert_eq!(seq.ids, vec![CLS, PAD, PAD, PAD]);
        assert_eq!(seq.mask, vec![1, 0, 0, 0]);
        assert!(decode(&ByteTokenizer, &seq).unwrap().is_empty());
    }

    #[test]
    fn encode_rejects_tiny_max_len() {
        assert!(matches!(
            encode_text(&ByteTokenizer, "a", 1),
            Err(CslsError::InvalidArgument(_))
        ));
    }

    #[test]
    fn round_trip_and_out_of_vocab() {
        let seq = encode_text(&ByteTokenizer, "int x;", 64).unwrap();
        assert_eq!(decode(&ByteTokenizer, &seq).unwrap(), b"int x;");
        assert!(matches!(
            ByteTokenizer.decode(&[260]),
            Err(CslsError::TokenOutOfRange { id: 260, .. })
        ));
    }

    #[test]
    fn vocab_is_a_bijection() {
        let v = Vocab::byte_level();
        assert_eq!(v.size, 260);
        let mut ids: Vec<u32> = v.bytes.iter().map(|&(_, i)| i).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 256);
        assert_eq!(ids[0], 4);
        assert_eq!(ids[255], 259);
        assert!(v.specials.iter().all(|(_, i)| *i < 4));
    }

    #[test]
    fn vocab_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        Vocab::byte_level().save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), Vocab::byte_level());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn baseline_is_idempotent(s in "[ a-z\t\n\r(){};=]{0,80}") {
                let once = normalize_baseline(&s);
                prop_assert_eq!(normalize_baseline(&once), once.clone());
            }

            #[test]
            fn structured_never_has_fewer_tokens(s in "[ a-z\t\n\r(){};=]{0,80}") {
                let t = ByteTokenizer;
                prop_assert!(t.token_count(&normalize_structured(&s)) >= t.token_count(&normalize_baseline(&s)));
            }

            #[test]
            fn truncated_decode_is_prefix(s in "[ -~\n\t]{0,60}", max_len in 2usize..40) {
                let seq = encode_text(&ByteTokenizer, &s, max_len).unwrap();
                let back = decode(&ByteTokenizer, &seq).unwrap();
                prop_assert!(s.as_bytes().starts_with(&back));
                prop_assert_eq!(seq.truncated, s.len() > max_len - 1);
                prop_assert_eq!(seq.ids[0], CLS);
                for (i, m) in seq.ids.iter().zip(&seq.mask) {
                    prop_assert_eq!(*m == 0, *i == PAD);
                }
            }
        }
    }
}
