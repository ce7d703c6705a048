//! Token ids and the byte-level vocabulary.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Index into a model vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    /// Beginning-of-sequence marker in the byte vocabulary.
    pub const BOS: TokenId = TokenId(256);
    /// End-of-sequence marker in the byte vocabulary.
    pub const EOS: TokenId = TokenId(257);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Vocabulary description: size plus optional special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub bos: Option<TokenId>,
    pub eos: Option<TokenId>,
}

impl Vocab {
    /// 256 byte tokens plus BOS (256) and EOS (257).
    pub const BYTE_SIZE: usize = 258;

    pub fn bytes() -> Self {
        Vocab { size: Self::BYTE_SIZE, bos: Some(TokenId::BOS), eos: Some(TokenId::EOS) }
    }

    /// A vocabulary of `size` ordinary tokens with no specials.
    pub fn plain(size: usize) -> Self {
        Vocab { size, bos: None, eos: None }
    }

    pub fn contains(&self, t: TokenId) -> bool {
        t.index() < self.size
    }

    pub fn is_bos(&self, t: TokenId) -> bool {
        self.bos == Some(t)
    }
}

/// Encode text as `[BOS, bytes...]`.
pub fn encode_prompt(text: &str) -> Vec<TokenId> {
    std::iter::once(TokenId::BOS)
        .chain(text.bytes().map(|b| TokenId(b as u32)))
        .collect()
}

/// Decode byte tokens back to text, dropping specials. Invalid UTF-8 is replaced.
pub fn decode(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|t| t.0 < 256).map(|t| t.0 as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Printable rendering of a single token (specials shown as `<bos>` / `<eos>`).
pub fn token_text(t: TokenId) -> String {
    match t {
        TokenId::BOS => "<bos>".to_string(),
        TokenId::EOS => "<eos>".to_string(),
        TokenId(b) if b < 256 => {
            let byte = b as u8;
            if byte.is_ascii() {
                (byte as char).to_string()
            } else {
                format!("\\x{byte:02x}")
            }
        }
        TokenId(other) => format!("<{other}>"),
    }
}
