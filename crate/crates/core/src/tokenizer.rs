//! Byte-level tokenizer with a handful of reserved control ids.
//!
//! Ids `0..256` are raw UTF-8 bytes; the specials sit directly above them.
//! Decoding is the exact inverse of encoding for any valid UTF-8 input.

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const SEP: TokenId = 258;
pub const DEMO_SEP: TokenId = 259;
pub const PAD: TokenId = 260;
/// Stands in for one feature frame; the model substitutes the projected frame.
pub const FRAME: TokenId = 261;

pub const VOCAB_SIZE: usize = 262;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    /// Drops special ids; invalid UTF-8 is replaced lossily.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn is_special(id: TokenId) -> bool {
        id >= 256
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }
}
