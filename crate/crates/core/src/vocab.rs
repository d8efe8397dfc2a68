//! Byte-level vocabulary with a handful of reserved control tokens.

use std::fmt;

/// One vocabulary entry: a raw byte (0..=255) or a special token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token(u16);

pub const VOCAB_SIZE: usize = 263;
/// Number of plain byte tokens (ids `0..256`).
pub const BYTE_TOKENS: usize = 256;

impl Token {
    pub const BOS: Token = Token(256);
    pub const SYS: Token = Token(257);
    pub const USER: Token = Token(258);
    pub const ASST: Token = Token(259);
    pub const YES: Token = Token(260);
    pub const NO: Token = Token(261);
    pub const PAD: Token = Token(262);

    pub const fn byte(b: u8) -> Token {
        Token(b as u16)
    }

    pub fn from_index(i: usize) -> Option<Token> {
        (i < VOCAB_SIZE).then_some(Token(i as u16))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_special(self) -> bool {
        self.0 > 255
    }

    pub fn as_byte(self) -> Option<u8> {
        (!self.is_special()).then_some(self.0 as u8)
    }

    pub fn name(self) -> Option<&'static str> {
        Some(match self {
            Token::BOS => "<|bos|>",
            Token::SYS => "<|system|>",
            Token::USER => "<|user|>",
            Token::ASST => "<|assistant|>",
            Token::YES => "<|yes|>",
            Token::NO => "<|no|>",
            Token::PAD => "<|pad|>",
            _ => return None,
        })
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.name(), self.as_byte()) {
            (Some(n), _) => f.write_str(n),
            (None, Some(b)) => write!(f, "{}", b.escape_ascii()),
            _ => unreachable!("token out of range"),
        }
    }
}

pub fn tokenize(text: &[u8]) -> Vec<Token> {
    text.iter().copied().map(Token::byte).collect()
}

/// Inverse of [`tokenize`]; special tokens are rendered as their names.
pub fn detokenize(tokens: &[Token]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        match (t.as_byte(), t.name()) {
            (Some(b), _) => out.push(b),
            (None, Some(name)) => out.extend_from_slice(name.as_bytes()),
            _ => unreachable!("token out of range"),
        }
    }
    out
}

/// `[BOS] ++ tokenize(text)`, the form every scored text takes.
pub fn with_bos(text: &[u8]) -> Vec<Token> {
    let mut v = Vec::with_capacity(text.len() + 1);
    v.push(Token::BOS);
    v.extend(tokenize(text));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bytes_map_to_themselves() {
        assert_eq!(tokenize(b"ab"), vec![Token::byte(97), Token::byte(98)]);
        assert!(tokenize(b"").is_empty());
    }

    #[test]
    fn answer_tokens_are_single_and_outside_byte_space() {
        assert!(Token::YES.is_special() && Token::NO.is_special());
        assert_ne!(Token::YES, Token::NO);
        assert_eq!(Token::PAD.index(), VOCAB_SIZE - 1);
        assert!(Token::from_index(VOCAB_SIZE).is_none());
    }

    #[test]
    fn specials_render_as_placeholders() {
        let s = detokenize(&[Token::BOS, Token::byte(b'x'), Token::YES]);
        assert_eq!(s, b"<|bos|>x<|yes|>");
    }

    proptest! {
        #[test]
        fn byte_strings_roundtrip(bytes in prop::collection::vec(any::<u8>(), 64)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes.clone());
            let ids = tokenize(&bytes);
            prop_assert_eq!(tokenize(&detokenize(&ids)), ids);
        }
    }
}
