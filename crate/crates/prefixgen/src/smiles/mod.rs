//! SMILES tokenization, parsing, validation, and the model vocabulary.
//!
//! The token alphabet is fixed to what drug-like corpora need: organic
//! subset atoms (B, C, N, O, P, S, F, Cl, Br, I), aromatic lowercase
//! (b, c, n, o, p, s), bracket atoms as opaque single tokens, bond symbols,
//! branch parens, ring-closure digits 1-9 plus `%NN`, and the dot. No
//! canonicalization, no reaction SMILES, no stereo perception; chirality
//! marks inside brackets survive as text only.

mod graph;
mod vocab;

pub use graph::{
    parse, validate, validate_smiles, Atom, Bond, BondOrder, MolGraph, ParseError, ValidityIssue,
    ValidityReport,
};
pub use vocab::{build_vocab, Vocab, VocabError, BOS_ID, EOS_ID, PAD_ID};

pub const PAD_TEXT: &str = "<pad>";
pub const BOS_TEXT: &str = "<bos>";
pub const EOS_TEXT: &str = "<eos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Atom,
    BracketAtom,
    Bond,
    RingBond,
    TwoDigitRingBond,
    Branch,
    Dot,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
}

impl Token {
    fn new(kind: TokenKind, text: impl Into<String>) -> Token {
        Token { kind, text: text.into() }
    }

    pub fn pad() -> Token {
        Token::new(TokenKind::Special, PAD_TEXT)
    }

    pub fn bos() -> Token {
        Token::new(TokenKind::Special, BOS_TEXT)
    }

    pub fn eos() -> Token {
        Token::new(TokenKind::Special, EOS_TEXT)
    }

    pub fn is_special(&self) -> bool {
        self.kind == TokenKind::Special
    }
}

impl std::fmt::Display for Token {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

pub type TokenSeq = Vec<Token>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizeError {
    #[error("unterminated bracket atom starting at byte {position}")]
    UnterminatedBracket { position: usize },
    #[error("unknown character {ch:?} at byte {position}")]
    UnknownCharacter { ch: char, position: usize },
}

/// Longest-match scan: `[...]` is one token, Cl/Br are one token, `%NN` is
/// one token, everything else is a single character.
pub fn tokenize(smiles: &str) -> Result<TokenSeq, TokenizeError> {
    let bytes = smiles.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            '[' => {
                let close = bytes[i..]
                    .iter()
                    .position(|b| *b == b']')
                    .ok_or(TokenizeError::UnterminatedBracket { position: i })?;
                out.push(Token::new(TokenKind::BracketAtom, &smiles[i..i + close + 1]));
                i += close + 1;
            }
            'C' if bytes.get(i + 1) == Some(&b'l') => {
                out.push(Token::new(TokenKind::Atom, "Cl"));
                i += 2;
            }
            'B' if bytes.get(i + 1) == Some(&b'r') => {
                out.push(Token::new(TokenKind::Atom, "Br"));
                i += 2;
            }
            'B' | 'C' | 'N' | 'O' | 'P' | 'S' | 'F' | 'I' | 'b' | 'c' | 'n' | 'o' | 'p' | 's' => {
                out.push(Token::new(TokenKind::Atom, &smiles[i..i + 1]));
                i += 1;
            }
            '-' | '=' | '#' | '/' | '\\' | ':' => {
                out.push(Token::new(TokenKind::Bond, &smiles[i..i + 1]));
                i += 1;
            }
            '1'..='9' => {
                out.push(Token::new(TokenKind::RingBond, &smiles[i..i + 1]));
                i += 1;
            }
            '%' => {
                let valid = bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit())
                    && bytes.get(i + 2).is_some_and(|b| b.is_ascii_digit());
                if !valid {
                    return Err(TokenizeError::UnknownCharacter { ch: '%', position: i });
                }
                out.push(Token::new(TokenKind::TwoDigitRingBond, &smiles[i..i + 3]));
                i += 3;
            }
            '(' | ')' => {
                out.push(Token::new(TokenKind::Branch, &smiles[i..i + 1]));
                i += 1;
            }
            '.' => {
                out.push(Token::new(TokenKind::Dot, "."));
                i += 1;
            }
            _ => return Err(TokenizeError::UnknownCharacter { ch: c, position: i }),
        }
    }
    Ok(out)
}

/// Concatenates token texts; BOS/EOS/PAD are dropped.
pub fn detokenize(seq: &[Token]) -> String {
    seq.iter().filter(|t| !t.is_special()).map(|t| t.text.as_str()).collect()
}
