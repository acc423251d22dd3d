//! Token vocabulary for the language model.
//!
//! Ids are dense `0..V-1` with PAD=0, BOS=1, EOS=2 pinned, then every
//! distinct corpus token text in lexicographic order. Building from equal
//! corpora therefore always yields an identical mapping, which checkpoint
//! round-trips rely on.

use std::collections::BTreeMap;

use super::{tokenize, Token, TokenSeq, BOS_TEXT, EOS_TEXT, PAD_TEXT};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token {text:?} is not in the vocabulary")]
    OutOfVocabToken { text: String },
    #[error("id {id} is out of the vocabulary range {size}")]
    OutOfVocabId { id: usize, size: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Token>,
    id_of: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Result<&Token, VocabError> {
        self.tokens.get(id).ok_or(VocabError::OutOfVocabId { id, size: self.tokens.len() })
    }

    pub fn id(&self, text: &str) -> Result<usize, VocabError> {
        self.id_of
            .get(text)
            .copied()
            .ok_or_else(|| VocabError::OutOfVocabToken { text: text.to_string() })
    }

    pub fn encode(&self, seq: &[Token]) -> Result<Vec<usize>, VocabError> {
        seq.iter().map(|t| self.id(&t.text)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<TokenSeq, VocabError> {
        ids.iter().map(|id| self.token(*id).cloned()).collect()
    }

    /// Token texts in id order, the serialized form used by checkpoints.
    pub fn texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    /// Rebuilds a vocabulary from serialized id-ordered texts.
    pub fn from_texts(texts: &[String]) -> Result<Vocab, VocabError> {
        if texts.len() < 3
            || texts[PAD_ID] != PAD_TEXT
            || texts[BOS_ID] != BOS_TEXT
            || texts[EOS_ID] != EOS_TEXT
        {
            return Err(VocabError::EmptyCorpus);
        }
        let mut tokens = vec![Token::pad(), Token::bos(), Token::eos()];
        for text in &texts[3..] {
            tokens.push(single_token(text)?);
        }
        Ok(index(tokens))
    }
}

pub fn build_vocab<I>(corpus: I) -> Result<Vocab, VocabError>
where
    I: IntoIterator,
    I::Item: AsRef<[Token]>,
{
    let mut seen: BTreeMap<String, Token> = BTreeMap::new();
    let mut any = false;
    for seq in corpus {
        any = true;
        for t in seq.as_ref() {
            if !t.is_special() {
                seen.entry(t.text.clone()).or_insert_with(|| t.clone());
            }
        }
    }
    if !any {
        return Err(VocabError::EmptyCorpus);
    }
    let mut tokens = vec![Token::pad(), Token::bos(), Token::eos()];
    tokens.extend(seen.into_values());
    Ok(index(tokens))
}

fn index(tokens: Vec<Token>) -> Vocab {
    let id_of = tokens.iter().enumerate().map(|(i, t)| (t.text.clone(), i)).collect();
    Vocab { tokens, id_of }
}

// Serialized entries carry only text; re-tokenizing recovers the kind.
fn single_token(text: &str) -> Result<Token, VocabError> {
    let seq =
        tokenize(text).map_err(|_| VocabError::OutOfVocabToken { text: text.to_string() })?;
    match <[Token; 1]>::try_from(seq) {
        Ok([t]) => Ok(t),
        Err(_) => Err(VocabError::OutOfVocabToken { text: text.to_string() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_occupy_fixed_ids_then_lexicographic() {
        let corpus = vec![tokenize("C").unwrap(), tokenize("O").unwrap()];
        let v = build_vocab(&corpus).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id(PAD_TEXT).unwrap(), 0);
        assert_eq!(v.id(BOS_TEXT).unwrap(), 1);
        assert_eq!(v.id(EOS_TEXT).unwrap(), 2);
        assert_eq!(v.id("C").unwrap(), 3);
        assert_eq!(v.id("O").unwrap(), 4);
    }

    #[test]
    fn duplicate_tokens_count_once() {
        let corpus = vec![tokenize("CC").unwrap()];
        let v = build_vocab(&corpus).unwrap();
        assert_eq!(v.size(), 4);
    }

    #[test]
    fn identical_corpora_build_identical_vocabs() {
        let corpus = ["c1ccccc1", "CC(=O)O", "C[NH3+]"];
        let a = build_vocab(corpus.iter().map(|s| tokenize(s).unwrap())).unwrap();
        let b = build_vocab(corpus.iter().map(|s| tokenize(s).unwrap())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let corpus: Vec<TokenSeq> = Vec::new();
        assert_eq!(build_vocab(&corpus), Err(VocabError::EmptyCorpus));
    }

    #[test]
    fn encode_decode_round_trip() {
        let seq = tokenize("CCO").unwrap();
        let v = build_vocab(std::slice::from_ref(&seq)).unwrap();
        let ids = v.encode(&seq).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), seq);
    }

    #[test]
    fn unknown_token_is_rejected() {
        let v = build_vocab(vec![tokenize("CC").unwrap()]).unwrap();
        let foreign = tokenize("N").unwrap();
        assert_eq!(
            v.encode(&foreign),
            Err(VocabError::OutOfVocabToken { text: "N".into() })
        );
        assert!(matches!(v.decode(&[99]), Err(VocabError::OutOfVocabId { id: 99, size: 4 })));
    }

    #[test]
    fn decode_by_explicit_ids() {
        let v = build_vocab(vec![tokenize("C").unwrap(), tokenize("O").unwrap()]).unwrap();
        let seq = v.decode(&[3, 3]).unwrap();
        assert_eq!(super::super::detokenize(&seq), "CC");
    }

    #[test]
    fn serialization_round_trip() {
        let v = build_vocab(vec![tokenize("C[NH3+]c1ccccc1%11").unwrap()]).unwrap();
        let texts = v.texts();
        let back = Vocab::from_texts(&texts).unwrap();
        assert_eq!(v, back);
    }
}
