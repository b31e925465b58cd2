//! Character-level tokenizer over a frozen 80-symbol vocabulary.
//!
//! Every character is one token except the anchor markers `<EXPR>` and
//! `</EXPR>`, which encode atomically. `<` and `>` are not vocabulary
//! characters, so anchor boundaries are unambiguous.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

pub const VOCAB_SIZE: usize = 80;
pub const MAX_LEN: usize = 100;
pub const PAD_ID: u16 = 0;

pub const EXPR_OPEN: &str = "<EXPR>";
pub const EXPR_CLOSE: &str = "</EXPR>";

const BUILTIN_VOCAB: &str = include_str!("../assets/vocab.tsv");

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    OutOfVocabulary { ch: char, offset: usize },
    #[error("text needs {tokens} tokens, more than the maximum of {MAX_LEN}")]
    TooLong { tokens: usize },
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u16),
    #[error("CLS token at index {0}; CLS is reserved for the model")]
    UnexpectedCls(usize),
    #[error("token sequence has {ids} ids and {mask} mask entries, expected {MAX_LEN}")]
    Length { ids: usize, mask: usize },
    #[error("vocab file line {line}: {msg}")]
    VocabFile { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    Pad,
    Cls,
    ExprOpen,
    ExprClose,
    Char(char),
}

impl Symbol {
    fn file_form(self) -> String {
        match self {
            Symbol::Pad => "[PAD]".into(),
            Symbol::Cls => "[CLS]".into(),
            Symbol::ExprOpen => EXPR_OPEN.into(),
            Symbol::ExprClose => EXPR_CLOSE.into(),
            Symbol::Char(' ') => "\\s".into(),
            Symbol::Char('\t') => "\\t".into(),
            Symbol::Char('\n') => "\\n".into(),
            Symbol::Char('\\') => "\\\\".into(),
            Symbol::Char(c) => c.to_string(),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "[PAD]" => Symbol::Pad,
            "[CLS]" => Symbol::Cls,
            EXPR_OPEN => Symbol::ExprOpen,
            EXPR_CLOSE => Symbol::ExprClose,
            "\\s" => Symbol::Char(' '),
            "\\t" => Symbol::Char('\t'),
            "\\n" => Symbol::Char('\n'),
            "\\\\" => Symbol::Char('\\'),
            _ => {
                let mut it = s.chars();
                let c = it.next()?;
                if it.next().is_some() || c == '\\' || c == '<' || c == '>' {
                    return None;
                }
                Symbol::Char(c)
            }
        })
    }
}

/// Bijective symbol/id table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<Symbol>,
    chars: HashMap<char, u16>,
    cls: u16,
    open: u16,
    close: u16,
}

/// Fixed-length encoded text. `mask[i]` is true for real tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u16>,
    pub mask: Vec<bool>,
    pub raw_len: usize,
}

impl Vocabulary {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_VOCAB).expect("bundled vocab is valid")
    }

    /// Parses `id<TAB>symbol` lines; `#` lines and blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, msg: String| TokenizerError::VocabFile { line, msg };
        let mut symbols = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, sym) = line
                .split_once('\t')
                .ok_or_else(|| err(n, "expected `id<TAB>symbol`".into()))?;
            let id: usize = id.parse().map_err(|e| err(n, format!("bad id `{id}`: {e}")))?;
            if id != symbols.len() {
                return Err(err(n, format!("id {id} out of order, expected {}", symbols.len())));
            }
            let sym = Symbol::parse(sym).ok_or_else(|| err(n, format!("bad symbol `{sym}`")))?;
            if symbols.contains(&sym) {
                return Err(err(n, format!("duplicate symbol `{}`", sym.file_form())));
            }
            symbols.push(sym);
        }
        if symbols.len() != VOCAB_SIZE {
            return Err(err(0, format!("vocabulary has {} symbols, expected {VOCAB_SIZE}", symbols.len())));
        }
        if symbols[PAD_ID as usize] != Symbol::Pad {
            return Err(err(0, "PAD must have id 0".into()));
        }
        let find = |s: Symbol| {
            symbols
                .iter()
                .position(|&x| x == s)
                .map(|i| i as u16)
                .ok_or_else(|| err(0, format!("missing `{}`", s.file_form())))
        };
        let (cls, open, close) = (find(Symbol::Cls)?, find(Symbol::ExprOpen)?, find(Symbol::ExprClose)?);
        let chars = symbols
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Symbol::Char(c) => Some((*c, i as u16)),
                _ => None,
            })
            .collect();
        Ok(Self {
            symbols,
            chars,
            cls,
            open,
            close,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# modadd character vocabulary v1: id<TAB>symbol (\\s = space)\n");
        for (i, s) in self.symbols.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\n", s.file_form()));
        }
        out
    }

    /// SHA-256 of the canonical file form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: u16) -> Option<Symbol> {
        self.symbols.get(id as usize).copied()
    }

    pub fn cls_id(&self) -> u16 {
        self.cls
    }

    pub fn contains_char(&self, c: char) -> bool {
        self.chars.contains_key(&c)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence, TokenizerError> {
        let mut ids = Vec::with_capacity(MAX_LEN);
        let mut rest = text;
        let mut offset = 0;
        while let Some(c) = rest.chars().next() {
            let (id, chars, bytes) = if rest.starts_with(EXPR_OPEN) {
                (self.open, EXPR_OPEN.len(), EXPR_OPEN.len())
            } else if rest.starts_with(EXPR_CLOSE) {
                (self.close, EXPR_CLOSE.len(), EXPR_CLOSE.len())
            } else {
                let id = *self
                    .chars
                    .get(&c)
                    .ok_or(TokenizerError::OutOfVocabulary { ch: c, offset })?;
                (id, 1, c.len_utf8())
            };
            ids.push(id);
            offset += chars;
            rest = &rest[bytes..];
        }
        if ids.len() > MAX_LEN {
            return Err(TokenizerError::TooLong { tokens: ids.len() });
        }
        let raw_len = ids.len();
        let mut mask = vec![true; raw_len];
        ids.resize(MAX_LEN, PAD_ID);
        mask.resize(MAX_LEN, false);
        Ok(TokenSequence { ids, mask, raw_len })
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for (i, &id) in seq.ids.iter().enumerate() {
            match self.symbol(id).ok_or(TokenizerError::UnknownId(id))? {
                Symbol::Pad => {}
                Symbol::Cls => return Err(TokenizerError::UnexpectedCls(i)),
                Symbol::ExprOpen => out.push_str(EXPR_OPEN),
                Symbol::ExprClose => out.push_str(EXPR_CLOSE),
                Symbol::Char(c) => out.push(c),
            }
        }
        Ok(out)
    }
}

impl TokenSequence {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        if self.ids.len() != MAX_LEN || self.mask.len() != MAX_LEN {
            return Err(TokenizerError::Length {
                ids: self.ids.len(),
                mask: self.mask.len(),
            });
        }
        Ok(())
    }
}
