//! Character-level vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::raster::ALPHABET;
use crate::util::sha256_hex;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const ABSTAIN: usize = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<abstain>"];

pub const ABSTAIN_TEXT: &str = "ANSWER NOT PRESENT";

#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let symbols: Vec<char> = ALPHABET.chars().collect();
        let index = symbols.iter().enumerate().map(|(i, &c)| (c, i + SPECIALS.len())).collect();
        Self { symbols, index }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        SPECIALS.len() + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Result<usize> {
        self.index.get(&c).copied().ok_or(Error::UnknownSymbol(c))
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(SPECIALS.len()).and_then(|i| self.symbols.get(i)).copied()
    }

    pub fn can_encode(&self, text: &str) -> bool {
        text.chars().all(|c| self.index.contains_key(&c))
    }

    /// Digest of the symbol table, stored in checkpoints.
    pub fn hash(&self) -> String {
        let mut s = SPECIALS.join("\n");
        s.push('\n');
        s.extend(self.symbols.iter());
        sha256_hex(s.as_bytes())
    }

    /// `[BOS, c_1, …, c_n, EOS]` with at most `max_len` characters kept.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(text.len().min(max_len) + 2);
        out.push(BOS);
        for c in text.chars() {
            let id = self.id(c)?;
            if out.len() <= max_len {
                out.push(id);
            }
        }
        out.push(EOS);
        Ok(out)
    }

    /// Characters only, no BOS/EOS, truncated to `max_len`.
    pub fn encode_chars(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(text.len().min(max_len));
        for c in text.chars() {
            let id = self.id(c)?;
            if out.len() < max_len {
                out.push(id);
            }
        }
        Ok(out)
    }

    /// Reads symbols up to the first EOS. Any ABSTAIN before EOS makes the
    /// whole answer the abstention string.
    pub fn detokenize(&self, tokens: &[usize]) -> String {
        let mut out = String::new();
        for &t in tokens {
            match t {
                EOS => break,
                ABSTAIN => return ABSTAIN_TEXT.to_string(),
                PAD | BOS | SEP => {}
                _ => out.extend(self.symbol(t)),
            }
        }
        out
    }
}
