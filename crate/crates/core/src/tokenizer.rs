//! Byte-level text tokenizer with an optional table of BPE merges.
//!
//! Ids 0..256 are raw bytes; merge `i` produces id `256 + i`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextTokenizer {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), usize>,
}

impl TextTokenizer {
    pub fn bytes_only() -> Self {
        Self::default()
    }

    pub fn with_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut ranks = HashMap::new();
        for (i, &(a, b)) in merges.iter().enumerate() {
            let limit = 256 + i as u32;
            if a >= limit || b >= limit {
                return Err(Error::Format(format!("merge {i} ({a} {b}) references an undefined id")));
            }
            ranks.entry((a, b)).or_insert(i);
        }
        Ok(Self { merges, ranks })
    }

    /// Parses one `left right` id pair per line; blank lines and `#` comments are skipped.
    pub fn parse_merges(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<u32>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => merges.push((a, b)),
                _ => return Err(Error::Format(format!("merge file line {}: expected two ids", n + 1))),
            }
        }
        Self::with_merges(merges)
    }

    pub fn load_merges(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_merges(&std::fs::read_to_string(path)?)
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        256 + self.merges.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(u32::from).collect();
        loop {
            let best = ids.windows(2).filter_map(|w| self.ranks.get(&(w[0], w[1])).copied()).min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank];
            let new_id = 256 + rank as u32;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            self.expand(id, &mut bytes)?;
        }
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("decoded bytes are not UTF-8: {e}")))
    }

    fn expand(&self, id: u32, out: &mut Vec<u8>) -> Result<()> {
        if id < 256 {
            out.push(id as u8);
            return Ok(());
        }
        let &(a, b) = self.merges.get((id - 256) as usize).ok_or(Error::UnknownToken(id))?;
        self.expand(a, out)?;
        self.expand(b, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bytes_only_is_utf8_bytes() {
        let t = TextTokenizer::bytes_only();
        assert_eq!(t.encode("hi 你"), vec![104, 105, 32, 0xe4, 0xbd, 0xa0]);
        assert_eq!(t.vocab_size(), 256);
    }

    #[test]
    fn merges_apply_by_rank() {
        // "ab" -> 256, then "256 c" -> 257.
        let t = TextTokenizer::parse_merges("# demo\n97 98\n256 99\n").unwrap();
        assert_eq!(t.encode("abcab"), vec![257, 256]);
        assert_eq!(t.decode(&[257, 256]).unwrap(), "abcab");
        assert_eq!(t.vocab_size(), 258);
    }

    #[test]
    fn bad_merge_files() {
        assert!(TextTokenizer::parse_merges("1 2 3").is_err());
        assert!(TextTokenizer::parse_merges("300 1").is_err());
        assert!(matches!(TextTokenizer::bytes_only().decode(&[256]), Err(Error::UnknownToken(256))));
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(s in "\\PC{0,40}") {
            let t = TextTokenizer::parse_merges("101 32\n116 104\n257 101\n").unwrap();
            prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s);
        }
    }
}
