use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

const RESERVED_SYMBOLS: [&str; RESERVED] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Reserved symbols followed by single characters in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphemeVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl GraphemeVocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let chars: Vec<char> = chars.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + RESERVED))
            .collect();
        Self { chars, index }
    }

    pub fn from_texts<'s>(texts: impl IntoIterator<Item = &'s str>) -> Self {
        Self::from_chars(texts.into_iter().flat_map(|t| t.chars()))
    }

    pub fn len(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn symbol(&self, idx: usize) -> Option<String> {
        if idx < RESERVED {
            Some(RESERVED_SYMBOLS[idx].to_string())
        } else {
            self.chars.get(idx - RESERVED).map(|c| c.to_string())
        }
    }

    pub fn symbols(&self) -> Vec<String> {
        (0..self.len()).filter_map(|i| self.symbol(i)).collect()
    }

    pub fn index_of(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.index_of(c)).collect()
    }

    /// Training target: characters followed by end-of-sequence.
    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        let mut v = self.encode(text);
        v.push(EOS);
        v
    }

    /// Text of `tokens`, stopping at the first end-of-sequence and skipping
    /// other reserved symbols.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t >= RESERVED)
            .filter_map(|&t| self.chars.get(t - RESERVED))
            .collect()
    }
}

impl Serialize for GraphemeVocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.symbols().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GraphemeVocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let syms = Vec::<String>::deserialize(d)?;
        if syms.len() < RESERVED || syms[..RESERVED] != RESERVED_SYMBOLS {
            return Err(D::Error::custom("vocabulary must start with the reserved symbols"));
        }
        let mut chars = Vec::new();
        for s in &syms[RESERVED..] {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(D::Error::custom(format!("symbol `{s}` is not one character"))),
            }
        }
        let v = Self::from_chars(chars.iter().copied());
        if v.chars != chars {
            return Err(D::Error::custom("vocabulary characters must be sorted and unique"));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_then_sorted() {
        let v = GraphemeVocab::from_texts(["cab", "b a"]);
        assert_eq!(v.symbols(), ["<pad>", "<sos>", "<eos>", "<unk>", " ", "a", "b", "c"]);
        assert_eq!(v.encode_target("ab"), vec![5, 6, EOS]);
        assert_eq!(v.index_of('z'), UNK);
        assert_eq!(v.decode(&[5, UNK, 6, EOS, 7]), "ab");
    }

    #[test]
    fn serde_roundtrip_is_symbol_list() {
        let v = GraphemeVocab::from_texts(["it's"]);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"["<pad>","<sos>","<eos>","<unk>","'","i","s","t"]"#);
        let back: GraphemeVocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<GraphemeVocab>(r#"["a"]"#).is_err());
    }
}
