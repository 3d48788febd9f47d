use crate::error::{Error, Result};

/// Token ids over a character set.
///
/// Output distributions cover `EOS` plus every character. `BOS` and `PAD`
/// only ever appear as decoder inputs, so the input embedding table is two
/// rows larger than the output layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub const EOS: usize = 0;

    pub fn new(charset: &str) -> Result<Vocab> {
        let chars: Vec<char> = charset.chars().collect();
        if chars.is_empty() {
            return Err(Error::config("data.charset", "empty charset"));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::config("data.charset", format!("duplicate character {c:?}")));
            }
            if c.is_whitespace() || c.is_control() {
                return Err(Error::config("data.charset", format!("unsupported character {c:?}")));
            }
        }
        Ok(Vocab { chars })
    }

    pub fn charset(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn bos(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.chars.len() + 2
    }

    /// Size of every output distribution.
    pub fn output_size(&self) -> usize {
        self.chars.len() + 1
    }

    /// Rows of the input embedding tables.
    pub fn input_size(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn encode(&self, word: &str) -> Result<Vec<usize>> {
        word.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&x| x == c)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Input(format!("character {c:?} in {word:?} is not in the charset")))
            })
            .collect()
    }

    /// Maps content ids back to text, stopping at the first `EOS`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != Self::EOS)
            .filter_map(|&i| self.chars.get(i.wrapping_sub(1)).copied())
            .collect()
    }
}
