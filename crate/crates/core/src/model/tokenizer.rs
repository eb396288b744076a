//! Byte-level tokenizer with four special tokens.

pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const SEP: usize = 259;
pub const VOCAB_SIZE: usize = 260;

/// Question tokens for the JTM encoder: UTF-8 bytes followed by `SEP`.
pub fn encode_question(text: &str) -> Vec<usize> {
    let mut ids: Vec<usize> = text.bytes().map(usize::from).collect();
    ids.push(SEP);
    ids
}

/// Answer tokens without markers; the decoder adds `BOS`/`EOS`.
pub fn encode_answer(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Inverse of [`encode_answer`]. Stops at the first `EOS` and skips any
/// other special token.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .take_while(|&&t| t != EOS)
        .filter_map(|&t| u8::try_from(t).ok())
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_ascii_and_utf8() {
        for s in ["yes", "left lung", "Größe"] {
            assert_eq!(decode(&encode_answer(s)), s);
        }
    }

    #[test]
    fn question_ends_with_separator() {
        assert_eq!(encode_question("a").last(), Some(&SEP));
    }

    #[test]
    fn decode_stops_at_eos() {
        assert_eq!(decode(&[104, 105, EOS, 120]), "hi");
    }
}
