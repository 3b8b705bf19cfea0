//! Byte-level tokenizer: token id `b` is the byte `b`.

pub const BYTE_VOCAB: usize = 256;

pub fn encode(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Tokens outside the byte range are dropped.
pub fn decode(tokens: &[usize]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

pub fn decode_lossy(tokens: &[usize]) -> String {
    String::from_utf8_lossy(&decode(tokens)).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ascii_bytes() {
        assert_eq!(encode(b"ab"), vec![97, 98]);
        assert!(encode(b"").is_empty());
    }

    proptest! {
        #[test]
        fn round_trip(blob in proptest::collection::vec(any::<u8>(), 0..1024)) {
            prop_assert_eq!(decode(&encode(&blob)), blob);
        }
    }
}
