//! Character-level tokenizer over 7-bit ASCII.

pub const VOCAB: usize = 128;

/// Byte values of ASCII characters; anything else maps to `?`.
pub fn encode(text: &str) -> Vec<u32> {
    text.chars()
        .map(|c| if c.is_ascii() { c as u32 } else { b'?' as u32 })
        .collect()
}

pub fn decode(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| char::from_u32(t).filter(char::is_ascii).unwrap_or('?'))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_ascii() {
        let s = "The pass key is 12345.";
        assert_eq!(decode(&encode(s)), s);
        assert!(encode(s).iter().all(|&t| (t as usize) < VOCAB));
        assert_eq!(decode(&encode("é")), "?");
    }
}
