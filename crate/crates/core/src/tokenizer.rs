//! Byte-level tokenizer: ids 0-255 are raw bytes, plus begin and end
//! markers. Vocabulary size is 258.

/// Begin-of-sequence marker id.
pub const BOS: usize = 256;
/// End-of-sequence marker id.
pub const EOS: usize = 257;
/// Total vocabulary: 256 byte values plus the two markers.
pub const VOCAB_SIZE: usize = 258;

/// UTF-8 bytes of `text` as token ids, no markers.
pub fn encode_bytes(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize).collect()
}

/// Prompt encoding: begin marker followed by the text bytes.
pub fn prompt_ids(text: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(encode_bytes(text));
    ids
}

/// Target encoding: the text bytes followed by the end marker.
pub fn target_ids(text: &str) -> Vec<usize> {
    let mut ids = encode_bytes(text);
    ids.push(EOS);
    ids
}

/// Renders ids back to text. Byte ids are decoded as UTF-8 (lossily);
/// marker ids are skipped.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
