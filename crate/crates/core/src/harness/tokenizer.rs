//! Byte-level vocabulary: three specials followed by the 256 byte values.

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const SENTINEL: usize = 2;
pub const BYTE_OFFSET: usize = 3;
pub const VOCAB_SIZE: usize = BYTE_OFFSET + 256;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize + BYTE_OFFSET).collect()
}

/// Decodes byte ids, rendering specials as `<pad>`, `</s>` and `<x>`.
pub fn decode(ids: &[usize]) -> String {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            PAD => bytes.extend_from_slice(b"<pad>"),
            EOS => bytes.extend_from_slice(b"</s>"),
            SENTINEL => bytes.extend_from_slice(b"<x>"),
            _ if id < VOCAB_SIZE => bytes.push((id - BYTE_OFFSET) as u8),
            _ => bytes.extend_from_slice(b"<unk>"),
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}
