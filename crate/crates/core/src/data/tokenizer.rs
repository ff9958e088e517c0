use crate::error::{Error, Result};

/// Byte id range `0..256`, then the document separator and padding.
pub const SEP: u32 = 256;
pub const PAD: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Bytes of `ids`, skipping separator and padding.
pub fn decode(ids: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            SEP | PAD => {}
            _ => {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: VOCAB_SIZE,
                })
            }
        }
    }
    Ok(out)
}

/// Lossy text view for logs and samples.
pub fn decode_string(ids: &[u32]) -> String {
    ids.iter()
        .map(|&id| match id {
            0..=255 => (id as u8 as char).to_string(),
            SEP => "<sep>".to_string(),
            PAD => "<pad>".to_string(),
            _ => "<?>".to_string(),
        })
        .collect()
}
