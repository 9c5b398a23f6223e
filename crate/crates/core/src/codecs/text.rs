use alloc::string::String;
use alloc::vec::Vec;

/// Local id that terminates every text payload.
pub const TEXT_END: u32 = 256;
/// Bytes plus the end sentinel.
pub const TEXT_VOCAB: u32 = 257;

/// Byte-level ids followed by [`TEXT_END`].
pub fn encode_text(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).chain(core::iter::once(TEXT_END)).collect()
}

/// Reads bytes up to the first sentinel. Invalid UTF-8 is replaced, never
/// rejected.
pub fn decode_text(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .take_while(|&&t| t != TEXT_END)
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
