//! Record framing and payload encoding.
//!
//! ```text
//! record  := u32 payload_len | u32 crc32c(payload) | payload
//! payload := u64 cache_index | u16 feature_count | feature*   (features sorted by name)
//! feature := u16 name_len | name | u8 dtype_tag | u32 element_count | element data
//! ```
//!
//! All integers are little-endian.

use crc::{Crc, CRC_32_ISCSI};

use crate::features::{DType, FeatureValue, Features};

pub const CRC32C: Crc<u32> = Crc::<u32>::new(&CRC_32_ISCSI);

pub const FRAME_HEADER_LEN: usize = 8;

/// A decoded record payload.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredExample {
    pub cache_index: u64,
    pub features: Features,
}

impl StoredExample {
    pub fn new(cache_index: u64, features: Features) -> Self {
        Self { cache_index, features }
    }
}

pub fn crc32c(bytes: &[u8]) -> u32 {
    CRC32C.checksum(bytes)
}

pub fn encode_payload(example: &StoredExample) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&example.cache_index.to_le_bytes());
    out.extend_from_slice(&(example.features.len() as u16).to_le_bytes());
    for (name, value) in &example.features {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(value.dtype().tag());
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        out.extend_from_slice(&value.to_le_bytes());
    }
    out
}

/// Full framed record: header followed by payload.
pub fn encode_record(example: &StoredExample) -> Vec<u8> {
    let payload = encode_payload(example);
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32c(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parse a frame header into `(payload_len, crc)`.
pub fn parse_header(header: &[u8; FRAME_HEADER_LEN]) -> (u32, u32) {
    (u32::from_le_bytes(header[0..4].try_into().unwrap()), u32::from_le_bytes(header[4..8].try_into().unwrap()))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("payload ends at byte {} but {} more needed", self.buf.len(), n));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_payload(payload: &[u8]) -> Result<StoredExample, String> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let cache_index = c.u64()?;
    let count = c.u16()?;
    let mut features = Features::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name =
            std::str::from_utf8(c.take(name_len)?).map_err(|_| "feature name is not UTF-8".to_string())?.to_string();
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(format!("feature `{name}` out of order"));
        }
        let tag = c.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| format!("unknown dtype tag {tag}"))?;
        let elems = c.u32()? as usize;
        let data = c.take(elems * dtype.element_size())?;
        let value = FeatureValue::from_le_bytes(dtype, data).expect("length checked");
        prev = Some(name.clone());
        features.insert(name, value);
    }
    if c.pos != payload.len() {
        return Err(format!("{} trailing bytes in payload", payload.len() - c.pos));
    }
    Ok(StoredExample { cache_index, features })
}
