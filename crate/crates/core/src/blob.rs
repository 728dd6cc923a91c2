//! Little-endian binary blobs for parameters and masks.
//!
//! Header: magic `FSEL`, format version (`u32`), element count (`u64`).
//! Parameter payload: one `f64` per element. Mask payload: `ceil(len / 8)`
//! bytes, bits packed LSB-first, padding bits clear.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::MaskVector;
use crate::model::{ModelSpec, ParamVector};

pub const MAGIC: &[u8; 4] = b"FSEL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

fn header(len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(len as u64).to_le_bytes());
    out
}

/// Returns the element count and the payload.
fn split_header(bytes: &[u8]) -> Result<(usize, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Blob(alloc::format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Blob("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Blob(alloc::format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Blob("length overflows usize".into()))?;
    Ok((len, &bytes[HEADER_LEN..]))
}

pub fn encode_params(params: &ParamVector) -> Vec<u8> {
    let mut out = header(params.len());
    out.reserve(params.len() * 8);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_param_values(bytes: &[u8]) -> Result<Vec<f64>> {
    let (len, payload) = split_header(bytes)?;
    if Some(payload.len()) != len.checked_mul(8) {
        return Err(Error::Blob(alloc::format!(
            "parameter payload of {} bytes does not hold {len} f64 values",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn decode_params(bytes: &[u8], spec: &ModelSpec) -> Result<ParamVector> {
    ParamVector::new(spec.clone(), decode_param_values(bytes)?)
}

pub fn encode_mask(mask: &MaskVector) -> Vec<u8> {
    let mut out = header(mask.len());
    out.extend_from_slice(&mask.to_packed());
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVector> {
    let (len, payload) = split_header(bytes)?;
    if payload.len() != len.div_ceil(8) {
        return Err(Error::Blob(alloc::format!(
            "mask payload of {} bytes does not hold {len} bits",
            payload.len()
        )));
    }
    MaskVector::from_packed(len, payload)
}
