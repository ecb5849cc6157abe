//! `SPK1` spike-tensor dumps: magic, dims `(T, C, H, W)` as little-endian
//! `u32`, then `ceil(T*C*H*W / 8)` bytes of row-major bits, least-significant
//! bit first.

use std::fs;
use std::path::Path;

use evsnn_core::SpikeTensor;

use crate::error::{Error, Result};

pub const SPK_MAGIC: &[u8; 4] = b"SPK1";
const HEADER_LEN: usize = 20;

pub fn encode(t: &SpikeTensor) -> Vec<u8> {
    let n_bytes = t.len().div_ceil(8);
    let mut out = Vec::with_capacity(HEADER_LEN + n_bytes);
    out.extend_from_slice(SPK_MAGIC);
    for d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let payload: Vec<u8> = t.words().iter().flat_map(|w| w.to_le_bytes()).take(n_bytes).collect();
    out.extend_from_slice(&payload);
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<SpikeTensor> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != SPK_MAGIC {
        return Err(Error::format(path, "offset 0", "missing SPK1 header"));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 4 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    let n: usize = dims.iter().product();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n.div_ceil(8) {
        return Err(Error::format(
            path,
            format!("offset {HEADER_LEN}"),
            format!("payload of {} bytes, dims {dims:?} need {}", payload.len(), n.div_ceil(8)),
        ));
    }
    let words = payload
        .chunks(8)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..c.len()].copy_from_slice(c);
            u64::from_le_bytes(b)
        })
        .collect();
    SpikeTensor::from_words(dims, words).map_err(|e| Error::format(path, "payload", e.to_string()))
}

pub fn save(path: &Path, t: &SpikeTensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SpikeTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_bit_order() {
        let mut t = SpikeTensor::zeros([1, 1, 1, 10]).unwrap();
        t.set(0, 0, 0, 0, true);
        t.set(0, 0, 0, 9, true);
        let b = encode(&t);
        assert_eq!(&b[..4], b"SPK1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &10u32.to_le_bytes());
        assert_eq!(&b[20..], &[0b0000_0001, 0b0000_0010]);
    }

    #[test]
    fn wrong_payload_length_rejected() {
        let t = SpikeTensor::zeros([2, 2, 3, 3]).unwrap();
        let mut b = encode(&t);
        b.push(0);
        assert!(decode(Path::new("x"), &b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in (1usize..4, 1usize..3, 1usize..6, 1usize..6), seed in any::<u64>()) {
            let dims = [dims.0, dims.1, dims.2, dims.3];
            let mut t = SpikeTensor::zeros(dims).unwrap();
            let mut s = seed;
            for i in 0..t.len() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                t.set_flat(i, s >> 63 == 1);
            }
            prop_assert_eq!(decode(Path::new("x"), &encode(&t)).unwrap(), t);
        }
    }
}
