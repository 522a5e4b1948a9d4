//! MLDG1 dataset container (little-endian):
//!
//! ```text
//! "MLDG1" | u32 n_samples | u16 n_classes | u16 n_domains | u32 H | u32 W
//! n_samples × ( u16 class | u16 domain | u8[3·H·W] channel-major image )
//! ```
//!
//! Domain names are not stored; loading assigns [`super::domain_name`].

use std::fs;
use std::path::Path;

use super::{domain_name, DomainDataset, DomainSample};
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MLDG1";
pub const HEADER_LEN: usize = 5 + 4 + 2 + 2 + 4 + 4;

/// Exact encoded size for `n` samples of `h × w`.
pub fn encoded_len(n: usize, h: usize, w: usize) -> usize {
    HEADER_LEN + n * (4 + 3 * h * w)
}

pub fn encode(ds: &DomainDataset) -> Result<Vec<u8>> {
    ds.check_labels()?;
    let (h, w) = (ds.height as usize, ds.width as usize);
    let n_domains = u16::try_from(ds.n_domains()).map_err(|_| Error::Input("too many domains".into()))?;
    let n = u32::try_from(ds.len()).map_err(|_| Error::Input("too many samples".into()))?;
    let mut buf = Vec::with_capacity(encoded_len(ds.len(), h, w));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&ds.n_classes.to_le_bytes());
    buf.extend_from_slice(&n_domains.to_le_bytes());
    buf.extend_from_slice(&ds.height.to_le_bytes());
    buf.extend_from_slice(&ds.width.to_le_bytes());
    for s in &ds.samples {
        buf.extend_from_slice(&s.class_label.to_le_bytes());
        buf.extend_from_slice(&s.domain_label.to_le_bytes());
        buf.extend_from_slice(&s.image);
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<DomainDataset> {
    if bytes.len() < HEADER_LEN || &bytes[..5] != MAGIC {
        return Err(Error::Format("missing MLDG1 header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let n = u32_at(5) as usize;
    let n_classes = u16_at(9);
    let n_domains = u16_at(11) as usize;
    let (height, width) = (u32_at(13), u32_at(17));
    let px = 3 * height as usize * width as usize;
    let expected = encoded_len(n, height as usize, width as usize);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "MLDG1 length {} does not match header ({expected} expected)",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(n);
    let mut off = HEADER_LEN;
    for _ in 0..n {
        samples.push(DomainSample {
            class_label: u16_at(off),
            domain_label: u16_at(off + 2),
            image: bytes[off + 4..off + 4 + px].to_vec(),
        });
        off += 4 + px;
    }
    let ds = DomainDataset {
        n_classes,
        domain_names: (0..n_domains).map(domain_name).collect(),
        height,
        width,
        samples,
        held_out: None,
    };
    ds.check_labels().map_err(|e| Error::Format(e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    crate::model::write_atomic(path, &bytes)
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    decode(&fs::read(path)?)
}
