//! Binary files for parameter-shaped vectors.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic, identifies checkpoint / Fisher / precision |
//! | 8     | `u64` metadata (sample count or task counter) |
//! | 4     | `u32` length `n` of the layout JSON |
//! | n     | layout JSON |
//! | 8     | `u64` value count |
//! | 8 * k | `f64` values |

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{Layout, ParamVector};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BCMCKPT1";
pub const FISHER_MAGIC: &[u8; 8] = b"BCMFSHR1";
pub const PRECISION_MAGIC: &[u8; 8] = b"BCMPREC1";

pub fn encode_vector(magic: &[u8; 8], meta: u64, params: &ParamVector) -> Vec<u8> {
    let layout = serde_json::to_vec(&**params.layout()).expect("layout serializes");
    let mut out = Vec::with_capacity(28 + layout.len() + 8 * params.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&meta.to_le_bytes());
    out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    out.extend_from_slice(&layout);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, field: &str) -> Result<&'a [u8]> {
    let slice = bytes
        .get(*at..*at + n)
        .ok_or_else(|| Error::format(field, "file truncated"))?;
    *at += n;
    Ok(slice)
}

pub fn decode_vector(magic: &[u8; 8], bytes: &[u8]) -> Result<(u64, ParamVector)> {
    let mut at = 0;
    let found = take(bytes, &mut at, 8, "magic")?;
    if found != magic {
        return Err(Error::format(
            "magic",
            format!(
                "expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(found)
            ),
        ));
    }
    let meta = u64::from_le_bytes(take(bytes, &mut at, 8, "meta")?.try_into().expect("8"));
    let n = u32::from_le_bytes(take(bytes, &mut at, 4, "layout_len")?.try_into().expect("4")) as usize;
    let layout: Layout = serde_json::from_slice(take(bytes, &mut at, n, "layout")?)
        .map_err(|e| Error::format("layout", e.to_string()))?;
    layout.validate()?;
    let count = u64::from_le_bytes(take(bytes, &mut at, 8, "count")?.try_into().expect("8")) as usize;
    if count != layout.len() {
        return Err(Error::format("count", format!("{count} values for a layout of {}", layout.len())));
    }
    let data = take(bytes, &mut at, 8 * count, "values")?;
    if at != bytes.len() {
        return Err(Error::format("values", format!("{} trailing bytes", bytes.len() - at)));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
        .collect();
    Ok((meta, ParamVector::from_values(Arc::new(layout), values)?))
}

pub fn write_vector(path: &Path, magic: &[u8; 8], meta: u64, params: &ParamVector) -> Result<()> {
    std::fs::write(path, encode_vector(magic, meta, params)).map_err(|e| Error::io(path, e))
}

pub fn read_vector(path: &Path, magic: &[u8; 8]) -> Result<(u64, ParamVector)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vector(magic, &bytes).map_err(|e| match e {
        Error::Format { field, detail } => Error::format(format!("{}:{field}", path.display()), detail),
        other => other,
    })
}

pub fn write_checkpoint(path: &Path, params: &ParamVector) -> Result<()> {
    write_vector(path, CHECKPOINT_MAGIC, 0, params)
}

pub fn read_checkpoint(path: &Path) -> Result<ParamVector> {
    read_vector(path, CHECKPOINT_MAGIC).map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::SegmentKind;
    use proptest::prelude::*;

    fn layout(rows: usize, cols: usize) -> Arc<Layout> {
        Arc::new(Layout::from_shapes([
            ("w".to_string(), SegmentKind::Weight { layer: 0 }, rows, cols),
            ("h".to_string(), SegmentKind::HeadBias { task: 1 }, rows, 1),
        ]))
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(rows in 1usize..5, cols in 1usize..5, meta in any::<u64>(), seed in any::<u64>()) {
            let l = layout(rows, cols);
            let values = (0..l.len()).map(|i| (seed.wrapping_mul(i as u64 + 1) % 1000) as f64 * 1e-3 - 0.5).collect();
            let p = ParamVector::from_values(l, values).unwrap();
            let bytes = encode_vector(FISHER_MAGIC, meta, &p);
            let (m, q) = decode_vector(FISHER_MAGIC, &bytes).unwrap();
            prop_assert_eq!(m, meta);
            prop_assert_eq!(q, p);
        }
    }

    #[test]
    fn wrong_magic_and_truncation_are_format_errors() {
        let p = ParamVector::zeros(layout(2, 2));
        let bytes = encode_vector(CHECKPOINT_MAGIC, 0, &p);
        assert!(matches!(decode_vector(FISHER_MAGIC, &bytes), Err(Error::Format { .. })));
        assert!(matches!(
            decode_vector(CHECKPOINT_MAGIC, &bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }
}
