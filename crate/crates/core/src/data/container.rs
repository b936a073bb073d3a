//! Binary dataset container, little-endian throughout:
//!
//! ```text
//! magic "DBTD" | version u32 | count u32 | classes u32 | channels u32 | height u32 | width u32
//! count × ( label u32 | channels·height·width f32 pixels )
//! ```
//!
//! Part layouts are not stored.

use std::io::{Read, Write};
use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DBTD";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset(path: &Path, samples: &[Sample], classes: usize) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::Dataset("nothing to write".into()))?;
    let shape = first.image.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dataset(format!("images must be [C, H, W], got {shape:?}")));
    }
    let mut buf = Vec::with_capacity(28 + samples.len() * (4 + 4 * first.image.numel()));
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, samples.len() as u32, classes as u32, shape[0] as u32, shape[1] as u32, shape[2] as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (i, s) in samples.iter().enumerate() {
        if s.image.shape() != shape.as_slice() || s.label >= classes {
            return Err(Error::Dataset(format!("sample {i} does not fit the header")));
        }
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Returns the samples and the class count from the header.
pub fn read_dataset(path: &Path) -> Result<(Vec<Sample>, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
    if bytes.len() < 28 || &bytes[..4] != DATASET_MAGIC {
        return Err(bad("not a dataset container (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != DATASET_VERSION as usize {
        return Err(bad(&format!("unsupported version {}", word(0))));
    }
    let (count, classes, c, h, w) = (word(1), word(2), word(3), word(4), word(5));
    let pixels = c * h * w;
    let record = 4 + 4 * pixels;
    if pixels == 0 || bytes.len() != 28 + count * record {
        return Err(bad("payload length does not match header"));
    }
    let mut samples = Vec::with_capacity(count);
    for rec in bytes[28..].chunks_exact(record) {
        let label = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes")) as usize;
        if label >= classes {
            return Err(bad(&format!("label {label} outside {classes} classes")));
        }
        let data = rec[4..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        samples.push(Sample {
            image: Tensor::from_vec([c, h, w], data)?,
            label,
            parts: Vec::new(),
        });
    }
    Ok((samples, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};

    #[test]
    fn roundtrip_and_corruption() {
        let spec = DatasetSpec {
            samples_per_class: 2,
            image_size: 32,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dbtd");
        write_dataset(&path, &data, 8).unwrap();
        let (back, classes) = read_dataset(&path).unwrap();
        assert_eq!(classes, 8);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!((a.label, &a.image), (b.label, &b.image));
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
