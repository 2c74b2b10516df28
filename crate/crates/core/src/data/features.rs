use std::path::Path;

use super::bytes::{checked_u32, put_f32s, put_u16, put_u32};
use super::{atomic_write, read_file, ByteReader, FeatureDataset, Sequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"SGNF";
pub const FEATURE_VERSION: u32 = 1;

/// Serializes a dataset in the `SGNF` layout.
pub fn encode_features(ds: &FeatureDataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FEATURE_VERSION);
    put_u32(&mut out, checked_u32(ds.feature_dim, "feature dim")?);
    put_u32(&mut out, checked_u32(ds.len(), "sequence count")?);
    for s in &ds.sequences {
        let id = s.id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| Error::invalid(format!("id `{}` longer than 65535 bytes", s.id)))?;
        if s.frames.shape() != [s.len(), ds.feature_dim] {
            return Err(Error::Shape {
                op: "write_features",
                lhs: s.frames.shape().to_vec(),
                rhs: vec![s.len(), ds.feature_dim],
            });
        }
        put_u16(&mut out, id_len);
        out.extend_from_slice(id);
        put_u32(&mut out, checked_u32(s.len(), "frame count")?);
        put_f32s(&mut out, s.frames.data());
        put_u32(&mut out, checked_u32(s.target.len(), "target length")?);
        for &t in &s.target {
            put_u32(&mut out, t);
        }
    }
    Ok(out)
}

pub fn write_features(path: &Path, ds: &FeatureDataset) -> Result<()> {
    atomic_write(path, &encode_features(ds)?)
}

/// Parses an `SGNF` buffer; `path` only labels errors.
pub fn decode_features(buf: &[u8], path: &Path) -> Result<FeatureDataset> {
    let mut r = ByteReader::new(buf, path);
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err(r.error_at(0, "bad magic, expected SGNF"));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(r.error_at(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let f = r.u32("feature dim")? as usize;
    if f == 0 {
        return Err(r.error_at(at, "feature dim is 0"));
    }
    let n = r.u32("sequence count")? as usize;
    let mut ds = FeatureDataset::new(f);
    ds.sequences.reserve(n.min(r.remaining() / 10 + 1));
    for i in 0..n {
        let id_len = r.u16("id length")? as usize;
        let id = r.utf8(id_len, "sequence id")?;
        let at = r.offset();
        let t = r.u32("frame count")? as usize;
        if t == 0 {
            return Err(r.error_at(at, format!("sequence {i} has 0 frames")));
        }
        let count = t
            .checked_mul(f)
            .ok_or_else(|| r.error_at(at, format!("sequence {i}: frame count {t} overflows")))?;
        let at = r.offset();
        let data = r.f32s(count, "frames")?;
        let frames = Tensor::new(vec![t, f], data).map_err(|e| r.error_at(at, format!("sequence {i}: {e}")))?;
        let l = r.u32("target length")? as usize;
        let target = r.u32s(l, "target ids")?;
        ds.sequences.push(Sequence { id, frames, target });
    }
    if !r.at_end() {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    Ok(ds)
}

pub fn read_features(path: &Path) -> Result<FeatureDataset> {
    let buf = read_file(path)?;
    decode_features(&buf, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(seed: u64, n: usize) -> FeatureDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = FeatureDataset::new(5);
        for i in 0..n {
            let t = rng.random_range(1..9);
            ds.push(Sequence {
                id: format!("seq-{i}-ü"),
                frames: Tensor::from_fn(&[t, 5], |_| rng.random_range(-3.0..3.0)),
                target: (0..rng.random_range(0..6)).map(|_| rng.random_range(0..100)).collect(),
            })
            .unwrap();
        }
        ds
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.sgnf");
        let ds = random_dataset(1, 12);
        write_features(&p, &ds).unwrap();
        assert_eq!(read_features(&p).unwrap(), ds);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(encode_features(&ds).unwrap(), bytes);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = FeatureDataset::new(1024);
        let bytes = encode_features(&ds).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode_features(&bytes, Path::new("x")).unwrap(), ds);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_features(&random_dataset(2, 3)).unwrap();
        for cut in [2, 7, 15, 20, bytes.len() - 1] {
            match decode_features(&bytes[..cut], Path::new("t.sgnf")) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_features(&random_dataset(3, 1)).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_features(&bytes, Path::new("v")),
            Err(Error::Format { offset: 4, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_features(&bytes, Path::new("m")),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn random_corruption_never_panics() {
        let bytes = encode_features(&random_dataset(4, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let mut b = bytes.clone();
            for _ in 0..rng.random_range(1..4) {
                let i = rng.random_range(0..b.len());
                b[i] = rng.random();
            }
            let _ = decode_features(&b, Path::new("c"));
        }
    }
}
