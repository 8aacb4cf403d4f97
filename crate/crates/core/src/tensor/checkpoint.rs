//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DLXA" | version: u32 | count: u64
//! repeated count times:
//!   name_len: u16 | name: UTF-8 | rank: u8 | dims: u32 * rank | values: f32 * prod(dims)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Array, ParamStore, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLXA";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, name, value) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Parameter(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[value.rank() as u8])?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in value.data() {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R, origin: &Path) -> Result<ParamStore<T>> {
    let bad = |reason: String| Error::Format { path: origin.to_path_buf(), reason };
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(read_exact(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let [rank] = read_exact::<1, _>(&mut r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.add(name, Array::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let path = path.as_ref();
    read_checkpoint(BufReader::new(File::open(path)?), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_documented_layout() {
        let mut store = ParamStore::<f64>::new();
        store.add("enc_s.w", Array::new(vec![1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"DLXA");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(buf[16..18].try_into().unwrap()), 7);
        assert_eq!(&buf[18..25], b"enc_s.w");
        assert_eq!(buf[25], 2);
        assert_eq!(u32::from_le_bytes(buf[26..30].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[30..34].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[34..38].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(buf[38..42].try_into().unwrap()), -2.0);
        assert_eq!(buf.len(), 42);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_checkpoint::<f64, _>(&b"NOPE\x01\0\0\0"[..], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn roundtrip_rounds_to_f32() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", Array::vector(vec![0.1, 1.0 / 3.0])).unwrap();
        store.add("b", Array::scalar(2.5)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        let back: ParamStore<f64> = read_checkpoint(&buf[..], Path::new("mem")).unwrap();
        let mut rounded = store.clone();
        rounded.round_to_f32();
        for (id, name, v) in back.iter() {
            assert_eq!(name, rounded.name(id));
            assert_eq!(v, rounded.get(id));
        }
    }
}
