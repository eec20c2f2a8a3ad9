use std::io::{Read, Write};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCGLCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Named, independent random streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub init: ChaCha8Rng,
    pub batch: ChaCha8Rng,
    pub kg_drop: ChaCha8Rng,
    pub ui_drop: ChaCha8Rng,
    pub transe: ChaCha8Rng,
}

const STREAM_NAMES: [&str; 5] = ["init", "batch", "kg-drop", "ui-drop", "transe"];

impl Streams {
    pub fn new(seed: u64) -> Self {
        let mk = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams { init: mk(0), batch: mk(1), kg_drop: mk(2), ui_drop: mk(3), transe: mk(4) }
    }

    fn all(&self) -> [&ChaCha8Rng; 5] {
        [&self.init, &self.batch, &self.kg_drop, &self.ui_drop, &self.transe]
    }

    fn all_mut(&mut self) -> [&mut ChaCha8Rng; 5] {
        [&mut self.init, &mut self.batch, &mut self.kg_drop, &mut self.ui_drop, &mut self.transe]
    }

    /// Per stream: name length `u8`, name, 32-byte seed, `u64` stream id,
    /// `u128` word position, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, rng) in STREAM_NAMES.iter().zip(self.all()) {
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&rng.get_seed());
            out.extend_from_slice(&rng.get_stream().to_le_bytes());
            out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut s = Streams::new(0);
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Checkpoint("truncated RNG state".into()));
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        for (name, rng) in STREAM_NAMES.iter().zip(s.all_mut()) {
            let len = take(1)?[0] as usize;
            if take(len)? != name.as_bytes() {
                return Err(Error::Checkpoint(format!("RNG stream {name} missing or out of order")));
            }
            let seed: [u8; 32] = take(32)?.try_into().expect("32 bytes");
            let stream = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
            let pos = u128::from_le_bytes(take(16)?.try_into().expect("16 bytes"));
            let mut r = ChaCha8Rng::from_seed(seed);
            r.set_stream(stream);
            r.set_word_pos(pos);
            *rng = r;
        }
        if !cur.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after RNG state".into()));
        }
        Ok(s)
    }
}

/// Raw checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub config_hash: [u8; 32],
    pub tensors: Vec<(String, Array2<f64>)>,
    pub rng: Vec<u8>,
}

impl CheckpointData {
    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.config_hash)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
            }
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[2u8])?;
            for d in [t.nrows(), t.ncols()] {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension of {name} exceeds u32")))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for x in t.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.write_all(&(self.rng.len() as u32).to_le_bytes())?;
        w.write_all(&self.rng)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur: &[u8] = &bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash: [u8; 32] = take(32)?.try_into().expect("32 bytes");
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
            }
            let shape = match dims.as_slice() {
                [] => (1, 1),
                [n] => (*n, 1),
                [a, b] => (*a, *b),
                _ => return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}"))),
            };
            let n = shape.0 * shape.1;
            let payload = take(n * 8)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Array2::from_shape_vec(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((name, t));
        }
        let rng_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let rng = take(rng_len)?.to_vec();
        if !cur.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(CheckpointData { config_hash, tensors, rng })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn bytes_round_trip() {
        let mut s = Streams::new(42);
        let _: u64 = s.batch.random();
        let _: f64 = s.kg_drop.random();
        let back = Streams::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        let (mut a, mut b) = (s.clone(), back);
        assert_eq!(a.batch.random::<u64>(), b.batch.random::<u64>());
        assert!(Streams::from_bytes(&s.to_bytes()[..40]).is_err());
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let data = CheckpointData {
            config_hash: [7; 32],
            tensors: vec![("a".into(), array![[1.5, -0.0], [f64::MIN_POSITIVE, 3.0]]), ("b".into(), array![[0.1]])],
            rng: Streams::new(1).to_bytes(),
        };
        let mut buf = Vec::new();
        data.write(&mut buf).unwrap();
        let back = CheckpointData::read(&buf[..]).unwrap();
        assert_eq!(back.config_hash, data.config_hash);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&data.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.iter().zip(t2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(again, buf);
        assert!(CheckpointData::read(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(CheckpointData::read(&bad[..]).is_err());
    }
}
