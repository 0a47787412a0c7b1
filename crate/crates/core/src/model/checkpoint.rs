//! Binary checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! "NEMB"                       magic
//! u32                          format version (1)
//! u32 x 6                      vocab_size, num_blocks, hidden_dim, num_heads, ffn_dim, max_input_len
//! u32 + bytes                  vocabulary file path (UTF-8, relative to the checkpoint's directory)
//! u32                          parameter count
//! per parameter, in store order:
//!   u32 + bytes                name (UTF-8)
//!   u8                         dtype tag: 0 = f32, 1 = f64
//!   u32 + u64 x ndim           shape
//!   values                     row-major, little-endian
//! ```

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use super::config::ModelConfig;
use super::params::ParameterStore;
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NEMB";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParameterStore,
    pub vocab_file: String,
}

pub(crate) fn map_eof(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Truncated
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(map_eof)?;
    Ok(b[0])
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(map_eof)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(map_eof)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(map_eof)?;
    String::from_utf8(buf).map_err(|_| Error::InvalidConfig("string is not valid UTF-8".into()))
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

pub fn write_checkpoint(
    w: &mut impl Write,
    params: &ParameterStore,
    vocab_file: &str,
) -> Result<()> {
    let c = params.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        c.vocab_size,
        c.num_blocks,
        c.hidden_dim,
        c.num_heads,
        c.ffn_dim,
        c.max_input_len,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    write_string(w, vocab_file)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        write_string(w, name)?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        num_blocks: dims[1],
        hidden_dim: dims[2],
        num_heads: dims[3],
        ffn_dim: dims[4],
        max_input_len: dims[5],
    };
    let vocab_file = read_string(r)?;
    let count = read_u32(r)? as usize;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name = read_string(r)?;
        let dtype = read_u8(r)?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let values: Vec<f64> = match dtype {
            DTYPE_F64 => {
                let mut buf = vec![0u8; len * 8];
                r.read_exact(&mut buf).map_err(map_eof)?;
                buf.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect()
            }
            DTYPE_F32 => {
                let mut buf = vec![0u8; len * 4];
                r.read_exact(&mut buf).map_err(map_eof)?;
                buf.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect()
            }
            other => return Err(Error::InvalidConfig(format!("unknown dtype tag {other}"))),
        };
        let t = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length matches shape");
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
    }
    let params = ParameterStore::from_tensors(config, tensors)?;
    Ok(Checkpoint { params, vocab_file })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ParameterStore,
    vocab_file: &str,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut w, params, vocab_file)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(fs::File::open(path)?))
}

/// Loads a checkpoint together with the vocabulary its header points to.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ParameterStore, Vocabulary)> {
    let path = path.as_ref();
    let ckpt = load_checkpoint(path)?;
    let vocab_path = resolve_vocab_path(path, &ckpt.vocab_file);
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.size() != ckpt.params.config().vocab_size {
        return Err(Error::InvalidConfig(format!(
            "vocabulary {} has {} tokens, checkpoint expects {}",
            vocab_path.display(),
            vocab.size(),
            ckpt.params.config().vocab_size
        )));
    }
    Ok((ckpt.params, vocab))
}

fn resolve_vocab_path(checkpoint: &Path, vocab_file: &str) -> PathBuf {
    let v = Path::new(vocab_file);
    if v.is_absolute() {
        v.to_path_buf()
    } else {
        checkpoint.parent().unwrap_or(Path::new(".")).join(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        ParameterStore::init(
            ModelConfig {
                hidden_dim: 8,
                num_heads: 2,
                ffn_dim: 16,
                max_input_len: 8,
                ..ModelConfig::new(12)
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, "model.vocab").unwrap();
        assert_eq!(&buf[..4], b"NEMB");
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert!(ck.params.bitwise_eq(&p));
        assert_eq!(ck.vocab_file, "model.vocab");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let p = store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, "v").unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(Error::NotACheckpoint)
        ));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            read_checkpoint(&mut &cut[..]),
            Err(Error::Truncated)
        ));
    }
}
