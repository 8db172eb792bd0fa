//! Flat parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "AVFIELD\0"
//! version      u32 length + UTF-8 bytes
//! metadata     u32 length + UTF-8 bytes (JSON model config, may be empty)
//! count        u32
//! per tensor:  u32 name length, name bytes, u8 trainable,
//!              u32 rank, rank × u64 dims, numel × f64 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ParamStore, Result, Tensor, TensorError};

pub const CHECKPOINT_VERSION: &str = "avatar-field-checkpoint/1";
const MAGIC: &[u8; 8] = b"AVFIELD\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: String,
    pub metadata: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(metadata: String, params: ParamStore) -> Self {
        Self {
            version: CHECKPOINT_VERSION.to_string(),
            metadata,
            params,
        }
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        write_str(&mut w, &self.version)?;
        write_str(&mut w, &self.metadata)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for id in self.params.ids() {
            write_str(&mut w, self.params.name(id))?;
            w.write_u8(self.params.is_trainable(id) as u8)?;
            let t = self.params.get(id);
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_reader<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let version = read_str(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
        }
        let metadata = read_str(&mut r)?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let trainable = r.read_u8()? != 0;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0; numel];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            params.insert(name, Tensor::new(shape, data)?, trainable);
        }
        Ok(Self {
            version,
            metadata,
            params,
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| TensorError::Checkpoint(e.to_string()))
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    ckpt.to_writer(BufWriter::new(File::create(path)?))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_reader(BufReader::new(File::open(path)?))
}
