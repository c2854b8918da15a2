//! `GBCK` checkpoint files.
//!
//! ```text
//! magic        4 bytes  "GBCK"
//! version      u32      1
//! config hash  32 bytes SHA-256 of the resolved configuration
//! count        u32      number of records
//! records      count x (name length u16, UTF-8 name, GBFT blob)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::blob::{blob_read_any, AnyTensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Shape, Tensor};

pub const CKPT_MAGIC: [u8; 4] = *b"GBCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub records: BTreeMap<String, AnyTensor>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Self { config_hash, records: BTreeMap::new() }
    }

    /// Adds every tensor of `store` under `prefix/`.
    pub fn put_store<T: Element>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, t) in store.iter() {
            self.records.insert(format!("{prefix}/{name}"), any(t));
        }
    }

    /// Collects the tensors stored under `prefix/`.
    pub fn take_store<T: Element>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let lead = format!("{prefix}/");
        let mut store = ParamStore::new();
        for (name, t) in self.records.range(lead.clone()..) {
            let Some(rest) = name.strip_prefix(&lead) else { break };
            store.insert(rest, t.clone().into_typed()?);
        }
        Ok(store)
    }

    pub fn put_scalar(&mut self, name: &str, v: f64) {
        self.records.insert(format!("meta/{name}"), AnyTensor::F64(Tensor::scalar(v)));
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let key = format!("meta/{name}");
        match self.records.get(&key) {
            Some(AnyTensor::F64(t)) if t.shape() == Shape::new(1, 1, 1, 1) => Ok(t.data()[0]),
            Some(_) => Err(Error::Config(format!("checkpoint record `{key}` is not an f64 scalar"))),
            None => Err(Error::UnknownParam(key)),
        }
    }

    pub fn write_to<W: Write>(&self, sink: &mut W) -> Result<()> {
        sink.write_all(&CKPT_MAGIC)?;
        sink.write_all(&CKPT_VERSION.to_le_bytes())?;
        sink.write_all(&self.config_hash)?;
        sink.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (name, t) in &self.records {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidDims(format!("record name longer than 65535 bytes: {name}")))?;
            sink.write_all(&len.to_le_bytes())?;
            sink.write_all(name.as_bytes())?;
            t.write(sink)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(source: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        fill(source, &mut magic, "checkpoint magic")?;
        if magic != CKPT_MAGIC {
            return Err(Error::BadMagic { expected: CKPT_MAGIC, found: magic });
        }
        let mut word = [0u8; 4];
        fill(source, &mut word, "checkpoint version")?;
        let version = u32::from_le_bytes(word);
        if version != CKPT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut config_hash = [0u8; 32];
        fill(source, &mut config_hash, "config hash")?;
        fill(source, &mut word, "record count")?;
        let count = u32::from_le_bytes(word);
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            fill(source, &mut len, "record name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            fill(source, &mut name, "record name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Truncated("record name is not UTF-8".into()))?;
            let t = blob_read_any(source)?;
            records.insert(name, t);
        }
        Ok(Self { config_hash, records })
    }

    /// Writes through a temporary file and renames it into place, so an
    /// interrupted write never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }

    /// Loads and rejects a file written for a different configuration.
    pub fn load_matching(path: &Path, config_hash: &[u8; 32]) -> Result<Self> {
        let c = Self::load(path)?;
        if &c.config_hash != config_hash {
            return Err(Error::ConfigHashMismatch);
        }
        Ok(c)
    }
}

fn any<T: Element>(t: &Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        crate::tensor::DType::F32 => AnyTensor::F32(t.cast()),
        crate::tensor::DType::F64 => AnyTensor::F64(t.cast()),
    }
}

fn fill<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}
