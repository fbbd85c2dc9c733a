//! Binary checkpoint archives.
//!
//! Layout: the magic string "VXADAPT1", an entry count, a manifest (name,
//! dtype, flags, shape per entry), then every payload in manifest order as
//! little-endian words. Entry order is the writer's insertion order, so a
//! save -> load -> save cycle is byte-identical.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::params::{AdamMoments, AdamState, ParameterSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VXADAPT1";

/// Marks a parameter entry the optimizer may move.
pub const FLAG_TRAINABLE: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic header {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: Vec<u8> },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing entry {0:?}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl EntryData {
    fn dtype(&self) -> u8 {
        match self {
            EntryData::F64(_) => 0,
            EntryData::U64(_) => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub flags: u8,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn as_tensor(&self) -> Result<Tensor, CheckpointError> {
        match &self.data {
            EntryData::F64(v) => Tensor::new(self.shape.clone(), v.clone())
                .map_err(|e| CheckpointError::Malformed(format!("entry {:?}: {e}", self.name))),
            EntryData::U64(_) => Err(CheckpointError::Malformed(format!(
                "entry {:?} holds integers, not tensor data",
                self.name
            ))),
        }
    }

    pub fn as_u64(&self) -> Result<u64, CheckpointError> {
        match &self.data {
            EntryData::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(CheckpointError::Malformed(format!(
                "entry {:?} is not a single integer",
                self.name
            ))),
        }
    }

    pub fn as_f64(&self) -> Result<f64, CheckpointError> {
        match &self.data {
            EntryData::F64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(CheckpointError::Malformed(format!(
                "entry {:?} is not a single float",
                self.name
            ))),
        }
    }
}

/// An ordered list of named payloads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, flags: u8, t: &Tensor) {
        self.entries.push(Entry {
            name: name.into(),
            flags,
            shape: t.shape().to_vec(),
            data: EntryData::F64(t.data().to_vec()),
        });
    }

    pub fn push_f64(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push(Entry {
            name: name.into(),
            flags: 0,
            shape: vec![1],
            data: EntryData::F64(vec![value]),
        });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, value: u64) {
        self.entries.push(Entry {
            name: name.into(),
            flags: 0,
            shape: vec![1],
            data: EntryData::U64(vec![value]),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Entry, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// Entries whose name starts with `prefix`, in archive order, with the
    /// prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Entry)> {
        self.entries
            .iter()
            .filter_map(move |e| e.name.strip_prefix(prefix).map(|rest| (rest, e)))
    }

    pub fn write(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.data.dtype(), e.flags, e.shape.len() as u8])?;
            for d in &e.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
        }
        for e in &self.entries {
            match &e.data {
                EntryData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                EntryData::U64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: magic.to_vec(),
                expected: MAGIC.to_vec(),
            });
        }
        let count = read_u64(r)? as usize;
        if count > 1 << 20 {
            return Err(CheckpointError::Malformed(format!(
                "implausible entry count {count}"
            )));
        }
        struct Header {
            name: String,
            dtype: u8,
            flags: u8,
            shape: Vec<usize>,
        }
        let mut headers = Vec::with_capacity(count);
        for _ in 0..count {
            let mut len_buf = [0u8; 2];
            read_exact(r, &mut len_buf)?;
            let mut name_buf = vec![0u8; u16::from_le_bytes(len_buf) as usize];
            read_exact(r, &mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?;
            let mut meta = [0u8; 3];
            read_exact(r, &mut meta)?;
            let [dtype, flags, ndims] = meta;
            if dtype > 1 {
                return Err(CheckpointError::Malformed(format!(
                    "entry {name:?} has unknown dtype {dtype}"
                )));
            }
            let mut shape = Vec::with_capacity(ndims as usize);
            for _ in 0..ndims {
                shape.push(read_u64(r)? as usize);
            }
            headers.push(Header {
                name,
                dtype,
                flags,
                shape,
            });
        }
        let mut entries = Vec::with_capacity(count);
        for h in headers {
            let n: usize = h.shape.iter().product();
            let data = match h.dtype {
                0 => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        v.push(f64::from_le_bytes(read_word(r)?));
                    }
                    EntryData::F64(v)
                }
                _ => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        v.push(u64::from_le_bytes(read_word(r)?));
                    }
                    EntryData::U64(v)
                }
            };
            entries.push(Entry {
                name: h.name,
                flags: h.flags,
                shape: h.shape,
                data,
            });
        }
        Ok(Archive { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let archive = Self::read(&mut r)?;
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(CheckpointError::Malformed(
                "trailing bytes after final payload".into(),
            ));
        }
        Ok(archive)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Malformed("file truncated".into())
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_word(r: &mut impl Read) -> Result<[u8; 8], CheckpointError> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    Ok(u64::from_le_bytes(read_word(r)?))
}

/// Appends every parameter of `params` under `prefix`.
pub fn push_params(archive: &mut Archive, prefix: &str, params: &ParameterSet) {
    for p in params.iter() {
        archive.push_tensor(
            format!("{prefix}{}", p.name),
            if p.trainable { FLAG_TRAINABLE } else { 0 },
            &p.tensor,
        );
    }
}

/// Rebuilds a parameter set from every entry under `prefix`, in order.
pub fn read_params(archive: &Archive, prefix: &str) -> Result<ParameterSet, CheckpointError> {
    let mut params = ParameterSet::new();
    for (name, entry) in archive.with_prefix(prefix) {
        params
            .push(
                name,
                entry.as_tensor()?,
                entry.flags & FLAG_TRAINABLE != 0,
            )
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    }
    if params.is_empty() {
        return Err(CheckpointError::Missing(format!("{prefix}*")));
    }
    Ok(params)
}

/// Appends optimizer state (schedule constants, step count, moments).
pub fn push_adam(archive: &mut Archive, prefix: &str, state: &AdamState) {
    archive.push_u64(format!("{prefix}step"), state.step);
    archive.push_f64(format!("{prefix}base_rate"), state.base_rate);
    archive.push_f64(format!("{prefix}decay"), state.decay);
    archive.push_f64(format!("{prefix}beta1"), state.beta1);
    archive.push_f64(format!("{prefix}beta2"), state.beta2);
    archive.push_f64(format!("{prefix}eps"), state.eps);
    for m in &state.moments {
        archive.push_tensor(format!("{prefix}m/{}", m.name), 0, &m.m);
        archive.push_tensor(format!("{prefix}v/{}", m.name), 0, &m.v);
    }
}

/// Rebuilds optimizer state written by [`push_adam`].
pub fn read_adam(archive: &Archive, prefix: &str) -> Result<AdamState, CheckpointError> {
    let step = archive.require(&format!("{prefix}step"))?.as_u64()?;
    let base_rate = archive.require(&format!("{prefix}base_rate"))?.as_f64()?;
    let decay = archive.require(&format!("{prefix}decay"))?.as_f64()?;
    let beta1 = archive.require(&format!("{prefix}beta1"))?.as_f64()?;
    let beta2 = archive.require(&format!("{prefix}beta2"))?.as_f64()?;
    let eps = archive.require(&format!("{prefix}eps"))?.as_f64()?;
    let m_prefix = format!("{prefix}m/");
    let mut moments = Vec::new();
    for (name, entry) in archive.with_prefix(&m_prefix) {
        let v = archive
            .require(&format!("{prefix}v/{name}"))?
            .as_tensor()?;
        moments.push(AdamMoments {
            name: name.to_string(),
            m: entry.as_tensor()?,
            v,
        });
    }
    Ok(AdamState {
        step,
        base_rate,
        decay,
        beta1,
        beta2,
        eps,
        moments,
    })
}

/// Writes one network's parameters, with optimizer state when given.
pub fn save_weights(
    params: &ParameterSet,
    adam: Option<&AdamState>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut archive = Archive::new();
    push_params(&mut archive, "param/", params);
    if let Some(state) = adam {
        push_adam(&mut archive, "adam/", state);
    }
    archive.save(path)
}

/// Reads back what [`save_weights`] wrote.
pub fn load_weights(path: &Path) -> Result<(ParameterSet, Option<AdamState>), CheckpointError> {
    let archive = Archive::load(path)?;
    let params = read_params(&archive, "param/")?;
    let adam = if archive.get("adam/step").is_some() {
        Some(read_adam(&archive, "adam/")?)
    } else {
        None
    };
    Ok((params, adam))
}
