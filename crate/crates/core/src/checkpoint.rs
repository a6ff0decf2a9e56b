//! `CEMCD1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     6 bytes  "CEMCD1"
//! version   u32      currently 1
//! n_meta    u32      then n_meta × { u32 len, key utf-8, u32 len, value utf-8 }
//! n_tensor  u32      then n_tensor × {
//!                        u32 len, name utf-8,
//!                        u8 dtype (0 = f32, 1 = f64),
//!                        u32 ndim, ndim × u64 dims,
//!                        prod(dims) values
//!                    }
//! ```
//!
//! Metadata and tensors are written in sorted key order, so equal contents
//! produce identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{Module, Param, Real};

pub const MAGIC: &[u8; 6] = b"CEMCD1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn from_array<T: Real>(a: &ArrayD<T>) -> Self {
        let values = a.iter().copied();
        let data = match T::DTYPE {
            0 => TensorData::F32(values.map(|v| v.as_f64() as f32).collect()),
            _ => TensorData::F64(values.map(Real::as_f64).collect()),
        };
        Self {
            shape: a.shape().to_vec(),
            data,
        }
    }

    pub fn to_array<T: Real>(&self) -> ArrayD<T> {
        let data: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(f64::from(x))).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), data).expect("record shape matches data")
    }

    fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, TensorRecord>,
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::checkpoint("invalid utf-8 string", "utf-8", "bytes"))
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.metadata.insert("kind".into(), kind.into());
        c
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").map(String::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::checkpoint(format!("missing metadata key '{key}'"), key, "nothing"))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::checkpoint(format!("bad metadata value for '{key}'"), key, raw))
    }

    /// Record every parameter and buffer of `module` under `prefix`.
    pub fn add_module<T: Real, M: Module<T> + ?Sized>(&mut self, prefix: &str, module: &M) {
        module.visit(prefix, &mut |name, p| {
            self.tensors.insert(name.to_string(), TensorRecord::from_array(&p.value));
        });
    }

    /// Record SGD momentum buffers as `velocity/<name>`.
    pub fn add_velocities<T: Real, M: Module<T> + ?Sized>(&mut self, prefix: &str, module: &M) {
        module.visit(prefix, &mut |name, p| {
            if p.trainable {
                self.tensors
                    .insert(format!("velocity/{name}"), TensorRecord::from_array(&p.velocity));
            }
        });
    }

    /// Copy tensors into `module`. Every tensor the module expects must be
    /// present with the expected shape; mismatches are reported together.
    pub fn load_module<T: Real, M: Module<T> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        self.check_module(prefix, module)?;
        module.visit_mut(prefix, &mut |name, p: &mut Param<T>| {
            p.value = self.tensors[name].to_array();
        });
        Ok(())
    }

    pub fn load_velocities<T: Real, M: Module<T> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut missing = Vec::new();
        module.visit_mut(prefix, &mut |name, p: &mut Param<T>| {
            if !p.trainable {
                return;
            }
            match self.tensors.get(&format!("velocity/{name}")) {
                Some(r) if r.shape == p.shape() => p.velocity = r.to_array(),
                _ => missing.push(name.to_string()),
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::checkpoint(
                "momentum buffers missing or mis-shaped",
                missing.join(", "),
                "absent",
            ))
        }
    }

    fn check_module<T: Real, M: Module<T> + ?Sized>(&self, prefix: &str, module: &M) -> Result<()> {
        let mut expected = Vec::new();
        let mut found = Vec::new();
        module.visit(prefix, &mut |name, p| match self.tensors.get(name) {
            Some(r) if r.shape == p.shape() && r.len() == p.len() => {}
            other => {
                expected.push(format!("{name}{:?}", p.shape()));
                found.push(match other {
                    Some(r) => format!("{name}{:?}", r.shape),
                    None => format!("{name} missing"),
                });
            }
        });
        if expected.is_empty() {
            Ok(())
        } else {
            Err(Error::checkpoint(
                "tensor shapes do not match the declared architecture",
                expected.join(", "),
                found.join(", "),
            ))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        write_u32(w, self.metadata.len() as u32)?;
        for (k, v) in &self.metadata {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        write_u32(w, self.tensors.len() as u32)?;
        for (name, rec) in &self.tensors {
            write_str(w, name)?;
            let dtype = match rec.data {
                TensorData::F32(_) => 0u8,
                TensorData::F64(_) => 1u8,
            };
            w.write_all(&[dtype])?;
            write_u32(w, rec.shape.len() as u32)?;
            for &d in &rec.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &rec.data {
                TensorData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::checkpoint(
                "not a checkpoint",
                "CEMCD1",
                String::from_utf8_lossy(&magic).into_owned(),
            ));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::checkpoint("unsupported version", VERSION.to_string(), version.to_string()));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            let v = read_str(r)?;
            ck.metadata.insert(k, v);
        }
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<io::Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype[0] {
                0 => {
                    let mut buf = vec![0u8; n * 4];
                    r.read_exact(&mut buf)?;
                    TensorData::F32(
                        buf.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    )
                }
                1 => {
                    let mut buf = vec![0u8; n * 8];
                    r.read_exact(&mut buf)?;
                    TensorData::F64(
                        buf.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    )
                }
                other => {
                    return Err(Error::checkpoint("unknown dtype", "0 or 1", other.to_string()));
                }
            };
            ck.tensors.insert(name, TensorRecord { shape, data });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
