//! Checkpoint files: magic "AURC", format version, the config hash the
//! parameters were trained under, a JSON metadata blob (trainer state), and
//! named f32 tensors (parameters and optimizer moments).

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AURC";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }
}

fn write_string(out: &mut impl Write, s: &str) -> Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(input: &mut impl Read) -> Result<String> {
    let len = input.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf-8: {e}")))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    write_string(&mut out, &ckpt.config_hash)?;
    write_string(&mut out, &serde_json::to_string(&ckpt.meta)?)?;
    out.write_u32::<LittleEndian>(ckpt.tensors.len() as u32)?;
    for (name, tensor) in &ckpt.tensors {
        write_string(&mut out, name)?;
        out.write_u32::<LittleEndian>(tensor.ndim() as u32)?;
        for &d in tensor.shape() {
            out.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in tensor.iter() {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a checkpoint, validating magic and version. `expect_hash` rejects
/// parameters written under a different configuration.
pub fn read_checkpoint(path: &Path, expect_hash: Option<&str>) -> Result<Checkpoint> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_hash = read_string(&mut input)?;
    if let Some(expect) = expect_hash {
        if config_hash != expect {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {config_hash}, run {expect}"
            )));
        }
    }
    let meta: serde_json::Value = serde_json::from_str(&read_string(&mut input)?)?;
    let count = input.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_string(&mut input)?;
        let rank = input.read_u32::<LittleEndian>()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(input.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = dims.iter().product();
        if n > 1 << 28 {
            return Err(Error::Checkpoint(format!("tensor {name}: {n} elements")));
        }
        let mut data = vec![0f32; n];
        for v in data.iter_mut() {
            *v = input.read_f32::<LittleEndian>()?;
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok(Checkpoint {
        config_hash,
        meta,
        tensors,
    })
}
