//! Binary flow-field files: magic "WFLO", u32 height, u32 width, then
//! height*width little-endian f32 (u, v) pairs row-major.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f32>,
    pub v: Array2<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            u: Array2::zeros((h, w)),
            v: Array2::zeros((h, w)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.shape()[0], self.u.shape()[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.u.shape() != self.v.shape() {
            return Err(Error::Shape(format!(
                "flow components {:?} vs {:?}",
                self.u.shape(),
                self.v.shape()
            )));
        }
        if !self.u.iter().chain(self.v.iter()).all(|x| x.is_finite()) {
            return Err(Error::Data("flow field contains non-finite values".into()));
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"WFLO";

pub fn write_wflo(path: &Path, flow: &FlowField) -> Result<()> {
    flow.validate()?;
    let (h, w) = flow.shape();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(w as u32)?;
    for y in 0..h {
        for x in 0..w {
            out.write_f32::<LittleEndian>(flow.u[[y, x]])?;
            out.write_f32::<LittleEndian>(flow.v[[y, x]])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_wflo(path: &Path) -> Result<FlowField> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad flow magic {:?}",
            path.display(),
            magic
        )));
    }
    let h = input.read_u32::<LittleEndian>()? as usize;
    let w = input.read_u32::<LittleEndian>()? as usize;
    if h == 0 || w == 0 || h.saturating_mul(w) > 1 << 28 {
        return Err(Error::Data(format!(
            "{}: implausible flow dims {h}x{w}",
            path.display()
        )));
    }
    let mut flow = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            flow.u[[y, x]] = input.read_f32::<LittleEndian>()?;
            flow.v[[y, x]] = input.read_f32::<LittleEndian>()?;
        }
    }
    flow.validate()?;
    Ok(flow)
}
