//! `SGDCKPT1` checkpoint files.
//!
//! Little-endian. Header: magic, version, architecture, channel mode, input
//! shape, init seed and dims; then the named block table; then the raw
//! parameter values. See `docs/formats.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{build_model, Architecture, InputShape, ModelDims, ModelParameters, ParamBlock};
use crate::error::{Error, Result};
use crate::sim::sensor::ChannelMode;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGDCKPT1";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(m: &ModelParameters, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u16::<LE>(CHECKPOINT_VERSION)?;
    w.write_u8(m.arch.code())?;
    w.write_u8(m.input.mode.code())?;
    w.write_u16::<LE>(m.input.k as u16)?;
    w.write_u16::<LE>(m.input.grid_h as u16)?;
    w.write_u16::<LE>(m.input.grid_w as u16)?;
    w.write_u64::<LE>(m.seed)?;
    let d = &m.dims;
    w.write_u16::<LE>(d.conv_channels.len() as u16)?;
    for &c in &d.conv_channels {
        w.write_u32::<LE>(c as u32)?;
    }
    for v in [d.feature, d.meas_hidden, d.fusion, d.head_hidden] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_f64::<LE>(d.speed_scale)?;
    w.write_u32::<LE>(m.blocks.len() as u32)?;
    for b in &m.blocks {
        w.write_u16::<LE>(b.name.len() as u16)?;
        w.write_all(b.name.as_bytes())?;
        w.write_u8(b.shape.len() as u8)?;
        for &s in &b.shape {
            w.write_u32::<LE>(s as u32)?;
        }
        w.write_u64::<LE>(b.offset as u64)?;
    }
    w.write_u64::<LE>(m.values.len() as u64)?;
    for &v in &m.values {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelParameters> {
    let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.read_u16::<LE>()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let arch = Architecture::from_code(r.read_u8()?)?;
    let mode = ChannelMode::from_code(r.read_u8()?)?;
    let input = InputShape {
        k: r.read_u16::<LE>()? as usize,
        mode,
        grid_h: r.read_u16::<LE>()? as usize,
        grid_w: r.read_u16::<LE>()? as usize,
    };
    let seed = r.read_u64::<LE>()?;
    let n_conv = r.read_u16::<LE>()? as usize;
    let conv_channels = (0..n_conv)
        .map(|_| r.read_u32::<LE>().map(|c| c as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let mut f = [0usize; 4];
    for v in &mut f {
        *v = r.read_u32::<LE>()? as usize;
    }
    let dims = ModelDims {
        conv_channels,
        feature: f[0],
        meas_hidden: f[1],
        fusion: f[2],
        head_hidden: f[3],
        speed_scale: r.read_f64::<LE>()?,
    };
    let n_blocks = r.read_u32::<LE>()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks.min(1024));
    for _ in 0..n_blocks {
        let len = r.read_u16::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let ndim = r.read_u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.read_u32::<LE>().map(|s| s as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        blocks.push(ParamBlock {
            name: String::from_utf8(name).map_err(|_| bad("block name not UTF-8".into()))?,
            shape,
            offset: r.read_u64::<LE>()? as usize,
        });
    }
    let mut model = build_model(arch, input, &dims, seed)?;
    if model.blocks != blocks {
        return Err(bad("block table does not match the architecture".into()));
    }
    let n = r.read_u64::<LE>()? as usize;
    if n != model.values.len() {
        return Err(bad(format!(
            "expected {} values, found {n}",
            model.values.len()
        )));
    }
    for v in &mut model.values {
        *v = r.read_f64::<LE>()?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    model.rebuild_graph();
    Ok(model)
}

impl ModelParameters {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 8 + 1024);
        write_checkpoint(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_checkpoint(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_checkpoint(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SubgoalAngle;
    use crate::model::forward_input;

    #[test]
    fn bytes_round_trip_exactly() {
        let input = InputShape {
            k: 2,
            mode: ChannelMode::Asd,
            grid_h: 8,
            grid_w: 8,
        };
        let dims = ModelDims {
            conv_channels: vec![3, 5],
            ..ModelDims::default()
        };
        for arch in Architecture::ALL {
            let m = build_model(arch, input, &dims, 11).unwrap();
            let back = ModelParameters::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back, m);
            let x: Vec<f64> = (0..input.len()).map(|i| (i % 13) as f64).collect();
            let a = forward_input(&m, &x, 2.0, SubgoalAngle::wrapped(-20.0)).unwrap();
            let b = forward_input(&back, &x, 2.0, SubgoalAngle::wrapped(-20.0)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let input = InputShape {
            k: 1,
            mode: ChannelMode::As,
            grid_h: 4,
            grid_w: 4,
        };
        let m = build_model(Architecture::AngleInput, input, &ModelDims::default(), 1).unwrap();
        let mut bytes = m.to_bytes();
        assert!(ModelParameters::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(
            ModelParameters::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }
}
