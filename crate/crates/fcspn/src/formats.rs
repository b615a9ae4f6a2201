//! Little-endian binary containers.
//!
//! | magic  | layout                                                                  |
//! |--------|-------------------------------------------------------------------------|
//! | `TSR1` | u8 rank, u32 extents, f32 payload (row-major)                           |
//! | `HSC1` | u32 bands, rows, cols, f32 payload (band-major, row-major)              |
//! | `HSL1` | u32 rows, cols, classes, u16 ids (row-major), class names               |
//! | `HSS1` | u32 rows, cols, u8 cells (0 unlabeled, 1 train, 2 test)                 |
//! | `FCSP` | u32 version, model config, class names, u32 count, named TSR1 records  |
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use fcspn_core::data::{HsiCube, LabelMap, SplitCell, SplitMask};
use fcspn_core::model::{Fcspn, ModelConfig, ModelParams, ParamEntry, ParamKind};
use fcspn_core::Tensor;

use crate::error::{io_err, FormatError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TSR1";
pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
pub const LABELS_MAGIC: &[u8; 4] = b"HSL1";
pub const SPLIT_MAGIC: &[u8; 4] = b"HSS1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCSP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bounds-checked cursor that reports offsets in errors.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let rest = self.buf.len() - self.pos;
        if n > rest {
            return Err(FormatError::Truncated {
                what,
                offset: self.pos,
                needed: n - rest,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &'static [u8; 4]) -> Result<()> {
        let offset = self.pos;
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: std::str::from_utf8(expected).unwrap_or("?"),
                found: String::from_utf8_lossy(found).into_owned(),
                offset,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let offset = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| FormatError::Invalid(format!("{what} at offset {offset} is not UTF-8")))
    }

    /// `count` elements of `width` bytes, with the byte size checked for overflow.
    fn array(&mut self, extents: &[u32], width: usize, what: &'static str) -> Result<&'a [u8]> {
        let bytes = extents
            .iter()
            .try_fold(width, |acc, &e| acc.checked_mul(e as usize))
            .ok_or_else(|| FormatError::ExtentOverflow {
                extents: extents.iter().map(|&e| e as u64).collect(),
            })?;
        self.take(bytes, what)
    }

    pub fn f32s(&mut self, extents: &[u32], what: &'static str) -> Result<Vec<f64>> {
        let raw = self.array(extents, 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn u16s(&mut self, extents: &[u32], what: &'static str) -> Result<Vec<u16>> {
        let raw = self.array(extents, 2, what)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| FormatError::Invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn nonzero(extents: &[u32]) -> Result<()> {
    if extents.contains(&0) {
        return Err(FormatError::Invalid(format!("zero extent in {extents:?}")));
    }
    Ok(())
}

pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    out.extend_from_slice(TENSOR_MAGIC);
    let rank = u8::try_from(t.rank()).map_err(|_| FormatError::Invalid("rank exceeds 255".into()))?;
    out.push(rank);
    for &e in t.shape() {
        put_u32(out, e)?;
    }
    put_f32s(out, t.data());
    Ok(())
}

pub fn read_tensor(r: &mut Reader) -> Result<Tensor> {
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u8("tensor rank")? as usize;
    let extents = (0..rank).map(|_| r.u32("tensor extent")).collect::<Result<Vec<_>>>()?;
    nonzero(&extents)?;
    let data = r.f32s(&extents, "tensor payload")?;
    let shape: Vec<usize> = extents.iter().map(|&e| e as usize).collect();
    Ok(Tensor::from_vec(&shape, data)?)
}

pub fn encode_cube(cube: &HsiCube) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + cube.values().len() * 4);
    out.extend_from_slice(CUBE_MAGIC);
    for e in [cube.bands(), cube.rows(), cube.cols()] {
        put_u32(&mut out, e)?;
    }
    put_f32s(&mut out, cube.values().data());
    Ok(out)
}

pub fn decode_cube(buf: &[u8]) -> Result<HsiCube> {
    let mut r = Reader::new(buf);
    r.magic(CUBE_MAGIC)?;
    let extents = [r.u32("bands")?, r.u32("rows")?, r.u32("cols")?];
    nonzero(&extents)?;
    let data = r.f32s(&extents, "cube payload")?;
    r.finish()?;
    Ok(HsiCube::from_vec(
        extents[0] as usize,
        extents[1] as usize,
        extents[2] as usize,
        data,
    )?)
}

pub fn encode_labels(labels: &LabelMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + labels.ids().len() * 2);
    out.extend_from_slice(LABELS_MAGIC);
    for e in [labels.rows(), labels.cols(), labels.num_classes()] {
        put_u32(&mut out, e)?;
    }
    for &id in labels.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for name in labels.class_names() {
        put_string(&mut out, name)?;
    }
    Ok(out)
}

pub fn decode_labels(buf: &[u8]) -> Result<LabelMap> {
    let mut r = Reader::new(buf);
    r.magic(LABELS_MAGIC)?;
    let (rows, cols, classes) = (r.u32("rows")?, r.u32("cols")?, r.u32("classes")?);
    nonzero(&[rows, cols])?;
    let ids = r.u16s(&[rows, cols], "label payload")?;
    let names = (0..classes)
        .map(|_| r.string("class name"))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(LabelMap::new(rows as usize, cols as usize, ids, names)?)
}

pub fn encode_split(split: &SplitMask) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + split.cells().len());
    out.extend_from_slice(SPLIT_MAGIC);
    put_u32(&mut out, split.rows())?;
    put_u32(&mut out, split.cols())?;
    out.extend(split.cells().iter().map(|c| match c {
        SplitCell::Unlabeled => 0u8,
        SplitCell::Train => 1,
        SplitCell::Test => 2,
    }));
    Ok(out)
}

pub fn decode_split(buf: &[u8]) -> Result<SplitMask> {
    let mut r = Reader::new(buf);
    r.magic(SPLIT_MAGIC)?;
    let (rows, cols) = (r.u32("rows")?, r.u32("cols")?);
    nonzero(&[rows, cols])?;
    let start = r.offset();
    let raw = r.array(&[rows, cols], 1, "split payload")?;
    let cells = raw
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(SplitCell::Unlabeled),
            1 => Ok(SplitCell::Train),
            2 => Ok(SplitCell::Test),
            other => Err(FormatError::Invalid(format!(
                "split cell {other} at offset {} is not 0, 1 or 2",
                start + i
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(SplitMask::new(rows as usize, cols as usize, cells)?)
}

/// Trained network state plus the class names it predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub params: ModelParams,
}

impl Checkpoint {
    /// Rebuilds the network and checks the stored arrays against its layout.
    pub fn network(&self) -> Result<Fcspn> {
        let net = Fcspn::new(self.config)?;
        self.params.validate(net.layout())?;
        Ok(net)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let c = &ckpt.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
    for v in [c.in_bands, c.num_classes, c.base_channels, c.dsr_per_stage] {
        put_u32(&mut out, v)?;
    }
    out.push(c.attention_enabled as u8);
    put_u32(&mut out, c.cspn_steps)?;
    put_u32(&mut out, ckpt.class_names.len())?;
    for name in &ckpt.class_names {
        put_string(&mut out, name)?;
    }
    put_u32(&mut out, ckpt.params.len())?;
    for e in ckpt.params.entries() {
        put_string(&mut out, &e.path)?;
        out.push(e.kind.code());
        write_tensor(&mut out, &e.tensor)?;
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            what: "checkpoint",
            version,
        });
    }
    let mut config = ModelConfig::new(r.u32("in_bands")? as usize, r.u32("num_classes")? as usize);
    config.base_channels = r.u32("base_channels")? as usize;
    config.dsr_per_stage = r.u32("dsr_per_stage")? as usize;
    config.attention_enabled = match r.u8("attention flag")? {
        0 => false,
        1 => true,
        v => return Err(FormatError::Invalid(format!("attention flag {v} is not 0 or 1"))),
    };
    config.cspn_steps = r.u32("cspn_steps")? as usize;
    let names = r.u32("class count")?;
    let class_names = (0..names).map(|_| r.string("class name")).collect::<Result<Vec<_>>>()?;
    let count = r.u32("array count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let path = r.string("array path")?;
        let offset = r.offset();
        let code = r.u8("array kind")?;
        let kind = ParamKind::from_code(code)
            .ok_or_else(|| FormatError::Invalid(format!("unknown array kind {code} at offset {offset}")))?;
        let tensor = read_tensor(&mut r)?;
        entries.push(ParamEntry { path, kind, tensor });
    }
    r.finish()?;
    let ckpt = Checkpoint {
        config,
        class_names,
        params: ModelParams::from_entries(entries)?,
    };
    if ckpt.class_names.len() != config.num_classes {
        return Err(FormatError::Invalid(format!(
            "{} class names for {} classes",
            ckpt.class_names.len(),
            config.num_classes
        )));
    }
    ckpt.network()?;
    Ok(ckpt)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_cube(path: &Path) -> Result<HsiCube> {
    decode_cube(&read_file(path)?)
}

pub fn save_cube(cube: &HsiCube, path: &Path) -> Result<()> {
    write_file(path, &encode_cube(cube)?)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(&read_file(path)?)
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    write_file(path, &encode_labels(labels)?)
}

pub fn load_split(path: &Path) -> Result<SplitMask> {
    decode_split(&read_file(path)?)
}

pub fn save_split(split: &SplitMask, path: &Path) -> Result<()> {
    write_file(path, &encode_split(split)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(ckpt)?)
}
