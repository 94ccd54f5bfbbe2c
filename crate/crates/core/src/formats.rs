//! Prompt and voxel-label file formats (little-endian).
//!
//! ```text
//! prompts: "FUS3DPRM" | d u32 | count u32
//!          | per label: name length u32 | UTF-8 name | background u8 | d×f32
//! labels:  "FUS3DGT " | voxel_size f32 | count u64
//!          | per voxel (sorted by key): ix i32 | iy i32 | iz i32 | class u16
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::metrics::GroundTruthVolume;
use crate::query::PromptSet;
use crate::stream::{write_f32s, Counting};
use crate::types::VoxelKey;

pub const PROMPT_MAGIC: &[u8; 8] = b"FUS3DPRM";
pub const LABEL_MAGIC: &[u8; 8] = b"FUS3DGT ";

pub fn read_prompts<R: Read>(reader: R) -> Result<PromptSet> {
    let mut src = Counting::new(reader);
    src.magic(PROMPT_MAGIC)?;
    let d = src.u32("d")? as usize;
    let count = src.u32("count")?;
    if d == 0 {
        return Err(src.err("prompt dimension is zero"));
    }
    let (mut labels, mut embeddings, mut background) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..count {
        let len = src.u32("name length")? as usize;
        if len > 1 << 16 {
            return Err(src.err(format!("label name length {len} too large")));
        }
        let mut name = vec![0u8; len];
        let r = src.read_exact(&mut name);
        src.ctx(r, "label name")?;
        let name = String::from_utf8(name).map_err(|_| src.err("label name is not UTF-8"))?;
        let r = src.read_u8();
        let bg = src.ctx(r, "background flag")?;
        let emb = src.f32s(d, "prompt embedding")?;
        if emb.iter().any(|x| !x.is_finite()) {
            return Err(src.err(format!("non-finite embedding for label {name:?}")));
        }
        labels.push(name);
        background.push(bg != 0);
        embeddings.push(emb);
    }
    PromptSet::new(labels, embeddings, background)
}

pub fn write_prompts<W: Write>(mut out: W, prompts: &PromptSet) -> Result<()> {
    let d = prompts.dim().unwrap_or(0);
    out.write_all(PROMPT_MAGIC)?;
    out.write_u32::<LE>(d as u32)?;
    out.write_u32::<LE>(prompts.len() as u32)?;
    for i in 0..prompts.len() {
        let name = prompts.labels[i].as_bytes();
        out.write_u32::<LE>(name.len() as u32)?;
        out.write_all(name)?;
        out.write_u8(prompts.background[i] as u8)?;
        write_f32s(&mut out, &prompts.embeddings[i])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_labels<R: Read>(reader: R) -> Result<GroundTruthVolume> {
    let mut src = Counting::new(reader);
    src.magic(LABEL_MAGIC)?;
    let r = src.read_f32::<LE>();
    let voxel_size = src.ctx(r, "voxel size")? as f64;
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(src.err(format!("invalid voxel size {voxel_size}")));
    }
    let count = src.u64("count")?;
    let mut labels = BTreeMap::new();
    for _ in 0..count {
        let mut k = [0i32; 3];
        let r = src.read_i32_into::<LE>(&mut k);
        src.ctx(r, "voxel key")?;
        let r = src.read_u16::<LE>();
        let c = src.ctx(r, "class")?;
        let key = VoxelKey::new(k[0] as i64, k[1] as i64, k[2] as i64);
        if labels.insert(key, c).is_some() {
            return Err(src.err(format!("duplicate voxel {key}")));
        }
    }
    Ok(GroundTruthVolume { voxel_size, labels })
}

pub fn write_labels<W: Write>(mut out: W, voxel_size: f64, labels: &BTreeMap<VoxelKey, u16>) -> Result<()> {
    out.write_all(LABEL_MAGIC)?;
    out.write_f32::<LE>(voxel_size as f32)?;
    out.write_u64::<LE>(labels.len() as u64)?;
    for (k, &c) in labels {
        for v in [k.ix, k.iy, k.iz] {
            let v = i32::try_from(v).map_err(|_| Error::InvalidInput(format!("voxel index {v} exceeds i32")))?;
            out.write_i32::<LE>(v)?;
        }
        out.write_u16::<LE>(c)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_prompts(path: &Path) -> Result<PromptSet> {
    read_prompts(BufReader::new(File::open(path)?))
}

pub fn save_prompts(path: &Path, prompts: &PromptSet) -> Result<()> {
    write_prompts(BufWriter::new(File::create(path)?), prompts)
}

pub fn load_labels(path: &Path) -> Result<GroundTruthVolume> {
    read_labels(BufReader::new(File::open(path)?))
}

pub fn save_labels(path: &Path, voxel_size: f64, labels: &BTreeMap<VoxelKey, u16>) -> Result<()> {
    write_labels(BufWriter::new(File::create(path)?), voxel_size, labels)
}
