//! Sectioned binary map snapshot (little-endian).
//!
//! ```text
//! "FUS3DMAP" | version u32 | d u32 | sections…
//! section:  tag [u8; 4] | payload length u64 | payload
//!   CONF  key = value text of the map configuration
//!   DENS  count u64 | per voxel: ix iy iz i64 | weight f64 | d×f32
//!   IVOX  count u64 | per voxel: ix iy iz i64 | n u8 | n × (id u32 | count f64)
//!   INST  count u32 | per instance: id u32 | weight f64 | d×f32
//!         | has_fused u8 | [d×f32] | evidence f64
//!   FDNS  (optional) count u64 | per voxel: ix iy iz i64 | d×f32
//! ```
//!
//! Voxels are written in key order, so save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::config::MapConfig;
use crate::dense::DenseLayer;
use crate::error::Result;
use crate::instance::{Hypothesis, InstanceLayer, RestoredInstance};
use crate::query::MapView;
use crate::stream::{write_f32s, Counting};
use crate::types::VoxelKey;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"FUS3DMAP";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct MapSnapshot {
    pub config: MapConfig,
    pub dense: DenseLayer,
    pub instances: InstanceLayer,
    pub fused_dense: Option<BTreeMap<VoxelKey, Vec<f32>>>,
}

fn write_key<W: Write>(w: &mut W, k: &VoxelKey) -> std::io::Result<()> {
    w.write_i64::<LE>(k.ix)?;
    w.write_i64::<LE>(k.iy)?;
    w.write_i64::<LE>(k.iz)
}

fn section<W: Write>(out: &mut W, tag: &[u8; 4], payload: &[u8]) -> Result<()> {
    out.write_all(tag)?;
    out.write_u64::<LE>(payload.len() as u64)?;
    out.write_all(payload)?;
    Ok(())
}

impl MapSnapshot {
    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn view(&self) -> MapView<'_> {
        MapView { dense: &self.dense, instances: &self.instances, fused_dense: self.fused_dense.as_ref() }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_u32::<LE>(SNAPSHOT_VERSION)?;
        out.write_u32::<LE>(d as u32)?;

        section(&mut out, b"CONF", self.config.to_kv().as_bytes())?;

        let mut p = Vec::new();
        let keys = self.dense.sorted_keys();
        p.write_u64::<LE>(keys.len() as u64)?;
        for k in &keys {
            let v = self.dense.get(k).expect("sorted key present");
            write_key(&mut p, k)?;
            p.write_f64::<LE>(v.weight)?;
            write_f32s(&mut p, v.embedding)?;
        }
        section(&mut out, b"DENS", &p)?;

        let mut p = Vec::new();
        let keys = self.instances.sorted_voxel_keys();
        p.write_u64::<LE>(keys.len() as u64)?;
        for k in &keys {
            let hyps = self.instances.hypotheses_at(k);
            write_key(&mut p, k)?;
            p.write_u8(hyps.len() as u8)?;
            for h in hyps {
                p.write_u32::<LE>(h.instance_id)?;
                p.write_f64::<LE>(h.count)?;
            }
        }
        section(&mut out, b"IVOX", &p)?;

        let mut p = Vec::new();
        p.write_u32::<LE>(self.instances.instance_count() as u32)?;
        for r in self.instances.instances() {
            p.write_u32::<LE>(r.id)?;
            p.write_f64::<LE>(r.weight)?;
            write_f32s(&mut p, &r.embedding)?;
            match &r.fused {
                Some(f) => {
                    p.write_u8(1)?;
                    write_f32s(&mut p, f)?;
                }
                None => p.write_u8(0)?,
            }
            p.write_f64::<LE>(r.evidence_score)?;
        }
        section(&mut out, b"INST", &p)?;

        if let Some(fd) = &self.fused_dense {
            let mut p = Vec::new();
            p.write_u64::<LE>(fd.len() as u64)?;
            for (k, e) in fd {
                write_key(&mut p, k)?;
                write_f32s(&mut p, e)?;
            }
            section(&mut out, b"FDNS", &p)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to memory");
        v
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut src = Counting::new(reader);
        src.magic(SNAPSHOT_MAGIC)?;
        let version = src.u32("version")?;
        if version != SNAPSHOT_VERSION {
            return Err(src.err(format!("unsupported snapshot version {version}")));
        }
        let d = src.u32("d")? as usize;

        let mut config = None;
        let mut dense = None;
        let mut voxels: Option<Vec<(VoxelKey, Vec<Hypothesis>)>> = None;
        let mut records = None;
        let mut fused_dense = None;
        loop {
            let mut tag = [0u8; 4];
            if !src.fill_or_eof(&mut tag)? {
                break;
            }
            let len = src.u64("section length")?;
            let start = src.offset;
            match &tag {
                b"CONF" => {
                    let mut text = vec![0u8; len as usize];
                    let r = src.read_exact(&mut text);
                    src.ctx(r, "config text")?;
                    let text = String::from_utf8(text).map_err(|_| src.err("config is not UTF-8"))?;
                    let (c, _) = MapConfig::parse_kv(&text).map_err(|e| src.err(e.to_string()))?;
                    if c.embedding_dim != d {
                        return Err(src.err(format!("config dimension {} differs from header {d}", c.embedding_dim)));
                    }
                    config = Some(c);
                }
                b"DENS" => {
                    let c = config.as_ref().ok_or_else(|| src.err("DENS before CONF"))?;
                    let mut layer = DenseLayer::new(c.voxel_size, d);
                    let n = src.u64("dense count")?;
                    for _ in 0..n {
                        let k = read_key(&mut src)?;
                        let r = src.read_f64::<LE>();
                        let w = src.ctx(r, "dense weight")?;
                        let e = src.f32s(d, "dense embedding")?;
                        layer.insert_raw(k, &e, w)?;
                    }
                    dense = Some(layer);
                }
                b"IVOX" => {
                    let n = src.u64("instance voxel count")?;
                    let mut v = Vec::with_capacity(n.min(1 << 20) as usize);
                    for _ in 0..n {
                        let k = read_key(&mut src)?;
                        let r = src.read_u8();
                        let m = src.ctx(r, "hypothesis count")?;
                        let mut hyps = Vec::with_capacity(m as usize);
                        for _ in 0..m {
                            let instance_id = src.u32("instance id")?;
                            let r = src.read_f64::<LE>();
                            let count = src.ctx(r, "hypothesis count")?;
                            hyps.push(Hypothesis { instance_id, count });
                        }
                        v.push((k, hyps));
                    }
                    voxels = Some(v);
                }
                b"INST" => {
                    let n = src.u32("instance count")?;
                    let mut v = Vec::with_capacity(n.min(1 << 20) as usize);
                    for _ in 0..n {
                        let id = src.u32("instance id")?;
                        let r = src.read_f64::<LE>();
                        let weight = src.ctx(r, "instance weight")?;
                        let embedding = src.f32s(d, "instance embedding")?;
                        let r = src.read_u8();
                        let fused = match src.ctx(r, "fused flag")? {
                            0 => None,
                            _ => Some(src.f32s(d, "fused embedding")?),
                        };
                        let r = src.read_f64::<LE>();
                        let evidence_score = src.ctx(r, "evidence score")?;
                        v.push(RestoredInstance { id, embedding, weight, fused, evidence_score });
                    }
                    records = Some(v);
                }
                b"FDNS" => {
                    let n = src.u64("fused dense count")?;
                    let mut m = BTreeMap::new();
                    for _ in 0..n {
                        let k = read_key(&mut src)?;
                        m.insert(k, src.f32s(d, "fused dense embedding")?);
                    }
                    fused_dense = Some(m);
                }
                other => return Err(src.err(format!("unknown section {:?}", String::from_utf8_lossy(other)))),
            }
            if src.offset - start != len {
                return Err(src.err(format!("section {:?} length mismatch", String::from_utf8_lossy(&tag))));
            }
        }
        let config = config.ok_or_else(|| src.err("missing CONF section"))?;
        let dense = dense.ok_or_else(|| src.err("missing DENS section"))?;
        let instances = InstanceLayer::restore(
            config.voxel_size,
            d,
            config.max_hypotheses,
            voxels.ok_or_else(|| src.err("missing IVOX section"))?,
            records.ok_or_else(|| src.err("missing INST section"))?,
        )
        .map_err(|e| src.err(e.to_string()))?;
        Ok(Self { config, dense, instances, fused_dense })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn read_key<R: Read>(src: &mut Counting<R>) -> Result<VoxelKey> {
    let mut k = [0i64; 3];
    let r = src.read_i64_into::<LE>(&mut k);
    src.ctx(r, "voxel key")?;
    Ok(VoxelKey::new(k[0], k[1], k[2]))
}
