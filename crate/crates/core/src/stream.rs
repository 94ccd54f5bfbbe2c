//! Binary frame-stream format (little-endian).
//!
//! ```text
//! header:  "FUS3DSTR" | version u32 | d u32 | H u32 | W u32 | patch_size u32
//!          | fx f32 | fy f32 | cx f32 | cy f32 | flags u32 (bit0: weights)
//! frame:   frame_index u64 | pose 12×f64 (row-major 3×4)
//!          | depth H·W f32 | patches Hp·Wp·d f32 | [weights Hp·Wp f32]
//!          | segment count u32
//!          | per segment: run count u32 | runs u32… | crop embedding d×f32
//! ```

use std::io::{self, Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::frames::{FrameGeometry, FrameRecord, SegmentProposal};
use crate::mask::Mask;
use crate::types::{CameraIntrinsics, Pose};

pub const STREAM_MAGIC: &[u8; 8] = b"FUS3DSTR";
pub const STREAM_VERSION: u32 = 1;
const FLAG_WEIGHTS: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamHeader {
    pub version: u32,
    pub geometry: FrameGeometry,
    pub intrinsics: CameraIntrinsics,
    pub has_weights: bool,
}

impl StreamHeader {
    pub fn new(intrinsics: CameraIntrinsics, patch_size: u32, dim: usize, has_weights: bool) -> Self {
        Self {
            version: STREAM_VERSION,
            geometry: FrameGeometry { width: intrinsics.width, height: intrinsics.height, patch_size, dim },
            intrinsics,
            has_weights,
        }
    }
}

/// Reader adapter that tracks the byte offset for error reporting.
pub(crate) struct Counting<R> {
    inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

impl<R: Read> Counting<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.offset, message: message.into() }
    }

    /// Maps I/O failures (including truncation) to a parse error at the
    /// current offset.
    pub(crate) fn ctx<T>(&self, r: io::Result<T>, what: &str) -> Result<T> {
        r.map_err(|e| self.err(format!("reading {what}: {e}")))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let r = self.read_u32::<LE>();
        self.ctx(r, what)
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let r = self.read_u64::<LE>();
        self.ctx(r, what)
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut v = vec![0.0f32; n];
        let r = self.read_f32_into::<LE>(&mut v);
        self.ctx(r, what)?;
        Ok(v)
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0f64; n];
        let r = self.read_f64_into::<LE>(&mut v);
        self.ctx(r, what)?;
        Ok(v)
    }

    pub(crate) fn magic(&mut self, expect: &[u8; 8]) -> Result<()> {
        let mut m = [0u8; 8];
        let r = self.read_exact(&mut m);
        self.ctx(r, "magic")?;
        if &m != expect {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(expect)),
            });
        }
        Ok(())
    }

    /// Fills `buf`; `Ok(false)` on a clean EOF before the first byte.
    pub(crate) fn fill_or_eof(&mut self, buf: &mut [u8]) -> Result<bool> {
        let mut got = 0;
        while got < buf.len() {
            match self.read(&mut buf[got..]) {
                Ok(0) if got == 0 => return Ok(false),
                Ok(0) => return Err(self.err("truncated record")),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(self.err(e.to_string())),
            }
        }
        Ok(true)
    }
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, v: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub struct StreamReader<R> {
    src: Counting<R>,
    header: StreamHeader,
}

impl<R: Read> StreamReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut src = Counting::new(reader);
        src.magic(STREAM_MAGIC)?;
        let version = src.u32("version")?;
        if version != STREAM_VERSION {
            return Err(src.err(format!("unsupported stream version {version}")));
        }
        let dim = src.u32("d")? as usize;
        let height = src.u32("H")?;
        let width = src.u32("W")?;
        let patch_size = src.u32("patch_size")?;
        let k = src.f32s(4, "intrinsics")?;
        let flags = src.u32("flags")?;
        if dim == 0 || width == 0 || height == 0 || patch_size == 0 {
            return Err(src.err("zero-sized dimension in header"));
        }
        let intrinsics = CameraIntrinsics::new(k[0], k[1], k[2], k[3], width, height)
            .map_err(|e| src.err(e.to_string()))?;
        let header = StreamHeader {
            version,
            geometry: FrameGeometry { width, height, patch_size, dim },
            intrinsics,
            has_weights: flags & FLAG_WEIGHTS != 0,
        };
        Ok(Self { src, header })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn offset(&self) -> u64 {
        self.src.offset
    }

    /// Next frame, or `None` at a clean end of stream.
    pub fn next_frame(&mut self) -> Result<Option<FrameRecord>> {
        let start = self.src.offset;
        let mut idx = [0u8; 8];
        if !self.src.fill_or_eof(&mut idx)? {
            return Ok(None);
        }
        let g = self.header.geometry;
        let frame_index = u64::from_le_bytes(idx);
        let m: [f64; 12] = self.src.f64s(12, "pose")?.try_into().expect("12 values");
        let pose = Pose::from_row_major(m).map_err(|e| Error::Parse { offset: start, message: e.to_string() })?;
        let depth = self.src.f32s(g.pixel_count(), "depth")?;
        let patches = self.src.f32s(g.patch_count() * g.dim, "patch grid")?;
        let patch_weights = if self.header.has_weights {
            Some(self.src.f32s(g.patch_count(), "patch weights")?)
        } else {
            None
        };
        let nseg = self.src.u32("segment count")?;
        let mut segments = Vec::with_capacity(nseg.min(1024) as usize);
        for _ in 0..nseg {
            let nruns = self.src.u32("run count")? as usize;
            if nruns > g.pixel_count() + 1 {
                return Err(self.src.err(format!("run count {nruns} exceeds pixel count")));
            }
            let mut runs = vec![0u32; nruns];
            let r = self.src.read_u32_into::<LE>(&mut runs);
            self.src.ctx(r, "mask runs")?;
            let mask = Mask::from_runs(g.width, g.height, &runs).map_err(|e| self.src.err(e.to_string()))?;
            let crop = self.src.f32s(g.dim, "crop embedding")?;
            segments.push(SegmentProposal::new(mask, crop));
        }
        let frame = FrameRecord { frame_index, geometry: g, pose, depth, patches, patch_weights, segments };
        frame.validate().map_err(|e| Error::Parse { offset: start, message: e.to_string() })?;
        Ok(Some(frame))
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<FrameRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

pub struct StreamWriter<W> {
    out: W,
    header: StreamHeader,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut out: W, header: StreamHeader) -> Result<Self> {
        let g = &header.geometry;
        let k = &header.intrinsics;
        out.write_all(STREAM_MAGIC)?;
        out.write_u32::<LE>(header.version)?;
        out.write_u32::<LE>(g.dim as u32)?;
        out.write_u32::<LE>(g.height)?;
        out.write_u32::<LE>(g.width)?;
        out.write_u32::<LE>(g.patch_size)?;
        write_f32s(&mut out, &[k.fx, k.fy, k.cx, k.cy])?;
        out.write_u32::<LE>(if header.has_weights { FLAG_WEIGHTS } else { 0 })?;
        Ok(Self { out, header })
    }

    pub fn write_frame(&mut self, frame: &FrameRecord) -> Result<()> {
        if frame.geometry != self.header.geometry {
            return Err(Error::InvalidInput("frame geometry differs from stream header".into()));
        }
        if frame.patch_weights.is_some() != self.header.has_weights {
            return Err(Error::InvalidInput("patch weight presence differs from stream header".into()));
        }
        frame.validate()?;
        let o = &mut self.out;
        o.write_u64::<LE>(frame.frame_index)?;
        for v in frame.pose.to_row_major() {
            o.write_f64::<LE>(v)?;
        }
        write_f32s(o, &frame.depth)?;
        write_f32s(o, &frame.patches)?;
        if let Some(w) = &frame.patch_weights {
            write_f32s(o, w)?;
        }
        o.write_u32::<LE>(frame.segments.len() as u32)?;
        for s in &frame.segments {
            let runs = s.mask.to_runs();
            o.write_u32::<LE>(runs.len() as u32)?;
            for r in runs {
                o.write_u32::<LE>(r)?;
            }
            write_f32s(o, &s.crop_embedding)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
