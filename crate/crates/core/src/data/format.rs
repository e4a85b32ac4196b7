//! `ALDS` dataset container, little-endian:
//!
//! ```text
//! "ALDS" | version: u32 | header_len: u32 | header: utf8 JSON
//! scenes x { body_len: u64 | body }
//! body   = scene_id: u64 | flags: u8 (1 map, 2 scene feature) | [map] | [scene feature]
//!          | n_objects: u32 | n_objects x object
//! object = object_id: u64 | flags: u8 (1 feature, 2 ground truth, 4 val split)
//!          | box: f64 x 7 | label | [feature]
//! label  = 0u8 class: u32 | 1u8 name_len: u32 name: utf8
//! tensor = rank: u32 | dims: u64 x rank | data: f64 x prod(dims)
//! ```
//!
//! The header JSON is also written next to the file as `<file>.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{
    count_scenes, DataError, DatasetHeader, Label, ObjectRecord, Result, SceneRecord, Split,
};
use crate::model::Box7;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"ALDS";
pub const DATASET_VERSION: u32 = 1;

const MAX_HEADER: u32 = 1 << 24;
const MAX_RANK: u32 = 4;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_scene(s: &SceneRecord) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&s.scene_id.to_le_bytes());
    b.push(u8::from(s.map.is_some()) | (u8::from(s.scene_feature.is_some()) << 1));
    for t in s.map.iter().chain(&s.scene_feature) {
        put_tensor(&mut b, t);
    }
    b.extend_from_slice(&(s.objects.len() as u32).to_le_bytes());
    for o in &s.objects {
        b.extend_from_slice(&o.object_id.to_le_bytes());
        let flags = u8::from(o.feature.is_some())
            | (u8::from(o.is_ground_truth) << 1)
            | (u8::from(o.split == Split::Val) << 2);
        b.push(flags);
        for v in o.bbox.to_array() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        match &o.label {
            Label::Id(k) => {
                b.push(0);
                b.extend_from_slice(&(*k as u32).to_le_bytes());
            }
            Label::Ood(name) => {
                b.push(1);
                b.extend_from_slice(&(name.len() as u32).to_le_bytes());
                b.extend_from_slice(name.as_bytes());
            }
        }
        if let Some(f) = &o.feature {
            put_tensor(&mut b, f);
        }
    }
    b
}

/// Writes one split. Counts in `header` are recomputed from `scenes`; every
/// scene is validated first.
pub fn write_dataset(
    path: impl AsRef<Path>,
    header: &DatasetHeader,
    scenes: &[SceneRecord],
) -> Result<DatasetHeader> {
    let path = path.as_ref();
    let mut header = header.clone();
    header.counts = count_scenes(scenes);
    header.validate()?;
    for s in scenes {
        header.check_scene(s)?;
    }
    let json = serde_json::to_string(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    for s in scenes {
        let body = encode_scene(s);
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(&body)?;
    }
    w.flush()?;
    let mut side = serde_json::to_string_pretty(&header)?;
    side.push('\n');
    std::fs::write(sidecar_path(path), side)?;
    Ok(header)
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fill(&mut self, buf: &mut [u8], what: &'static str) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(DataError::Truncated {
                        offset: self.offset + read as u64,
                        what,
                    })
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn corrupt(&self, at: u64, msg: impl Into<String>) -> DataError {
        DataError::Corrupt {
            offset: at,
            msg: msg.into(),
        }
    }

    fn tensor(&mut self, limit: u64) -> Result<Tensor> {
        let at = self.offset;
        let rank = self.u32("tensor rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(self.corrupt(at, format!("tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(self.u64("tensor dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && (n as u64).saturating_mul(8) <= limit);
        let Some(n) = n else {
            return Err(self.corrupt(at, format!("tensor dims {dims:?}")));
        };
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64("tensor data")?);
        }
        Ok(Tensor::new(dims, data)?)
    }
}

/// Streaming reader over the scenes of one split, in file order.
pub struct DatasetReader<R> {
    cursor: Cursor<R>,
    header: DatasetHeader,
    remaining: u64,
    done: bool,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut c = Cursor { inner, offset: 0 };
        let mut magic = [0u8; 4];
        c.fill(&mut magic, "magic")?;
        if &magic != DATASET_MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = c.u32("version")?;
        if version != DATASET_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let at = c.offset;
        let len = c.u32("header length")?;
        if len > MAX_HEADER {
            return Err(c.corrupt(at, format!("header length {len}")));
        }
        let at = c.offset;
        let mut json = vec![0u8; len as usize];
        c.fill(&mut json, "header")?;
        let header: DatasetHeader = serde_json::from_slice(&json)
            .map_err(|e| c.corrupt(at, format!("header JSON: {e}")))?;
        header.validate()?;
        Ok(Self {
            remaining: header.counts.scenes,
            cursor: c,
            header,
            done: false,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn next_scene(&mut self) -> Result<Option<SceneRecord>> {
        if self.remaining == 0 {
            let mut probe = [0u8; 1];
            if self.cursor.inner.read(&mut probe)? != 0 {
                return Err(self
                    .cursor
                    .corrupt(self.cursor.offset, "trailing bytes after last scene"));
            }
            return Ok(None);
        }
        let c = &mut self.cursor;
        let body_len = c.u64("scene length")?;
        let start = c.offset;
        let scene_id = c.u64("scene id")?;
        let at = c.offset;
        let flags = c.u8("scene flags")?;
        if flags & !3 != 0 {
            return Err(c.corrupt(at, format!("scene flags {flags:#x}")));
        }
        let map = if flags & 1 != 0 {
            Some(c.tensor(body_len)?)
        } else {
            None
        };
        let scene_feature = if flags & 2 != 0 {
            Some(c.tensor(body_len)?)
        } else {
            None
        };
        let n = c.u32("object count")?;
        let mut objects = Vec::with_capacity((n as usize).min(1 << 16));
        for _ in 0..n {
            let object_id = c.u64("object id")?;
            let at = c.offset;
            let flags = c.u8("object flags")?;
            if flags & !7 != 0 {
                return Err(c.corrupt(at, format!("object flags {flags:#x}")));
            }
            let at = c.offset;
            let mut a = [0.0; 7];
            for v in &mut a {
                *v = c.f64("box")?;
            }
            let bbox = Box7::from_array(a).map_err(|e| c.corrupt(at, e.to_string()))?;
            let at = c.offset;
            let label = match c.u8("label tag")? {
                0 => Label::Id(c.u32("class index")? as usize),
                1 => {
                    let len = c.u32("label length")?;
                    if u64::from(len) > body_len {
                        return Err(c.corrupt(at, format!("label length {len}")));
                    }
                    let mut s = vec![0u8; len as usize];
                    c.fill(&mut s, "label")?;
                    Label::Ood(
                        String::from_utf8(s).map_err(|_| c.corrupt(at, "label is not utf-8"))?,
                    )
                }
                t => return Err(c.corrupt(at, format!("label tag {t}"))),
            };
            let feature = if flags & 1 != 0 {
                Some(c.tensor(body_len)?)
            } else {
                None
            };
            objects.push(ObjectRecord {
                object_id,
                feature,
                bbox,
                label,
                is_ground_truth: flags & 2 != 0,
                split: if flags & 4 != 0 {
                    Split::Val
                } else {
                    Split::Train
                },
            });
        }
        if c.offset - start != body_len {
            return Err(c.corrupt(
                start,
                format!(
                    "scene body is {} bytes, header says {body_len}",
                    c.offset - start
                ),
            ));
        }
        let scene = SceneRecord {
            scene_id,
            map,
            scene_feature,
            objects,
        };
        self.header.check_scene(&scene)?;
        self.remaining -= 1;
        Ok(Some(scene))
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<SceneRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_scene() {
            Ok(Some(s)) => Some(Ok(s)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Reads a whole split into memory.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<SceneRecord>)> {
    let reader = DatasetReader::open(path)?;
    let header = reader.header().clone();
    let scenes = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, scenes))
}
