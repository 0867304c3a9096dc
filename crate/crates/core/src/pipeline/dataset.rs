//! Dataset records and the binary dataset file.
//!
//! Layout (little-endian): magic `KMNDATA\0`, `u32` version, `u32`-length
//! text header, `u64` record count, then fixed-size records.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kinematics::{Affine3, ParamSchema};
use crate::regressor::io::{read_u32, read_u64};
use crate::regressor::Example;
use crate::render::{backproject, Camera, DepthImage, MetricDepth, PointCloud};
use crate::scene::{Task, TaskDef};

use super::Observer;

const MAGIC: &[u8; 8] = b"KMNDATA\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Generated,
    /// Produced by model predictions in the given outer round.
    Augmented(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataRecord {
    /// Normalized depth at network resolution.
    pub depth: DepthImage,
    /// Metric depth at cloud resolution, the source of the point cloud.
    pub cloud_depth: MetricDepth,
    /// Transformation label the network is trained on. For augmented records
    /// this is the projection of `transform` onto the parameter family.
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `T_theta`, or the cumulative transform for augmented records.
    pub transform: Affine3,
    /// Frobenius distance between `transform` and `to_affine(theta)`.
    pub residual: f64,
    pub provenance: Provenance,
    pub split: Split,
    /// Index of the generated record this one descends from (itself if generated).
    pub source_index: u32,
}

impl DataRecord {
    pub fn label(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.gamma).copied().collect()
    }

    pub fn cloud(&self, camera: &Camera) -> PointCloud {
        backproject(&self.cloud_depth, camera)
    }

    pub fn example(&self) -> Example {
        Example {
            input: self.depth.clone(),
            target: self.label(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskDef,
    /// Cloud-resolution camera.
    pub camera: Camera,
    pub factor: usize,
    pub seed: u64,
    /// Invisible poses redrawn during generation.
    pub resampled: usize,
    pub records: Vec<DataRecord>,
}

impl Dataset {
    pub fn observer(&self) -> Result<Observer> {
        Observer::new(self.task.clone(), self.camera, self.factor)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DataRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// SHA-256 of the serialized file, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut w = HashWriter(Sha256::new());
        write_dataset(&mut w, self).expect("hashing does not fail");
        w.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-parameter `(min, max)` of the labels in `split`.
    pub fn label_ranges(&self, split: Split) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.task.schema.len()];
        for r in self.split(split) {
            for (slot, v) in out.iter_mut().zip(r.label()) {
                slot.0 = slot.0.min(v);
                slot.1 = slot.1.max(v);
            }
        }
        out
    }
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn header_text(ds: &Dataset) -> String {
    let (nw, nh) = (ds.camera.width / ds.factor, ds.camera.height / ds.factor);
    format!(
        "task {}\nseed {}\nresampled {}\nnet_resolution {} {}\ncloud_resolution {} {}\nfactor {}\nn_transform {}\nn_config {}\nschema\n{}end_schema\n{}",
        ds.task.task,
        ds.seed,
        ds.resampled,
        nw,
        nh,
        ds.camera.width,
        ds.camera.height,
        ds.factor,
        ds.task.schema.n_transform(),
        ds.task.schema.n_config(),
        ds.task.schema.to_text(),
        ds.camera.to_text(),
    )
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let header = header_text(ds);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(ds.records.len() as u64).to_le_bytes())?;
    let (n, m) = (ds.task.schema.n_transform(), ds.task.schema.n_config());
    let mut buf = Vec::new();
    for (i, r) in ds.records.iter().enumerate() {
        if r.theta.len() != n || r.gamma.len() != m {
            return Err(Error::Format(format!("record {i} has the wrong label length")));
        }
        buf.clear();
        let (tag, round) = match r.provenance {
            Provenance::Generated => (0u8, 0u32),
            Provenance::Augmented(k) => (1, k),
        };
        buf.push(tag);
        buf.extend_from_slice(&round.to_le_bytes());
        buf.push(match r.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        buf.extend_from_slice(&r.source_index.to_le_bytes());
        for v in r.theta.iter().chain(&r.gamma) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in r.transform.to_row_major() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&r.residual.to_le_bytes());
        for v in r.depth.values.iter().chain(&r.cloud_depth.values) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let (meta, rest) = header
        .split_once("schema\n")
        .ok_or_else(|| Error::Format("missing schema block".into()))?;
    let (schema_text, camera_text) = rest
        .split_once("end_schema\n")
        .ok_or_else(|| Error::Format("unterminated schema block".into()))?;
    let field = |key: &str| -> Result<&str> {
        meta.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix(' ')))
            .ok_or_else(|| Error::Format(format!("missing header field `{key}`")))
    };
    let int = |key: &str| -> Result<u64> {
        field(key)?
            .parse()
            .map_err(|_| Error::Format(format!("bad header field `{key}`")))
    };
    let task: Task = field("task")?.parse()?;
    let schema = ParamSchema::parse(schema_text)?;
    let task = task.definition().with_schema(schema)?;
    let camera = Camera::parse(camera_text)?;
    let factor = int("factor")? as usize;
    camera.downscaled(factor)?;
    let (nw, nh) = (camera.width / factor, camera.height / factor);
    let (cw, ch) = (camera.width, camera.height);
    let (n, m) = (task.schema.n_transform(), task.schema.n_config());
    let count = read_u64(&mut r)? as usize;
    let record_len = 1 + 4 + 1 + 4 + 8 * (n + m) + 8 * 12 + 8 + 4 * (nw * nh + cw * ch);
    let mut buf = vec![0u8; record_len];
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated at record {i} of {count}")))?;
        let mut c = Cursor { buf: &buf, pos: 0 };
        let provenance = match (c.u8(), c.u32()) {
            (0, _) => Provenance::Generated,
            (1, k) => Provenance::Augmented(k),
            (t, _) => return Err(Error::Format(format!("record {i}: bad provenance tag {t}"))),
        };
        let split = match c.u8() {
            0 => Split::Train,
            1 => Split::Test,
            t => return Err(Error::Format(format!("record {i}: bad split tag {t}"))),
        };
        let source_index = c.u32();
        let theta = (0..n).map(|_| c.f64()).collect();
        let gamma = (0..m).map(|_| c.f64()).collect();
        let mut affine = [0.0; 12];
        for v in &mut affine {
            *v = c.f64();
        }
        let residual = c.f64();
        let depth = DepthImage {
            width: nw,
            height: nh,
            values: (0..nw * nh).map(|_| c.f32()).collect(),
        };
        let cloud_depth = MetricDepth {
            width: cw,
            height: ch,
            values: (0..cw * ch).map(|_| c.f32()).collect(),
        };
        records.push(DataRecord {
            depth,
            cloud_depth,
            theta,
            gamma,
            transform: Affine3::from_row_major(&affine),
            residual,
            provenance,
            split,
            source_index,
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(Dataset {
        task,
        camera,
        factor,
        seed: int("seed")?,
        resampled: int("resampled")? as usize,
        records,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.buf[self.pos..self.pos + N].try_into().expect("record length checked");
        self.pos += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}
