//! Line-oriented dataset files and atomic writes.
//!
//! A dataset file starts with one header line
//!
//! ```text
//! gdpo-dataset 1 frames=16 dims=2 frame_step=0.1 fields=category,position[2],velocity[2],magnitude,provenance,frames[32]
//! ```
//!
//! followed by one comma-separated record per line. Floats use Rust's
//! shortest round-trip decimal form, so reading back is exact and does not
//! depend on locale.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::physics::{Condition, PoolRecord, Provenance, Trajectory, WorldConfig};

pub const DATASET_VERSION: u32 = 1;
const DATASET_MAGIC: &str = "gdpo-dataset";

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Precondition(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Clip geometry shared by every record in a file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipShape {
    pub frames: usize,
    pub dims: usize,
    pub frame_step: f64,
}

impl ClipShape {
    pub fn of_world(world: &WorldConfig) -> Self {
        Self {
            frames: world.frames,
            dims: world.dims,
            frame_step: world.frame_step,
        }
    }

    pub fn of(t: &Trajectory) -> Self {
        Self {
            frames: t.frames(),
            dims: t.dims(),
            frame_step: t.frame_step(),
        }
    }

    pub(crate) fn header_fields(&self) -> String {
        format!("frames={} dims={} frame_step={:?}", self.frames, self.dims, self.frame_step)
    }

    fn check(&self, t: &Trajectory) -> Result<()> {
        if ClipShape::of(t) != *self {
            return Err(Error::Precondition("records in one file must share clip geometry".into()));
        }
        Ok(())
    }
}

pub(crate) fn push_condition(line: &mut String, c: &Condition) {
    write!(line, "{}", c.category).unwrap();
    for x in c.init_position.iter().chain(&c.init_velocity) {
        write!(line, ",{x}").unwrap();
    }
}

pub(crate) fn push_floats(line: &mut String, xs: &[f64]) {
    for x in xs {
        write!(line, ",{x}").unwrap();
    }
}

/// Cursor over the comma-separated fields of one record line.
pub(crate) struct Fields<'a> {
    what: &'static str,
    line: usize,
    parts: std::str::Split<'a, char>,
}

impl<'a> Fields<'a> {
    pub(crate) fn new(what: &'static str, line: usize, text: &'a str) -> Self {
        Self {
            what,
            line,
            parts: text.split(','),
        }
    }

    pub(crate) fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            line: self.line,
            msg: msg.into(),
        }
    }

    pub(crate) fn next_str(&mut self) -> Result<&'a str> {
        self.parts.next().map(str::trim).ok_or_else(|| self.err("too few fields"))
    }

    pub(crate) fn next<T: std::str::FromStr>(&mut self) -> Result<T> {
        let s = self.next_str()?;
        s.parse().map_err(|_| self.err(format!("cannot parse `{s}`")))
    }

    pub(crate) fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.next::<f64>()).collect()
    }

    pub(crate) fn condition(&mut self, dims: usize) -> Result<Condition> {
        Ok(Condition {
            category: self.next()?,
            init_position: self.floats(dims)?,
            init_velocity: self.floats(dims)?,
        })
    }

    pub(crate) fn trajectory(&mut self, shape: &ClipShape) -> Result<Trajectory> {
        let data = self.floats(shape.frames * shape.dims)?;
        Trajectory::new(shape.frames, shape.dims, shape.frame_step, data).map_err(|e| self.err(e.to_string()))
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        match self.parts.next() {
            None => Ok(()),
            Some(_) => Err(self.err("trailing fields")),
        }
    }
}

/// Parses `magic version key=value ...` and returns the key/value pairs.
pub(crate) fn parse_header<'a>(
    what: &'static str,
    magic: &str,
    version: u32,
    text: Option<&'a str>,
) -> Result<Vec<(&'a str, &'a str)>> {
    let bad = |msg: String| Error::Format { what, line: 1, msg };
    let text = text.ok_or_else(|| bad("empty file".into()))?;
    let mut parts = text.split_whitespace();
    if parts.next() != Some(magic) {
        return Err(bad(format!("expected `{magic}` header")));
    }
    match parts.next().map(str::parse::<u32>) {
        Some(Ok(v)) if v == version => {}
        _ => return Err(bad(format!("unsupported {what} version"))),
    }
    parts
        .map(|kv| kv.split_once('=').ok_or_else(|| bad(format!("header field `{kv}` is not key=value"))))
        .collect()
}

pub(crate) fn header_value<T: std::str::FromStr>(
    what: &'static str,
    pairs: &[(&str, &str)],
    key: &str,
) -> Result<T> {
    let bad = |msg: String| Error::Format { what, line: 1, msg };
    let (_, v) = pairs
        .iter()
        .find(|(k, _)| *k == key)
        .ok_or_else(|| bad(format!("header lacks `{key}`")))?;
    v.parse().map_err(|_| bad(format!("invalid header value `{v}` for `{key}`")))
}

pub(crate) fn header_shape(what: &'static str, pairs: &[(&str, &str)]) -> Result<ClipShape> {
    Ok(ClipShape {
        frames: header_value(what, pairs, "frames")?,
        dims: header_value(what, pairs, "dims")?,
        frame_step: header_value(what, pairs, "frame_step")?,
    })
}

pub fn encode_dataset(shape: &ClipShape, records: &[PoolRecord]) -> Result<String> {
    let d = shape.dims;
    let mut out = format!(
        "{DATASET_MAGIC} {DATASET_VERSION} {} fields=category,position[{d}],velocity[{d}],magnitude,provenance,frames[{}]\n",
        shape.header_fields(),
        shape.frames * d
    );
    for r in records {
        shape.check(&r.trajectory)?;
        if r.condition.init_position.len() != d || r.condition.init_velocity.len() != d {
            return Err(Error::shape("condition state", d, r.condition.init_position.len()));
        }
        push_condition(&mut out, &r.condition);
        write!(out, ",{},{}", r.corruption_magnitude, r.provenance.name()).unwrap();
        push_floats(&mut out, r.trajectory.flat());
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_dataset(text: &str) -> Result<Vec<PoolRecord>> {
    const WHAT: &str = "dataset";
    let mut lines = text.lines();
    let pairs = parse_header(WHAT, DATASET_MAGIC, DATASET_VERSION, lines.next())?;
    let shape = header_shape(WHAT, &pairs)?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = Fields::new(WHAT, i + 2, line);
        let condition = f.condition(shape.dims)?;
        let corruption_magnitude = f.next()?;
        let provenance = Provenance::parse(f.next_str()?).map_err(|e| f.err(e.to_string()))?;
        let trajectory = f.trajectory(&shape)?;
        f.finish()?;
        records.push(PoolRecord {
            condition,
            trajectory,
            corruption_magnitude,
            provenance,
        });
    }
    Ok(records)
}

pub fn write_dataset(path: &Path, shape: &ClipShape, records: &[PoolRecord]) -> Result<()> {
    atomic_write(path, encode_dataset(shape, records)?.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Vec<PoolRecord>> {
    decode_dataset(&fs::read_to_string(path)?)
}

/// Wraps `(condition, clip)` pairs as clean records for storage.
pub fn training_records(pairs: &[(Condition, Trajectory)]) -> Vec<PoolRecord> {
    pairs
        .iter()
        .map(|(c, t)| PoolRecord {
            condition: c.clone(),
            trajectory: t.clone(),
            corruption_magnitude: 0.0,
            provenance: Provenance::Clean,
        })
        .collect()
}
