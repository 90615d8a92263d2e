//! On-disk formats.
//!
//! Fields use a small binary container:
//!
//! ```text
//! "LCF1" | header_len: u32 LE | header: JSON (header_len bytes) | payload: f64 LE
//! ```
//!
//! The JSON header has keys `kind` (`"meaning"`, `"measure"` or
//! `"transform"`), `shape` (`[n1, n2]` or `[n1, n2, d]`), `bounds`
//! (`[[min1, max1], [min2, max2]]`) and, for meaning fields only, `dist`.
//! The payload is row-major with axis 1 outermost and the component axis
//! innermost.
//!
//! Embeddings are CSV with a `z1,z2` or `z1,z2,label` header. Coordinates
//! are written in the shortest form that parses back to the same `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::cartogram::TransformField;
use crate::error::{Error, Result};
use crate::field::{EmbeddingSet, MeaningField, MeasureField};
use crate::grid::GridSpec;
use crate::scalar::{Point, Scalar};

const MAGIC: &[u8; 4] = b"LCF1";
const PREFIX: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Meaning,
    Measure,
    Transform,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: FieldKind,
    shape: Vec<usize>,
    bounds: [[f64; 2]; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dist: Option<bool>,
}

/// Any field a file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyField<S> {
    Meaning(MeaningField<S>),
    Measure(MeasureField<S>),
    Transform(TransformField<S>),
}

impl<S: Scalar> AnyField<S> {
    pub fn kind(&self) -> FieldKind {
        match self {
            AnyField::Meaning(_) => FieldKind::Meaning,
            AnyField::Measure(_) => FieldKind::Measure,
            AnyField::Transform(_) => FieldKind::Transform,
        }
    }

    pub fn spec(&self) -> &GridSpec<S> {
        match self {
            AnyField::Meaning(f) => f.spec(),
            AnyField::Measure(f) => f.spec(),
            AnyField::Transform(f) => f.spec(),
        }
    }
}

impl<S> From<MeaningField<S>> for AnyField<S> {
    fn from(f: MeaningField<S>) -> Self {
        AnyField::Meaning(f)
    }
}

impl<S> From<MeasureField<S>> for AnyField<S> {
    fn from(f: MeasureField<S>) -> Self {
        AnyField::Measure(f)
    }
}

impl<S> From<TransformField<S>> for AnyField<S> {
    fn from(f: TransformField<S>) -> Self {
        AnyField::Transform(f)
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Serializes a field to the binary container.
pub fn encode_field<S: Scalar>(field: &AnyField<S>) -> Result<Vec<u8>> {
    let spec = field.spec();
    let (shape, dist, values): (Vec<usize>, Option<bool>, Vec<S>) = match field {
        AnyField::Meaning(f) => {
            let (a, b, c) = f.values().dim();
            (vec![a, b, c], Some(f.is_distribution()), f.values().iter().copied().collect())
        }
        AnyField::Measure(f) => {
            let (a, b) = f.values().dim();
            (vec![a, b], None, f.values().iter().copied().collect())
        }
        AnyField::Transform(f) => {
            let (a, b, c) = f.positions().dim();
            (vec![a, b, c], None, f.positions().iter().copied().collect())
        }
    };
    let header = Header {
        kind: field.kind(),
        shape,
        bounds: [
            [spec.min()[0].to_f64_lossy(), spec.max()[0].to_f64_lossy()],
            [spec.min()[1].to_f64_lossy(), spec.max()[1].to_f64_lossy()],
        ],
        dist,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::input(e.to_string()))?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (k, v) in values.iter().enumerate() {
        let x = v.to_f64_lossy();
        if !x.is_finite() {
            return Err(Error::input(format!("non-finite value at flat index {k}")));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Parses the binary container; errors carry the byte offset of the problem.
pub fn decode_field<S: Scalar>(bytes: &[u8]) -> Result<AnyField<S>> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "file ends inside the magic number"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}, expected \"LCF1\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    if bytes.len() < PREFIX {
        return Err(format_err(bytes.len(), "file ends inside the header length"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload_at = PREFIX
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(bytes.len(), format!("header of {header_len} bytes is truncated")))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..payload_at]).map_err(|e| {
        let offset = PREFIX + line_col_to_offset(&bytes[PREFIX..payload_at], e.line(), e.column());
        format_err(offset, format!("invalid header: {e}"))
    })?;

    let arity = match header.kind {
        FieldKind::Measure => 2,
        FieldKind::Meaning | FieldKind::Transform => 3,
    };
    if header.shape.len() != arity {
        return Err(format_err(
            PREFIX,
            format!("{:?} field needs a shape of {arity} entries, got {:?}", header.kind, header.shape),
        ));
    }
    if header.kind == FieldKind::Transform && header.shape[2] != 2 {
        return Err(format_err(PREFIX, format!("transform component axis must be 2, got {}", header.shape[2])));
    }
    if header.kind == FieldKind::Meaning && header.dist.is_none() {
        return Err(format_err(PREFIX, "meaning header lacks \"dist\""));
    }
    if header.kind != FieldKind::Meaning && header.dist.is_some() {
        return Err(format_err(PREFIX, "\"dist\" is only valid for meaning fields"));
    }
    let spec = GridSpec::new(
        [S::lit(header.bounds[0][0]), S::lit(header.bounds[1][0])],
        [S::lit(header.bounds[0][1]), S::lit(header.bounds[1][1])],
        [header.shape[0], header.shape[1]],
    )
    .map_err(|e| format_err(PREFIX, format!("invalid grid: {e}")))?;

    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(PREFIX, "shape overflows"))?;
    let payload = &bytes[payload_at..];
    if payload.len() != count.saturating_mul(8) {
        let whole = payload.len() / 8;
        let extra = if payload.len() % 8 != 0 { " plus a partial value" } else { "" };
        return Err(format_err(
            payload_at + payload.len().min(count.saturating_mul(8)),
            format!("payload holds {whole} values{extra}, expected {count}"),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (k, chunk) in payload.chunks_exact(8).enumerate() {
        let x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        let v = S::from_f64(x).filter(|v| v.is_finite() && x.is_finite());
        match v {
            Some(v) => values.push(v),
            None => return Err(format_err(payload_at + 8 * k, format!("non-finite value {x}"))),
        }
    }
    let at_payload = |e: Error| format_err(payload_at, e.to_string());
    Ok(match header.kind {
        FieldKind::Measure => {
            let a = Array2::from_shape_vec((header.shape[0], header.shape[1]), values).expect("count checked");
            AnyField::Measure(MeasureField::new(spec, a).map_err(at_payload)?)
        }
        FieldKind::Meaning => {
            let a = Array3::from_shape_vec((header.shape[0], header.shape[1], header.shape[2]), values)
                .expect("count checked");
            AnyField::Meaning(MeaningField::new(spec, a, header.dist.expect("checked")).map_err(at_payload)?)
        }
        FieldKind::Transform => {
            let a = Array3::from_shape_vec((header.shape[0], header.shape[1], 2), values).expect("count checked");
            AnyField::Transform(TransformField::new(spec, a).map_err(at_payload)?)
        }
    })
}

fn line_col_to_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (n, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if n + 1 == line {
            return (offset + column.saturating_sub(1)).min(bytes.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_field<S: Scalar>(path: impl AsRef<Path>, field: &AnyField<S>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_field(field)?)
}

pub fn load_field<S: Scalar>(path: impl AsRef<Path>) -> Result<AnyField<S>> {
    decode_field(&fs::read(path)?)
}

fn wrong_kind(want: FieldKind, got: FieldKind) -> Error {
    format_err(PREFIX, format!("expected a {want:?} field, file holds {got:?}"))
}

pub fn load_measure<S: Scalar>(path: impl AsRef<Path>) -> Result<MeasureField<S>> {
    match load_field(path)? {
        AnyField::Measure(f) => Ok(f),
        other => Err(wrong_kind(FieldKind::Measure, other.kind())),
    }
}

pub fn load_meaning<S: Scalar>(path: impl AsRef<Path>) -> Result<MeaningField<S>> {
    match load_field(path)? {
        AnyField::Meaning(f) => Ok(f),
        other => Err(wrong_kind(FieldKind::Meaning, other.kind())),
    }
}

pub fn load_transform<S: Scalar>(path: impl AsRef<Path>) -> Result<TransformField<S>> {
    match load_field(path)? {
        AnyField::Transform(f) => Ok(f),
        other => Err(wrong_kind(FieldKind::Transform, other.kind())),
    }
}

/// Serializes embeddings as CSV text.
pub fn encode_embeddings<S: Scalar>(e: &EmbeddingSet<S>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::input(e.to_string());
    match e.labels() {
        Some(labels) => {
            w.write_record(["z1", "z2", "label"]).map_err(csv_err)?;
            for (p, l) in e.points().iter().zip(labels) {
                let (a, b) = (format!("{:?}", p[0].to_f64_lossy()), format!("{:?}", p[1].to_f64_lossy()));
                w.write_record([a.as_str(), b.as_str(), l.as_str()]).map_err(csv_err)?;
            }
        }
        None => {
            w.write_record(["z1", "z2"]).map_err(csv_err)?;
            for p in e.points() {
                let (a, b) = (format!("{:?}", p[0].to_f64_lossy()), format!("{:?}", p[1].to_f64_lossy()));
                w.write_record([a.as_str(), b.as_str()]).map_err(csv_err)?;
            }
        }
    }
    w.into_inner().map_err(|e| Error::input(e.to_string()))
}

/// Parses embeddings CSV; errors carry the 1-based line number.
pub fn decode_embeddings<S: Scalar>(bytes: &[u8]) -> Result<EmbeddingSet<S>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(bytes);
    let line_err = |line: u64, message: String| Error::FormatLine { line, message };
    let mut records = r.records();
    let header = match records.next() {
        None => return Err(line_err(1, "missing header".into())),
        Some(rec) => rec.map_err(|e| line_err(1, e.to_string()))?,
    };
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let labelled = match cols.as_slice() {
        ["z1", "z2"] => false,
        ["z1", "z2", "label"] => true,
        _ => {
            return Err(line_err(
                1,
                format!("header must be \"z1,z2\" or \"z1,z2,label\", got {:?}", header.iter().collect::<Vec<_>>().join(",")),
            ))
        }
    };
    let want = if labelled { 3 } else { 2 };
    let mut points: Vec<Point<S>> = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            line_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != want {
            return Err(line_err(line, format!("expected {want} columns, found {}", rec.len())));
        }
        let mut p = [S::zero(); 2];
        for a in 0..2 {
            let s = rec[a].trim();
            let x: f64 = s.parse().map_err(|_| line_err(line, format!("cannot parse {s:?} as a number")))?;
            p[a] = S::from_f64(x)
                .filter(|v| v.is_finite() && x.is_finite())
                .ok_or_else(|| line_err(line, format!("non-finite coordinate {s:?}")))?;
        }
        points.push(p);
        if labelled {
            labels.push(rec[2].to_string());
        }
    }
    if points.is_empty() {
        return Err(Error::input("embeddings file holds no points"));
    }
    EmbeddingSet::new(points, labelled.then_some(labels))
}

pub fn save_embeddings<S: Scalar>(path: impl AsRef<Path>, e: &EmbeddingSet<S>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_embeddings(e)?)
}

pub fn load_embeddings<S: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingSet<S>> {
    decode_embeddings(&fs::read(path)?)
}
