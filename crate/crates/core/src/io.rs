//! On-disk formats.
//!
//! All embeddings are stored as little-endian IEEE-754 `f32` and widened to
//! `f64` on load.
//!
//! **Bundle**: a TOML manifest ([`BundleManifest`]) beside a raw blob named
//! by `data_file`. The blob holds `C·M·d` floats of description embeddings
//! in class-major, description-major order, followed by `C·S·d` floats of
//! visual particles when `has_cache` is set.
//!
//! **Stream**: a 32-byte header
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 8 | magic `PROTOSTR` |
//! | 8  | 4 | `u32` format version |
//! | 12 | 4 | `u32` d |
//! | 16 | 4 | `u32` N (views per sample) |
//! | 20 | 4 | `u32` flags, bit 0 = has labels |
//! | 24 | 8 | `u64` record count |
//!
//! then fixed-size records of `u64` sample id, `i64` label (−1 when absent)
//! and `N·d` floats, view 0 first.
//!
//! **Reference**: a 24-byte header (magic `PROTOREF`, `u32` version, `u32` d,
//! `u32` class count, `u32` reserved), one `u64` vector count per class, then
//! the vectors of class 0, class 1, ...

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{PredictionRecord, StreamRecord, StreamSummary};
use crate::error::{Error, Result};
use crate::primitives::{Matrix, UnitVector};
use crate::prototypes::{MultimodalPrototype, PrototypeStore};

pub const FORMAT_VERSION: u32 = 1;
pub const BYTE_ORDER: &str = "little-endian";
pub const DTYPE: &str = "float32";

const STREAM_MAGIC: &[u8; 8] = b"PROTOSTR";
const REFERENCE_MAGIC: &[u8; 8] = b"PROTOREF";
pub const STREAM_HEADER_LEN: usize = 32;
const REFERENCE_HEADER_LEN: usize = 24;

/// Vectors whose stored norm is this close to one are kept bit-for-bit.
const NORM_KEEP_TOLERANCE: f64 = 1e-6;
/// Stored norms further than this from one produce a load warning.
const NORM_WARN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub dim: usize,
    pub classes: usize,
    pub descriptions: usize,
    pub particles: usize,
    pub class_names: Vec<String>,
    pub data_file: String,
    pub byte_order: String,
    pub dtype: String,
    pub has_cache: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl BundleManifest {
    /// Number of `f32` values the data file must hold.
    pub fn expected_values(&self) -> Option<usize> {
        let text = self.classes.checked_mul(self.descriptions)?.checked_mul(self.dim)?;
        if self.has_cache {
            text.checked_add(self.classes.checked_mul(self.particles)?.checked_mul(self.dim)?)
        } else {
            Some(text)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub store: PrototypeStore,
    /// Non-fatal findings, e.g. vectors that needed renormalizing.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub format_version: u32,
    pub dim: usize,
    pub views: usize,
    pub record_count: u64,
    pub has_labels: bool,
}

impl StreamHeader {
    pub fn record_len(&self) -> Option<usize> {
        self.views.checked_mul(self.dim)?.checked_mul(4)?.checked_add(16)
    }
}

#[derive(Debug, Clone)]
pub struct Stream {
    pub header: StreamHeader,
    pub records: Vec<StreamRecord>,
    pub warnings: Vec<String>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn push_vector(out: &mut Vec<u8>, v: &UnitVector) {
    for x in v.as_slice() {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

/// Cursor over a byte buffer whose total length has already been validated.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
    warnings: &'a mut Vec<String>,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.path, format!("unexpected end of file at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice has length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take()?))
    }

    fn vector(&mut self, dim: usize, what: &dyn Fn() -> String) -> Result<UnitVector> {
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            let x = f32::from_le_bytes(self.take()?);
            if !x.is_finite() {
                return Err(Error::format(self.path, format!("non-finite value in {}", what())));
            }
            values.push(x as f64);
        }
        let (v, norm) = UnitVector::with_norm_tolerance(values, NORM_KEEP_TOLERANCE)
            .map_err(|e| Error::format(self.path, format!("{}: {e}", what())))?;
        if (norm - 1.0).abs() > NORM_WARN_TOLERANCE {
            self.warnings
                .push(format!("{}: stored norm {norm:.6} renormalized to 1", what()));
        }
        Ok(v)
    }
}

fn check_len(path: &Path, expected: Option<usize>, actual: usize, what: &str) -> Result<()> {
    match expected {
        Some(e) if e == actual => Ok(()),
        Some(e) => {
            let detail = if actual < e {
                format!("{} bytes missing", e - actual)
            } else {
                format!("{} trailing bytes", actual - e)
            };
            Err(Error::format(
                path,
                format!("{what} should be {e} bytes, found {actual} ({detail})"),
            ))
        }
        None => Err(Error::format(path, format!("{what} size overflows"))),
    }
}

fn data_path(manifest_path: &Path, data_file: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(data_file)
}

/// Writes `manifest_path` and its data file (same stem, `.bin` extension).
pub fn write_bundle(
    manifest_path: &Path,
    store: &PrototypeStore,
    class_names: &[String],
    include_cache: bool,
    seed: Option<u64>,
) -> Result<BundleManifest> {
    if class_names.len() != store.num_classes() {
        return Err(Error::Config(format!(
            "{} class names for {} classes",
            class_names.len(),
            store.num_classes()
        )));
    }
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad bundle path {}", manifest_path.display())))?;
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        dim: store.dim(),
        classes: store.num_classes(),
        descriptions: store.descriptions(),
        particles: store.particles(),
        class_names: class_names.to_vec(),
        data_file: format!("{stem}.bin"),
        byte_order: BYTE_ORDER.into(),
        dtype: DTYPE.into(),
        has_cache: include_cache,
        seed,
    };

    let mut data = Vec::with_capacity(manifest.expected_values().unwrap_or(0) * 4);
    for p in store.prototypes() {
        p.text_features().iter().for_each(|v| push_vector(&mut data, v));
    }
    if include_cache {
        for p in store.prototypes() {
            p.visual_particles().iter().for_each(|v| push_vector(&mut data, v));
        }
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    write_file(&data_path(manifest_path, &manifest.data_file), &data)?;
    write_file(manifest_path, text.as_bytes())?;
    Ok(manifest)
}

pub fn read_bundle(manifest_path: &Path) -> Result<Bundle> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: BundleManifest =
        toml::from_str(&text).map_err(|e| Error::format(manifest_path, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            path: manifest_path.into(),
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    if manifest.byte_order != BYTE_ORDER || manifest.dtype != DTYPE {
        return Err(Error::format(
            manifest_path,
            format!("unsupported encoding {}/{}", manifest.byte_order, manifest.dtype),
        ));
    }
    if manifest.dim == 0 || manifest.classes == 0 || manifest.descriptions == 0 {
        return Err(Error::format(
            manifest_path,
            "dim, classes and descriptions must be positive",
        ));
    }
    if manifest.class_names.len() != manifest.classes {
        return Err(Error::format(
            manifest_path,
            format!(
                "{} class names for {} classes",
                manifest.class_names.len(),
                manifest.classes
            ),
        ));
    }

    let path = data_path(manifest_path, &manifest.data_file);
    let actual = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len() as usize;
    let expected = manifest.expected_values().and_then(|v| v.checked_mul(4));
    check_len(&path, expected, actual, "bundle data")?;
    let bytes = read_file(&path)?;
    check_len(&path, expected, bytes.len(), "bundle data")?;

    let mut warnings = Vec::new();
    let mut reader = Reader {
        bytes: &bytes,
        pos: 0,
        path: &path,
        warnings: &mut warnings,
    };
    let (c, m, s, d) = (
        manifest.classes,
        manifest.descriptions,
        manifest.particles,
        manifest.dim,
    );
    let mut text = Vec::with_capacity(c);
    for class in 0..c {
        let feats = (0..m)
            .map(|j| reader.vector(d, &|| format!("class {class} description {j}")))
            .collect::<Result<Vec<_>>>()?;
        text.push(feats);
    }
    let prototypes = if manifest.has_cache {
        let mut protos = Vec::with_capacity(c);
        for (class, feats) in text.into_iter().enumerate() {
            let particles = (0..s)
                .map(|j| reader.vector(d, &|| format!("class {class} particle {j}")))
                .collect::<Result<Vec<_>>>()?;
            protos.push(MultimodalPrototype::with_particles(class, feats, particles)?);
        }
        protos
    } else {
        text.into_iter()
            .enumerate()
            .map(|(class, feats)| MultimodalPrototype::new(class, feats, s))
            .collect::<Result<Vec<_>>>()?
    };
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(Bundle {
        manifest,
        store: PrototypeStore::new(prototypes)?,
        warnings,
    })
}

/// Writes a stream file. Every record must have exactly `views` vectors of
/// dimension `dim`.
pub fn write_stream(path: &Path, dim: usize, views: usize, records: &[StreamRecord]) -> Result<StreamHeader> {
    if dim == 0 || views == 0 {
        return Err(Error::Config("stream needs positive dimension and view count".into()));
    }
    let to_u32 = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} exceeds u32")));
    let header = StreamHeader {
        format_version: FORMAT_VERSION,
        dim,
        views,
        record_count: records.len() as u64,
        has_labels: records.iter().any(|r| r.true_label.is_some()),
    };
    let record_len = header
        .record_len()
        .ok_or_else(|| Error::Config("record size overflows".into()))?;
    let mut out = Vec::with_capacity(STREAM_HEADER_LEN + records.len() * record_len);
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(dim, "dimension")?.to_le_bytes());
    out.extend_from_slice(&to_u32(views, "view count")?.to_le_bytes());
    out.extend_from_slice(&u32::from(header.has_labels).to_le_bytes());
    out.extend_from_slice(&header.record_count.to_le_bytes());
    for r in records {
        if r.augment_features.len() != views {
            return Err(Error::dim(views, r.augment_features.len(), "views per record"));
        }
        if let Some(v) = r.augment_features.iter().find(|v| v.dim() != dim) {
            return Err(Error::dim(dim, v.dim(), "stream vector"));
        }
        out.extend_from_slice(&r.sample_id.to_le_bytes());
        let label = match r.true_label {
            Some(y) => i64::try_from(y).map_err(|_| Error::Config(format!("label {y} exceeds i64")))?,
            None => -1,
        };
        out.extend_from_slice(&label.to_le_bytes());
        r.augment_features.iter().for_each(|v| push_vector(&mut out, v));
    }
    write_file(path, &out)?;
    Ok(header)
}

pub fn read_stream(path: &Path) -> Result<Stream> {
    let bytes = read_file(path)?;
    if bytes.len() < STREAM_HEADER_LEN {
        return Err(Error::format(
            path,
            format!(
                "stream header needs {STREAM_HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[..8] != STREAM_MAGIC {
        return Err(Error::format(path, "not a stream file (bad magic)"));
    }
    let mut warnings = Vec::new();
    let mut reader = Reader {
        bytes: &bytes,
        pos: 8,
        path,
        warnings: &mut warnings,
    };
    let version = reader.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let dim = reader.u32()? as usize;
    let views = reader.u32()? as usize;
    let flags = reader.u32()?;
    let record_count = reader.u64()?;
    if dim == 0 || views == 0 {
        return Err(Error::format(path, "stream dimension and view count must be positive"));
    }
    if flags & !1 != 0 {
        return Err(Error::format(path, format!("unknown stream flags {flags:#x}")));
    }
    let header = StreamHeader {
        format_version: version,
        dim,
        views,
        record_count,
        has_labels: flags & 1 == 1,
    };
    let expected = header
        .record_len()
        .and_then(|len| usize::try_from(record_count).ok()?.checked_mul(len))
        .and_then(|body| body.checked_add(STREAM_HEADER_LEN));
    check_len(path, expected, bytes.len(), "stream")?;

    let mut records = Vec::with_capacity(record_count as usize);
    for index in 0..record_count {
        let sample_id = reader.u64()?;
        let label = reader.i64()?;
        let true_label = match label {
            -1 => None,
            y if y >= 0 => header.has_labels.then_some(y as usize),
            y => return Err(Error::format(path, format!("record {index}: invalid label {y}"))),
        };
        let augment_features = (0..views)
            .map(|n| reader.vector(dim, &|| format!("record {index} view {n}")))
            .collect::<Result<Vec<_>>>()?;
        records.push(StreamRecord {
            sample_id,
            true_label,
            augment_features,
        });
    }
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(Stream {
        header,
        records,
        warnings,
    })
}

/// Writes per-class reference vectors. Classes may hold any number of
/// vectors, including fewer than two.
pub fn write_reference(path: &Path, dim: usize, reference: &[Vec<UnitVector>]) -> Result<()> {
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Config(format!("{v} exceeds u32")));
    let mut out = Vec::new();
    out.extend_from_slice(REFERENCE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(dim)?.to_le_bytes());
    out.extend_from_slice(&to_u32(reference.len())?.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for class in reference {
        out.extend_from_slice(&(class.len() as u64).to_le_bytes());
    }
    for class in reference {
        for v in class {
            if v.dim() != dim {
                return Err(Error::dim(dim, v.dim(), "reference vector"));
            }
            push_vector(&mut out, v);
        }
    }
    write_file(path, &out)
}

pub fn read_reference(path: &Path) -> Result<Vec<Vec<UnitVector>>> {
    let bytes = read_file(path)?;
    if bytes.len() < REFERENCE_HEADER_LEN {
        return Err(Error::format(
            path,
            format!(
                "reference header needs {REFERENCE_HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[..8] != REFERENCE_MAGIC {
        return Err(Error::format(path, "not a reference file (bad magic)"));
    }
    let mut warnings = Vec::new();
    let mut reader = Reader {
        bytes: &bytes,
        pos: 8,
        path,
        warnings: &mut warnings,
    };
    let version = reader.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let dim = reader.u32()? as usize;
    let classes = reader.u32()? as usize;
    let _reserved = reader.u32()?;
    if dim == 0 {
        return Err(Error::format(path, "reference dimension must be positive"));
    }
    let counts_end = classes.checked_mul(8).and_then(|c| c.checked_add(REFERENCE_HEADER_LEN));
    if counts_end.is_none_or(|end| end > bytes.len()) {
        return Err(Error::format(
            path,
            format!("{classes} class counts do not fit in {} bytes", bytes.len()),
        ));
    }
    let counts = (0..classes).map(|_| reader.u64()).collect::<Result<Vec<_>>>()?;
    let expected = counts
        .iter()
        .try_fold(0usize, |acc, &c| acc.checked_add(usize::try_from(c).ok()?))
        .and_then(|total| total.checked_mul(dim)?.checked_mul(4))
        .and_then(|body| body.checked_add(counts_end?));
    check_len(path, expected, bytes.len(), "reference")?;

    let mut reference = Vec::with_capacity(classes);
    for (class, &count) in counts.iter().enumerate() {
        let vectors = (0..count)
            .map(|i| reader.vector(dim, &|| format!("class {class} reference {i}")))
            .collect::<Result<Vec<_>>>()?;
        reference.push(vectors);
    }
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(reference)
}

/// Formats with six significant digits, `%g` style: fixed notation for
/// decimal exponents in `[-4, 6)`, scientific otherwise, trailing zeros
/// removed.
pub fn format_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        format!("{}e{exp}", trim(mantissa))
    } else {
        trim(&format!("{x:.*}", (5 - exp) as usize))
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "null".into(), format_sig6)
}

/// Renders a results file: a `[run]` block echoing `run_info`, one line per
/// prediction under `[records]` (omitted when empty), and a `[summary]`.
pub fn render_results(records: &[PredictionRecord], summary: &StreamSummary, run_info: &[(String, String)]) -> String {
    let mut out = String::from("# protomm results v1\n[run]\n");
    for (k, v) in run_info {
        let _ = writeln!(out, "{k} = {v}");
    }
    if !records.is_empty() {
        out.push_str("[records]\nsample_id\tpredicted_class\tmax_probability\tupdated_cache\ttrue_label\n");
        for r in records {
            let label = r.true_label.map_or_else(|| "null".into(), |y| y.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{label}",
                r.sample_id,
                r.predicted_class,
                format_sig6(r.max_probability),
                r.updated_cache
            );
        }
    }
    let _ = write!(
        out,
        "[summary]\nprocessed = {}\nskipped = {}\nlabeled = {}\ncorrect = {}\naccuracy = {}\ncache_updates = {}\nmean_ot_iterations = {}\n",
        summary.processed,
        summary.skipped,
        summary.labeled,
        summary.correct,
        opt_num(summary.accuracy()),
        summary.cache_updates,
        opt_num(summary.mean_ot_iterations),
    );
    out
}

pub fn write_results(
    path: &Path,
    records: &[PredictionRecord],
    summary: &StreamSummary,
    run_info: &[(String, String)],
) -> Result<()> {
    write_file(path, render_results(records, summary, run_info).as_bytes())
}

/// Tab-separated matrix dump with row and column labels.
pub fn write_plan(path: &Path, plan: &Matrix, row_labels: &[String], col_labels: &[String]) -> Result<()> {
    if row_labels.len() != plan.rows() || col_labels.len() != plan.cols() {
        return Err(Error::dim(
            plan.rows() * plan.cols(),
            row_labels.len() * col_labels.len(),
            "plan labels",
        ));
    }
    let mut out = String::from("plan");
    for c in col_labels {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (i, label) in row_labels.iter().enumerate() {
        out.push_str(label);
        for v in plan.row(i) {
            out.push('\t');
            out.push_str(&format_sig6(*v));
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}
