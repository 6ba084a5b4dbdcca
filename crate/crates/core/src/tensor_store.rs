//! Named dense tensors at rest.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   magic "CLQB"
//! 4   u32 format version
//! 8   u32 entry count
//! 12  u32 manifest length L
//! 16  manifest, L bytes of JSON
//! ..  entry table, `ENTRY_SIZE` bytes per entry, sorted by name
//! ..  payloads, each starting on a 64-byte boundary, zero padded
//! ```
//!
//! An entry record is `u16 name_len | u8 dtype | u8 ndim | u32 reserved |
//! u64 dims[4] | u64 offset | u64 length | name[256] | 8 reserved bytes`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::scalar::Real;

pub const MAGIC: [u8; 4] = *b"CLQB";
pub const FORMAT_VERSION: u32 = 1;
pub const PAYLOAD_ALIGN: usize = 64;
pub const MAX_NAME_LEN: usize = 256;
pub const MAX_DIMS: usize = 4;
const FIXED_HEADER: usize = 16;
const ENTRY_SIZE: usize = 320;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    /// Raw quantization codes.
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F16 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F16),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::U8 => 1,
        }
    }
}

/// A dense row-major tensor with its raw little-endian payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        check_shape("<tensor>", &shape)?;
        let expected = shape.iter().product::<usize>() * dtype.size();
        if data.len() != expected {
            return Err(FormatError::LengthMismatch {
                name: "<tensor>".into(),
                expected,
                actual: data.len(),
            }
            .into());
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F32, shape, data)
    }

    /// Rounds each value to half precision.
    pub fn from_f32_as_f16(shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values
            .iter()
            .flat_map(|v| half::f16::from_f32(*v).to_le_bytes())
            .collect();
        Self::new(DType::F16, shape, data)
    }

    pub fn from_u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(DType::U8, shape, values)
    }

    /// Stores a matrix row-major as a 2-D tensor of the given dtype.
    pub fn from_matrix<T: Real>(matrix: &DMatrix<T>, dtype: DType) -> Result<Self> {
        let shape = vec![matrix.nrows(), matrix.ncols()];
        let row_major: Vec<f32> = matrix
            .transpose()
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        match dtype {
            DType::F32 => Self::from_f32(shape, &row_major),
            DType::F16 => Self::from_f32_as_f16(shape, &row_major),
            DType::U8 => Err(Error::InvalidConfig(
                "matrices are stored as f32 or f16".into(),
            )),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes the payload to `f64`, widening `f16`/`u8` exactly.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            DType::U8 => self.data.iter().map(|&b| b as f64).collect(),
        }
    }

    /// Interprets the tensor as a matrix whose column count is the last dim;
    /// leading dims are flattened into rows.
    pub fn to_matrix<T: Real>(&self) -> Result<DMatrix<T>> {
        let cols = *self.shape.last().expect("validated nonempty shape");
        let rows = self.numel() / cols;
        let values: Vec<T> = self.to_f64_vec().into_iter().map(T::of).collect();
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    }
}

/// Format version plus free-form creation metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub metadata: BTreeMap<String, String>,
}

/// An ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorBundle {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        if self.entries.contains_key(&name) {
            return Err(FormatError::NameCollision(name).into());
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
        }
    }

    /// Reads a 2-D (or flattened) entry as a matrix.
    pub fn matrix<T: Real>(&self, name: &str) -> Option<Result<DMatrix<T>>> {
        self.get(name).map(Tensor::to_matrix)
    }
}

pub fn validate_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= MAX_NAME_LEN
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'/' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(FormatError::InvalidName(name.to_string()).into())
    }
}

fn check_shape(name: &str, shape: &[usize]) -> Result<()> {
    let reason = if shape.is_empty() {
        "shape must have at least one dim"
    } else if shape.len() > MAX_DIMS {
        "shape has more than 4 dims"
    } else if shape.contains(&0) {
        "all dims must be >= 1"
    } else {
        return Ok(());
    };
    Err(FormatError::BadShape {
        name: name.to_string(),
        reason: reason.into(),
    }
    .into())
}

fn align_up(x: usize) -> usize {
    x.div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN
}

/// Serializes `bundle` into `sink`; returns the number of bytes written.
pub fn write_bundle<W: Write>(bundle: &TensorBundle, mut sink: W) -> Result<u64> {
    let bytes = encode(bundle)?;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len() as u64)
}

/// Encodes a bundle into an in-memory byte buffer.
pub fn encode(bundle: &TensorBundle) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&bundle.manifest()).map_err(FormatError::Manifest)?;
    let count = bundle.entries.len();
    let table_start = FIXED_HEADER + manifest.len();
    let header_end = table_start + count * ENTRY_SIZE;

    let mut offsets = Vec::with_capacity(count);
    let mut cursor = align_up(header_end);
    for (name, t) in &bundle.entries {
        validate_name(name)?;
        check_shape(name, &t.shape)?;
        let expected = t.numel() * t.dtype.size();
        if t.data.len() != expected {
            return Err(FormatError::LengthMismatch {
                name: name.clone(),
                expected,
                actual: t.data.len(),
            }
            .into());
        }
        offsets.push(cursor);
        cursor = align_up(cursor + t.data.len());
    }
    let total = if count == 0 { header_end } else { cursor };

    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);

    for ((name, t), &offset) in bundle.entries.iter().zip(&offsets) {
        let start = out.len();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.push(t.dtype.code());
        out.push(t.shape.len() as u8);
        out.extend_from_slice(&[0u8; 4]);
        for d in 0..MAX_DIMS {
            let dim = t.shape.get(d).copied().unwrap_or(0) as u64;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        out.extend_from_slice(&(offset as u64).to_le_bytes());
        out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
        let mut name_field = [0u8; MAX_NAME_LEN];
        name_field[..name.len()].copy_from_slice(name.as_bytes());
        out.extend_from_slice(&name_field);
        out.resize(start + ENTRY_SIZE, 0);
    }

    for (t, &offset) in bundle.entries.values().zip(&offsets) {
        out.resize(offset, 0);
        out.extend_from_slice(&t.data);
    }
    out.resize(total, 0);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated { entry: ctx.into() }.into()),
        }
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        let b = self.take(4, ctx)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, ctx: &str) -> Result<u64> {
        let b = self.take(8, ctx)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Parses a bundle from `source`, reading it to the end.
pub fn read_bundle<R: Read>(mut source: R) -> Result<TensorBundle> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn decode(buf: &[u8]) -> Result<TensorBundle> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, "<header>")?;
    if magic != MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(FormatError::BadMagic(m).into());
    }
    let version = cur.u32("<header>")?;
    if version > FORMAT_VERSION {
        return Err(FormatError::VersionAhead {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let count = cur.u32("<header>")? as usize;
    let manifest_len = cur.u32("<header>")? as usize;
    let manifest: Manifest =
        serde_json::from_slice(cur.take(manifest_len, "<manifest>")?).map_err(FormatError::Manifest)?;

    let mut bundle = TensorBundle {
        entries: BTreeMap::new(),
        metadata: manifest.metadata,
    };
    let mut prev_end = cur.pos + count.saturating_mul(ENTRY_SIZE);
    for idx in 0..count {
        let ctx = format!("<entry table #{idx}>");
        let record = cur.take(ENTRY_SIZE, &ctx)?;
        let mut rc = Cursor { buf: record, pos: 0 };
        let name_len = {
            let b = rc.take(2, &ctx)?;
            u16::from_le_bytes([b[0], b[1]]) as usize
        };
        let code = rc.take(1, &ctx)?[0];
        let ndim = rc.take(1, &ctx)?[0] as usize;
        rc.take(4, &ctx)?;
        let mut dims = [0u64; MAX_DIMS];
        for d in &mut dims {
            *d = rc.u64(&ctx)?;
        }
        let offset = rc.u64(&ctx)? as usize;
        let length = rc.u64(&ctx)? as usize;
        let name_field = rc.take(MAX_NAME_LEN, &ctx)?;
        if name_len > MAX_NAME_LEN {
            return Err(FormatError::InvalidName(format!("<{name_len}-byte name>")).into());
        }
        let name = String::from_utf8(name_field[..name_len].to_vec())
            .map_err(|_| FormatError::InvalidName("<non-utf8>".into()))?;
        validate_name(&name)?;
        let dtype = DType::from_code(code).ok_or_else(|| FormatError::UnknownDtype {
            entry: name.clone(),
            code,
        })?;
        if ndim > MAX_DIMS {
            return Err(FormatError::BadShape {
                name,
                reason: format!("{ndim} dims"),
            }
            .into());
        }
        let shape: Vec<usize> = dims[..ndim].iter().map(|&d| d as usize).collect();
        check_shape(&name, &shape)?;
        let expected = shape
            .iter()
            .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::BadShape {
                name: name.clone(),
                reason: "shape overflows".into(),
            })?;
        if expected != length {
            return Err(FormatError::LengthMismatch {
                name,
                expected,
                actual: length,
            }
            .into());
        }
        if offset < prev_end {
            return Err(FormatError::Overlap { name }.into());
        }
        let end = offset.checked_add(length).filter(|&e| e <= buf.len());
        let Some(end) = end else {
            return Err(FormatError::Truncated { entry: name }.into());
        };
        prev_end = end;
        let tensor = Tensor {
            dtype,
            shape,
            data: buf[offset..end].to_vec(),
        };
        if bundle.entries.insert(name.clone(), tensor).is_some() {
            return Err(FormatError::NameCollision(name).into());
        }
    }
    Ok(bundle)
}

/// Writes the bundle to `path` through a temporary file in the same
/// directory followed by a rename.
pub fn write_bundle_file(bundle: &TensorBundle, path: &Path) -> Result<u64> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    let n = write_bundle(bundle, &mut tmp)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(n)
}

pub fn read_bundle_file(path: &Path) -> Result<TensorBundle> {
    let f = std::fs::File::open(path)?;
    read_bundle(std::io::BufReader::new(f))
}

/// Entry-name conventions for one layer `L`.
pub mod names {
    pub fn weight(layer: &str) -> String {
        format!("{layer}/W")
    }
    pub fn gram(layer: &str) -> String {
        format!("{layer}/gram")
    }
    pub fn acts(layer: &str) -> String {
        format!("{layer}/acts")
    }
    pub fn quantized(layer: &str) -> String {
        format!("{layer}/Q")
    }
    pub fn adapter_a(layer: &str) -> String {
        format!("{layer}/A")
    }
    pub fn adapter_b(layer: &str) -> String {
        format!("{layer}/B")
    }
    pub fn scales(layer: &str) -> String {
        format!("{layer}/scales")
    }
    pub fn zeros(layer: &str) -> String {
        format!("{layer}/zeros")
    }
    pub fn codes(layer: &str) -> String {
        format!("{layer}/codes")
    }
}

/// Where one layer's tensors live inside an input bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer_id: String,
    pub weight_name: String,
    pub gram_name: Option<String>,
    pub activation_name: Option<String>,
    /// Input features (rows of W).
    pub m: usize,
    /// Output features (columns of W).
    pub n: usize,
}

impl LayerRecord {
    pub fn check(&self, require_calibration: bool) -> Result<()> {
        match (&self.gram_name, &self.activation_name) {
            (Some(_), Some(_)) => Err(Error::BadLayer {
                layer: self.layer_id.clone(),
                reason: "both a Gram matrix and activations are present".into(),
            }),
            (None, None) if require_calibration => Err(Error::MissingTensor {
                layer: self.layer_id.clone(),
                entry: format!("{} or {}", names::gram(&self.layer_id), names::acts(&self.layer_id)),
            }),
            _ => Ok(()),
        }
    }
}

/// Finds every layer `L` with a 2-D `L/W` entry, in name order.
pub fn discover_layers(bundle: &TensorBundle) -> Result<Vec<LayerRecord>> {
    let mut out = Vec::new();
    for (name, t) in bundle.iter() {
        let Some(layer) = name.strip_suffix("/W") else {
            continue;
        };
        if t.shape().len() != 2 {
            return Err(Error::BadLayer {
                layer: layer.to_string(),
                reason: format!("weight must be 2-D, got shape {:?}", t.shape()),
            });
        }
        let gram = names::gram(layer);
        let acts = names::acts(layer);
        out.push(LayerRecord {
            layer_id: layer.to_string(),
            weight_name: name.to_string(),
            gram_name: bundle.contains(&gram).then_some(gram),
            activation_name: bundle.contains(&acts).then_some(acts),
            m: t.shape()[0],
            n: t.shape()[1],
        });
    }
    Ok(out)
}
