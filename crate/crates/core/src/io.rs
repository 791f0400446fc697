//! Binary file formats: photon-count cubes, depth maps, checkpoints, and 16-bit
//! graymap export.
//!
//! All integers and floats are little-endian. Cube and depth files share one header
//! layout: `magic[4] | version u16 | dtype u16 | dims u32... | meta_len u32`, then the
//! payload, then `meta_len` bytes of JSON metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::simulator::{HistogramCube, SimConfig};
use crate::stin::StinConfig;

pub const CUBE_MAGIC: [u8; 4] = *b"PHDC";
pub const DEPTH_MAGIC: [u8; 4] = *b"PHDZ";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PHDK";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("invalid header field {field}: {detail}")]
    Header { field: &'static str, detail: String },
    #[error("truncated payload: need {needed} bytes, {available} available")]
    TruncatedPayload { needed: usize, available: usize },
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("count {value} at index {index} does not fit in u16")]
    CountOverflow { index: usize, value: u32 },
    #[error("metadata: {0}")]
    Metadata(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(IoError::TruncatedPayload { needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn header(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], IoError> {
        self.take(n).map_err(|_| IoError::Header { field, detail: "file ends inside the header".into() })
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.header(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.header(4, field)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), IoError> {
        let m = self.header(4, "magic")?;
        if m != expected {
            return Err(IoError::Magic {
                expected: String::from_utf8_lossy(&expected).into(),
                found: String::from_utf8_lossy(m).into(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), IoError> {
        match self.u16("version")? {
            FORMAT_VERSION => Ok(()),
            v => Err(IoError::Version(v)),
        }
    }

    fn finish(&self) -> Result<(), IoError> {
        let extra = self.buf.len() - self.pos;
        if extra != 0 {
            return Err(IoError::Header {
                field: "meta_len",
                detail: format!("{extra} trailing bytes after metadata"),
            });
        }
        Ok(())
    }
}

fn checked_product(dims: &[u32]) -> Result<usize, IoError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| IoError::DimOverflow(format!("{dims:?}")))
}

fn dim_u32(name: &'static str, v: usize) -> Result<u32, IoError> {
    u32::try_from(v).map_err(|_| IoError::DimOverflow(format!("{name} = {v}")))
}

/// Storage width of cube counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountDtype {
    #[default]
    U16,
    U32,
}

impl CountDtype {
    fn tag(self) -> u16 {
        match self {
            Self::U16 => 16,
            Self::U32 => 32,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CubeMeta {
    sim: SimConfig,
    seed: u64,
    /// Unix seconds; left empty unless the caller supplies one so regenerated files match byte for byte.
    created: Option<u64>,
}

pub fn encode_cube(cube: &HistogramCube, dtype: CountDtype, created: Option<u64>) -> Result<Vec<u8>, IoError> {
    let meta = serde_json::to_vec(&CubeMeta { sim: cube.meta.clone(), seed: cube.meta.seed, created })
        .map_err(|e| IoError::Metadata(e.to_string()))?;
    let width = if dtype == CountDtype::U16 { 2 } else { 4 };
    let mut out = Vec::with_capacity(24 + cube.counts.len() * width + meta.len());
    out.extend_from_slice(&CUBE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.tag().to_le_bytes());
    for (name, d) in [("T", cube.bins), ("Nx", cube.nx), ("Ny", cube.ny)] {
        out.extend_from_slice(&dim_u32(name, d)?.to_le_bytes());
    }
    out.extend_from_slice(&dim_u32("meta_len", meta.len())?.to_le_bytes());
    for (index, &c) in cube.counts.iter().enumerate() {
        match dtype {
            CountDtype::U16 => {
                let v = u16::try_from(c).map_err(|_| IoError::CountOverflow { index, value: c })?;
                out.extend_from_slice(&v.to_le_bytes());
            }
            CountDtype::U32 => out.extend_from_slice(&c.to_le_bytes()),
        }
    }
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<HistogramCube, IoError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(CUBE_MAGIC)?;
    r.version()?;
    let width = match r.u16("dtype")? {
        16 => 2,
        32 => 4,
        d => return Err(IoError::Header { field: "dtype", detail: format!("unknown count width {d}") }),
    };
    let dims = [r.u32("T")?, r.u32("Nx")?, r.u32("Ny")?];
    let meta_len = r.u32("meta_len")? as usize;
    if dims.contains(&0) {
        return Err(IoError::Header { field: "dims", detail: format!("zero-length axis in {dims:?}") });
    }
    let n = checked_product(&dims)?;
    let bytes_needed = n.checked_mul(width).ok_or_else(|| IoError::DimOverflow(format!("{dims:?}")))?;
    let payload = r.take(bytes_needed)?;
    let counts: Vec<u32> = if width == 2 {
        payload.chunks_exact(2).map(|c| u32::from(u16::from_le_bytes([c[0], c[1]]))).collect()
    } else {
        payload.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    };
    let meta: CubeMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| IoError::Metadata(e.to_string()))?;
    r.finish()?;
    HistogramCube::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, counts, meta.sim)
        .map_err(|e| IoError::Metadata(e.to_string()))
}

pub fn write_cube(cube: &HistogramCube, path: &Path, dtype: CountDtype) -> Result<(), IoError> {
    write_atomic(path, &encode_cube(cube, dtype, None)?)
}

pub fn read_cube(path: &Path) -> Result<HistogramCube, IoError> {
    decode_cube(&fs::read(path).map_err(io_err(path))?)
}

pub fn encode_depth(map: &DepthMap) -> Result<Vec<u8>, IoError> {
    let meta = br#"{"units":"m"}"#;
    let (nx, ny) = map.dims();
    let mut out = Vec::with_capacity(20 + nx * ny * 4 + meta.len());
    out.extend_from_slice(&DEPTH_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&32u16.to_le_bytes());
    out.extend_from_slice(&dim_u32("Nx", nx)?.to_le_bytes());
    out.extend_from_slice(&dim_u32("Ny", ny)?.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(meta);
    Ok(out)
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap, IoError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(DEPTH_MAGIC)?;
    r.version()?;
    match r.u16("dtype")? {
        32 => {}
        d => return Err(IoError::Header { field: "dtype", detail: format!("depth maps are f32, tag {d}") }),
    }
    let dims = [r.u32("Nx")?, r.u32("Ny")?];
    let meta_len = r.u32("meta_len")? as usize;
    if dims.contains(&0) {
        return Err(IoError::Header { field: "dims", detail: format!("zero-length axis in {dims:?}") });
    }
    let n = checked_product(&dims)?;
    let payload = r.take(n.checked_mul(4).ok_or_else(|| IoError::DimOverflow(format!("{dims:?}")))?)?;
    let data = payload.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    let meta = r.take(meta_len)?;
    serde_json::from_slice::<serde_json::Value>(meta).map_err(|e| IoError::Metadata(e.to_string()))?;
    r.finish()?;
    Ok(DepthMap::new(dims[0] as usize, dims[1] as usize, data).expect("sized from header"))
}

pub fn write_depth(map: &DepthMap, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &encode_depth(map)?)
}

pub fn read_depth(path: &Path) -> Result<DepthMap, IoError> {
    decode_depth(&fs::read(path).map_err(io_err(path))?)
}

/// Binary 16-bit PGM with linear min/max scaling over valid pixels (NaN → 0), plus the
/// scaling range for the sidecar file.
pub fn encode_pgm16(map: &DepthMap) -> (Vec<u8>, f64, f64) {
    let valid = map.data().iter().copied().filter(|v| !v.is_nan());
    let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let (nx, ny) = map.dims();
    let mut out = format!("P5\n{ny} {nx}\n65535\n").into_bytes();
    for &v in map.data() {
        let q = if v.is_nan() || hi <= lo { 0 } else { ((v - lo) / (hi - lo) * 65535.0).round() as u16 };
        out.extend_from_slice(&q.to_be_bytes());
    }
    (out, lo, hi)
}

/// Writes `path` and `path` + `.txt` holding the `min`/`max` depth of the scaling.
pub fn write_pgm16(map: &DepthMap, path: &Path) -> Result<PathBuf, IoError> {
    let (bytes, lo, hi) = encode_pgm16(map);
    write_atomic(path, &bytes)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    let side = PathBuf::from(side);
    write_atomic(&side, format!("min {lo}\nmax {hi}\n").as_bytes())?;
    Ok(side)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: StinConfig,
    rng: Option<ChaCha8Rng>,
    step: u64,
    params: Vec<(String, Vec<usize>)>,
}

/// Network parameters with their configuration and the training RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: StinConfig,
    pub rng: Option<ChaCha8Rng>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub params: ParamStore<f32>,
}

/// `PHDK | version u16 | reserved u16 | header_len u32 | JSON header | f32 blobs` with
/// blobs in header order.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, IoError> {
    let header = CheckpointHeader {
        config: ck.config.clone(),
        rng: ck.rng.clone(),
        step: ck.step,
        params: ck.params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| IoError::Metadata(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + ck.params.numel() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&dim_u32("header_len", json.len())?.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in ck.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, IoError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    r.u16("reserved")?;
    let len = r.u32("header_len")? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| IoError::Metadata(e.to_string()))?;
    let mut params = ParamStore::new();
    for (path, shape) in header.params {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| IoError::DimOverflow(path.clone()))?;
        let blob = r.take(n.checked_mul(4).ok_or_else(|| IoError::DimOverflow(path.clone()))?)?;
        let data = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| IoError::Header { field: "params", detail: format!("{path}: {e}") })?;
        params.insert(path, t);
    }
    r.finish()?;
    Ok(Checkpoint { config: header.config, rng: header.rng, step: header.step, params })
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), IoError> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    decode_checkpoint(&fs::read(path).map_err(io_err(path))?)
}
