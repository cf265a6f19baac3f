//! Bit-exact persistence: header + raw volumes, checkpoints, PGM previews.
//!
//! Volumes use a MetaImage-style pair: a `key = value` text header naming a
//! little-endian raw payload next to it. Checkpoints are one self-describing
//! binary file:
//!
//! ```text
//! "SCPK" | version u32 | tensor count u32
//! per tensor: name_len u32 | name | dtype u8 | rank u8 | dims u32×rank | payload
//! config_len u32 | config bytes | rng_seed u64
//! ```
//!
//! All integers are little-endian. Every write goes to a temporary file that is
//! renamed into place.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SCPK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- volumes

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    Int32,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::Float32 => "MET_FLOAT",
            ElementType::Int32 => "MET_INT",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_FLOAT" => Some(ElementType::Float32),
            "MET_INT" => Some(ElementType::Int32),
            _ => None,
        }
    }
}

/// Voxel types that have a raw encoding.
pub trait Voxel: Copy + Send + Sync + 'static {
    const ELEMENT: ElementType;
    fn put(self, out: &mut Vec<u8>);
    fn take(b: [u8; 4]) -> Self;
}

impl Voxel for f32 {
    const ELEMENT: ElementType = ElementType::Float32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: [u8; 4]) -> Self {
        f32::from_le_bytes(b)
    }
}

impl Voxel for i32 {
    const ELEMENT: ElementType = ElementType::Int32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(b: [u8; 4]) -> Self {
        i32::from_le_bytes(b)
    }
}

/// Parsed volume header.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    pub dim_size: [usize; 3],
    pub element_spacing: [f64; 3],
    pub z_origin: f64,
    pub element_type: ElementType,
    pub data_file: String,
}

impl VolumeHeader {
    pub fn render(&self) -> String {
        let [x, y, s] = self.dim_size;
        let [sx, sy, sz] = self.element_spacing;
        format!(
            "NDims = 3\nDimSize = {x} {y} {s}\nElementSpacing = {sx} {sy} {sz}\nZOrigin = {}\nElementType = {}\nElementDataFile = {}\n",
            self.z_origin,
            self.element_type.tag(),
            self.data_file
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut ndims = None;
        let mut dims = None;
        let mut spacing = None;
        let mut z_origin = None;
        let mut etype = None;
        let mut data_file = None;
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len() as u64;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Format { offset: here, msg };
            let (key, value) = trimmed.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{trimmed}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let floats = |n: usize| -> Result<Vec<f64>> {
                let v: Vec<f64> = value.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| err(format!("{key}: bad number list `{value}`")))?;
                if v.len() != n {
                    return Err(err(format!("{key}: expected {n} values, got {}", v.len())));
                }
                Ok(v)
            };
            match key {
                "NDims" => ndims = Some(value.parse::<usize>().map_err(|_| err(format!("NDims: `{value}`")))?),
                "DimSize" => {
                    let v: Vec<usize> = value.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| err(format!("DimSize: `{value}`")))?;
                    if v.len() != 3 || v.iter().any(|&d| d == 0) {
                        return Err(err(format!("DimSize must be three positive integers, got `{value}`")));
                    }
                    dims = Some([v[0], v[1], v[2]]);
                }
                "ElementSpacing" => {
                    let v = floats(3)?;
                    if v.iter().any(|&s| !(s > 0.0)) {
                        return Err(err(format!("ElementSpacing must be positive, got `{value}`")));
                    }
                    spacing = Some([v[0], v[1], v[2]]);
                }
                "ZOrigin" => z_origin = Some(floats(1)?[0]),
                "ElementType" => etype = Some(ElementType::parse(value).ok_or_else(|| err(format!("unknown ElementType `{value}`")))?),
                "ElementDataFile" => data_file = Some(value.to_string()),
                other => return Err(err(format!("unknown header key `{other}`"))),
            }
        }
        let end = text.len() as u64;
        let missing = |k: &str| Error::Format { offset: end, msg: format!("missing header key {k}") };
        if ndims.ok_or_else(|| missing("NDims"))? != 3 {
            return Err(Error::Format { offset: 0, msg: "NDims must be 3".into() });
        }
        Ok(Self {
            dim_size: dims.ok_or_else(|| missing("DimSize"))?,
            element_spacing: spacing.ok_or_else(|| missing("ElementSpacing"))?,
            z_origin: z_origin.ok_or_else(|| missing("ZOrigin"))?,
            element_type: etype.ok_or_else(|| missing("ElementType"))?,
            data_file: data_file.ok_or_else(|| missing("ElementDataFile"))?,
        })
    }

    pub fn payload_len(&self) -> u64 {
        self.dim_size.iter().product::<usize>() as u64 * 4
    }
}

/// Raw payload path written next to a header: `foo.mhd` → `foo.raw`.
fn raw_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes a grid as `path` (header) plus a `.raw` payload beside it.
pub fn write_volume<T: Voxel>(grid: &Grid<T>, path: &Path) -> Result<()> {
    let raw = raw_path(path);
    let header = VolumeHeader {
        dim_size: grid.dims(),
        element_spacing: grid.spacing(),
        z_origin: grid.z_origin(),
        element_type: T::ELEMENT,
        data_file: raw.file_name().expect("raw file name").to_string_lossy().into_owned(),
    };
    let mut payload = Vec::with_capacity(grid.data().len() * 4);
    for &v in grid.data() {
        v.put(&mut payload);
    }
    atomic_write(&raw, &payload)?;
    atomic_write(path, header.render().as_bytes())
}

/// A volume of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    Float(Grid<f32>),
    Int(Grid<i32>),
}

fn decode<T: Voxel>(h: &VolumeHeader, bytes: &[u8]) -> Result<Grid<T>> {
    let data = bytes.chunks_exact(4).map(|c| T::take([c[0], c[1], c[2], c[3]])).collect();
    Grid::new(h.dim_size, h.element_spacing, h.z_origin, data)
}

pub fn read_volume(path: &Path) -> Result<AnyVolume> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::Format { offset: e.utf8_error().valid_up_to() as u64, msg: "header is not UTF-8".into() })?;
    let header = VolumeHeader::parse(&text)?;
    let raw = path.parent().unwrap_or(Path::new("")).join(&header.data_file);
    let bytes = read_bytes(&raw)?;
    if bytes.len() as u64 != header.payload_len() {
        return Err(Error::Format {
            offset: bytes.len().min(header.payload_len() as usize) as u64,
            msg: format!("payload length {} != {} ({:?} × 4 bytes) in {}", bytes.len(), header.payload_len(), header.dim_size, raw.display()),
        });
    }
    Ok(match header.element_type {
        ElementType::Float32 => AnyVolume::Float(decode(&header, &bytes)?),
        ElementType::Int32 => AnyVolume::Int(decode(&header, &bytes)?),
    })
}

pub fn read_float_volume(path: &Path) -> Result<Grid<f32>> {
    match read_volume(path)? {
        AnyVolume::Float(g) => Ok(g),
        AnyVolume::Int(_) => Err(Error::Data(format!("{} holds MET_INT, expected MET_FLOAT", path.display()))),
    }
}

pub fn read_label_volume(path: &Path) -> Result<Grid<i32>> {
    match read_volume(path)? {
        AnyVolume::Int(g) => Ok(g),
        AnyVolume::Float(_) => Err(Error::Data(format!("{} holds MET_FLOAT, expected MET_INT", path.display()))),
    }
}

// ------------------------------------------------------------ checkpoints

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I32 = 2,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I32),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub payload: Vec<u8>,
}

impl NamedTensor {
    pub fn f32(name: impl Into<String>, t: &Tensor<f32>) -> Self {
        let payload = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { name: name.into(), dtype: DType::F32, shape: t.shape().to_vec(), payload }
    }

    pub fn f64(name: impl Into<String>, shape: &[usize], data: &[f64]) -> Self {
        let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { name: name.into(), dtype: DType::F64, shape: shape.to_vec(), payload }
    }

    pub fn expected_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.width()
    }

    pub fn to_f32(&self) -> Result<Tensor<f32>> {
        if self.dtype != DType::F32 {
            return Err(Error::Validation(format!("tensor `{}` is {:?}, expected F32", self.name, self.dtype)));
        }
        let data = self.payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Tensor::new(&self.shape, data)
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        if self.dtype != DType::F64 {
            return Err(Error::Validation(format!("tensor `{}` is {:?}, expected F64", self.name, self.dtype)));
        }
        Ok(self.payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Named tensors plus the config text and seed that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config: String,
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Validation(format!("duplicate tensor name `{}`", t.name)));
            }
            if t.shape.len() > u8::MAX as usize {
                return Err(Error::Validation(format!("tensor `{}` has rank {}", t.name, t.shape.len())));
            }
            if t.payload.len() != t.expected_len() {
                return Err(Error::Validation(format!("tensor `{}` with shape {:?} needs {} payload bytes, got {}", t.name, t.shape, t.expected_len(), t.payload.len())));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Validation(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    /// Stores every parameter of `ps` as `prefix.name`. With `optimizer`, the
    /// Adam moments and step counter are stored too.
    pub fn put_params(&mut self, prefix: &str, ps: &ParamSet<f32>, optimizer: bool) {
        for p in ps.iter() {
            self.push(NamedTensor::f32(format!("{prefix}.{}", p.name), &p.value));
            if optimizer {
                self.push(NamedTensor::f32(format!("{prefix}.adam_m.{}", p.name), &p.m));
                self.push(NamedTensor::f32(format!("{prefix}.adam_v.{}", p.name), &p.v));
            }
        }
        if optimizer {
            self.push(NamedTensor::f64(format!("{prefix}.adam_step"), &[1], &[ps.step_count() as f64]));
        }
    }

    /// Loads values (and optimizer state when present) into an existing set.
    pub fn load_params(&self, prefix: &str, ps: &mut ParamSet<f32>) -> Result<()> {
        let names: Vec<String> = ps.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let id = ps.id(&name).expect("own name");
            let value = self.get(&format!("{prefix}.{name}"))?.to_f32()?;
            let p = ps.get_mut(id);
            if value.shape() != p.value.shape() {
                return Err(Error::Validation(format!("`{prefix}.{name}`: checkpoint shape {:?} vs model {:?}", value.shape(), p.value.shape())));
            }
            p.value = value;
            if let Ok(m) = self.get(&format!("{prefix}.adam_m.{name}")) {
                p.m = m.to_f32()?;
                p.v = self.get(&format!("{prefix}.adam_v.{name}"))?.to_f32()?;
            }
        }
        if let Ok(step) = self.get(&format!("{prefix}.adam_step")) {
            ps.set_step_count(step.to_f64()?[0] as u64);
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype as u8);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::NotACheckpoint(magic));
        }
        let version = r.u32("version")?;
        if version > CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, supported: CHECKPOINT_VERSION });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let at = r.pos as u64;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| Error::Format { offset: at, msg: "tensor name is not UTF-8".into() })?;
            let at = r.pos as u64;
            let dtype = DType::from_code(r.take(1, "dtype")?[0]).ok_or_else(|| Error::Format { offset: at, msg: "unknown dtype".into() })?;
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product::<usize>() * dtype.width();
            let payload = r.take(len, "payload")?.to_vec();
            tensors.push(NamedTensor { name, dtype, shape, payload });
        }
        let cfg_len = r.u32("config length")? as usize;
        let at = r.pos as u64;
        let config = String::from_utf8(r.take(cfg_len, "config")?.to_vec()).map_err(|_| Error::Format { offset: at, msg: "config echo is not UTF-8".into() })?;
        let rng_seed = u64::from_le_bytes(r.take(8, "rng seed")?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos as u64, msg: "trailing bytes after checkpoint".into() });
        }
        let ckpt = Self { tensors, config, rng_seed };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos as u64, msg: format!("truncated while reading {what}") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &ckpt.encode()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&read_bytes(path)?)
}

// --------------------------------------------------------------- previews

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Coronal,
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Places images side by side, top-aligned, with a `gap`-pixel black gutter.
    pub fn hstack(images: &[Gray8], gap: usize) -> Gray8 {
        let height = images.iter().map(|i| i.height).max().unwrap_or(0);
        let width = images.iter().map(|i| i.width).sum::<usize>() + gap * images.len().saturating_sub(1);
        let mut pixels = vec![0u8; width * height];
        let mut x0 = 0;
        for img in images {
            for y in 0..img.height {
                pixels[y * width + x0..y * width + x0 + img.width].copy_from_slice(&img.pixels[y * img.width..(y + 1) * img.width]);
            }
            x0 += img.width + gap;
        }
        Gray8 { width, height, pixels }
    }
}

/// `round(255·clamp((h − lo)/(hi − lo), 0, 1))`.
pub fn window_to_u8(h: f64, lo: f64, hi: f64) -> u8 {
    (255.0 * ((h - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8
}

pub fn preview_image(volume: &Grid<f32>, plane: Plane, index: usize, window: (f64, f64)) -> Result<Gray8> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::Range(format!("window lo {lo} must be below hi {hi}")));
    }
    let [nx, ny, ns] = volume.dims();
    let (width, height, bound) = match plane {
        Plane::Axial => (nx, ny, ns),
        Plane::Coronal => (nx, ns, ny),
    };
    if index >= bound {
        return Err(Error::Range(format!("{plane:?} index {index} outside 0..{bound}")));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let h = match plane {
                Plane::Axial => volume.get(c, r, index),
                Plane::Coronal => volume.get(c, index, r),
            };
            pixels.push(window_to_u8(h as f64, lo, hi));
        }
    }
    Ok(Gray8 { width, height, pixels })
}

pub fn export_preview(volume: &Grid<f32>, path: &Path, plane: Plane, index: usize, window: (f64, f64)) -> Result<()> {
    atomic_write(path, &preview_image(volume, plane, index, window)?.to_pgm())
}
