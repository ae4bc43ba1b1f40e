//! Complex multi-dimensional volumes and their on-disk representation.
//!
//! A volume file pair is `<name>.hdr` (TOML key/value header) plus
//! `<name>.c64` (little-endian interleaved real/imag `f64`, x fastest, then
//! y, z, coil, shot, echo). Real maps use the same header with
//! `dtype = "f64le"` and a `<name>.f64` payload.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    /// Frequency-encode samples (x).
    pub n_fe: usize,
    /// Phase-encode samples (y).
    pub n_pe: usize,
    /// Partitions (z).
    pub n_z: usize,
}

impl GridDims {
    pub fn new(n_fe: usize, n_pe: usize, n_z: usize) -> Result<Self> {
        let d = GridDims { n_fe, n_pe, n_z };
        d.validate()?;
        Ok(d)
    }

    pub fn from_array(a: [usize; 3]) -> Result<Self> {
        Self::new(a[0], a[1], a[2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fe == 0 || self.n_pe == 0 || self.n_z == 0 {
            return Err(Error::InvalidDims(format!(
                "all dimensions must be >= 1, got {self}"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.n_fe, self.n_pe, self.n_z]
    }

    /// Voxels per 3D grid.
    pub fn len(&self) -> usize {
        self.n_fe * self.n_pe * self.n_z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn min_dim(&self) -> usize {
        self.n_fe.min(self.n_pe).min(self.n_z)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.n_fe * (y + self.n_pe * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.n_fe;
        let y = (i / self.n_fe) % self.n_pe;
        let z = i / (self.n_fe * self.n_pe);
        (x, y, z)
    }

    pub fn check_kernel(&self, m: usize) -> Result<()> {
        if m > self.min_dim() {
            return Err(Error::KernelTooLarge { kernel: m, min_dim: self.min_dim() });
        }
        Ok(())
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.n_fe, self.n_pe, self.n_z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Image,
    Kspace,
}

impl Space {
    pub fn name(&self) -> &'static str {
        match self {
            Space::Image => "image",
            Space::Kspace => "kspace",
        }
    }
}

/// Complex samples over (x, y, z, coil, shot, echo).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSet {
    pub dims: GridDims,
    pub n_coils: usize,
    pub n_shots: usize,
    pub n_echoes: usize,
    pub space: Space,
    pub data: Vec<C64>,
}

impl VolumeSet {
    pub fn zeros(dims: GridDims, n_coils: usize, n_shots: usize, n_echoes: usize, space: Space) -> Self {
        let n = dims.len() * n_coils * n_shots * n_echoes;
        VolumeSet { dims, n_coils, n_shots, n_echoes, space, data: vec![ZERO; n] }
    }

    pub fn from_vec(
        dims: GridDims,
        n_coils: usize,
        n_shots: usize,
        n_echoes: usize,
        space: Space,
        data: Vec<C64>,
    ) -> Result<Self> {
        dims.validate()?;
        let expected = dims.len() * n_coils * n_shots * n_echoes;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "volume {dims} x {n_coils} coils x {n_shots} shots x {n_echoes} echoes needs {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(VolumeSet { dims, n_coils, n_shots, n_echoes, space, data })
    }

    /// Number of (coil, shot, echo) 3D blocks.
    pub fn n_blocks(&self) -> usize {
        self.n_coils * self.n_shots * self.n_echoes
    }

    #[inline]
    pub fn block_index(&self, c: usize, t: usize, n: usize) -> usize {
        c + self.n_coils * (t + self.n_shots * n)
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize, c: usize, t: usize, n: usize) -> usize {
        self.dims.index(x, y, z) + self.dims.len() * self.block_index(c, t, n)
    }

    /// Inverse of [`offset`](Self::offset).
    pub fn unflatten(&self, i: usize) -> [usize; 6] {
        let nv = self.dims.len();
        let (x, y, z) = self.dims.coords(i % nv);
        let b = i / nv;
        let c = b % self.n_coils;
        let t = (b / self.n_coils) % self.n_shots;
        let n = b / (self.n_coils * self.n_shots);
        [x, y, z, c, t, n]
    }

    pub fn block(&self, c: usize, t: usize, n: usize) -> &[C64] {
        let nv = self.dims.len();
        let b = self.block_index(c, t, n);
        &self.data[b * nv..(b + 1) * nv]
    }

    pub fn block_mut(&mut self, c: usize, t: usize, n: usize) -> &mut [C64] {
        let nv = self.dims.len();
        let b = self.block_index(c, t, n);
        &mut self.data[b * nv..(b + 1) * nv]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Standard complex inner product `<self, other> = sum conj(self) * other`.
    pub fn dot(&self, other: &VolumeSet) -> C64 {
        dot(&self.data, &other.data)
    }

    pub fn same_shape(&self, other: &VolumeSet) -> bool {
        self.dims == other.dims
            && self.n_coils == other.n_coils
            && self.n_shots == other.n_shots
            && self.n_echoes == other.n_echoes
    }

    pub fn shape_string(&self) -> String {
        format!(
            "{} x {} coils x {} shots x {} echoes ({})",
            self.dims,
            self.n_coils,
            self.n_shots,
            self.n_echoes,
            self.space.name()
        )
    }

    /// Magnitude of block (0, t, n) as a real map.
    pub fn magnitude(&self, c: usize, t: usize, n: usize) -> RealMap {
        RealMap {
            dims: self.dims,
            unit: Unit::Arbitrary,
            values: self.block(c, t, n).iter().map(|v| v.norm()).collect(),
        }
    }

    /// Builds a single-coil image volume from real per-echo maps.
    pub fn from_real_maps(maps: &[RealMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::DimensionMismatch("no maps".into()))?;
        let mut data = Vec::with_capacity(first.dims.len() * maps.len());
        for m in maps {
            if m.dims != first.dims {
                return Err(Error::DimensionMismatch(format!("{} vs {}", m.dims, first.dims)));
            }
            data.extend(m.values.iter().map(|&v| C64::new(v, 0.0)));
        }
        VolumeSet::from_vec(first.dims, 1, 1, maps.len(), Space::Image, data)
    }
}

pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Hz,
    Ms,
    Radians,
    Voxels,
    Arbitrary,
}

/// Real scalar map with a unit tag.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMap {
    pub dims: GridDims,
    pub unit: Unit,
    pub values: Vec<f64>,
}

impl RealMap {
    pub fn zeros(dims: GridDims, unit: Unit) -> Self {
        RealMap { dims, unit, values: vec![0.0; dims.len()] }
    }

    pub fn from_fn(dims: GridDims, unit: Unit, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let values = (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                f(x, y, z)
            })
            .collect();
        RealMap { dims, unit, values }
    }

    pub fn from_vec(dims: GridDims, unit: Unit, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "map {dims} needs {} values, got {}",
                dims.len(),
                values.len()
            )));
        }
        let m = RealMap { dims, unit, values };
        m.check_finite()?;
        Ok(m)
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::OutOfRange(format!("non-finite map value at voxel {i}")));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.dims.index(x, y, z)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    n_coils: usize,
    n_shots: usize,
    n_echoes: usize,
    space: Space,
    dtype: String,
    order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<Unit>,
}

const ORDER: &str = "x-fastest";
const DTYPE_COMPLEX: &str = "c64le";
const DTYPE_REAL: &str = "f64le";

/// Strips a known extension so `foo`, `foo.hdr` and `foo.c64` all name the same pair.
pub fn volume_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("hdr") | Some("c64") | Some("f64") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn header_path(path: &Path) -> PathBuf {
    with_suffix(&volume_stem(path), "hdr")
}

pub fn complex_data_path(path: &Path) -> PathBuf {
    with_suffix(&volume_stem(path), "c64")
}

pub fn real_data_path(path: &Path) -> PathBuf {
    with_suffix(&volume_stem(path), "f64")
}

fn write_header(path: &Path, h: &Header) -> Result<()> {
    let text = toml::to_string(h).map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let h: Header = toml::from_str(&text).map_err(|e| Error::CorruptVolume {
        path: path.to_path_buf(),
        reason: format!("unparseable header: {e}"),
    })?;
    if h.order != ORDER {
        return Err(Error::UnsupportedFormat(format!("sample order {:?}", h.order)));
    }
    GridDims::from_array(h.dims)?;
    Ok(h)
}

/// Writes `<path>.hdr` + `<path>.c64`.
pub fn write_volume(v: &VolumeSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let h = Header {
        dims: v.dims.as_array(),
        n_coils: v.n_coils,
        n_shots: v.n_shots,
        n_echoes: v.n_echoes,
        space: v.space,
        dtype: DTYPE_COMPLEX.into(),
        order: ORDER.into(),
        unit: None,
    };
    write_header(&header_path(path), &h)?;
    let mut bytes = Vec::with_capacity(v.data.len() * 16);
    for s in &v.data {
        bytes.extend_from_slice(&s.re.to_le_bytes());
        bytes.extend_from_slice(&s.im.to_le_bytes());
    }
    let dp = complex_data_path(path);
    fs::write(&dp, bytes).map_err(|e| Error::io(&dp, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeSet> {
    let path = path.as_ref();
    let h = read_header(&header_path(path))?;
    if h.dtype != DTYPE_COMPLEX {
        return Err(Error::UnsupportedFormat(format!("dtype {:?} (expected {DTYPE_COMPLEX})", h.dtype)));
    }
    let dims = GridDims::from_array(h.dims)?;
    let n = dims.len() * h.n_coils * h.n_shots * h.n_echoes;
    let dp = complex_data_path(path);
    let bytes = fs::read(&dp).map_err(|e| Error::io(&dp, e))?;
    if bytes.len() != n * 16 {
        return Err(Error::CorruptVolume {
            path: dp,
            reason: format!("expected {} bytes, found {}", n * 16, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..].try_into().unwrap());
            C64::new(re, im)
        })
        .collect();
    VolumeSet::from_vec(dims, h.n_coils, h.n_shots, h.n_echoes, h.space, data)
}

/// Writes `<path>.hdr` + `<path>.f64`.
pub fn write_real_map(m: &RealMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let h = Header {
        dims: m.dims.as_array(),
        n_coils: 1,
        n_shots: 1,
        n_echoes: 1,
        space: Space::Image,
        dtype: DTYPE_REAL.into(),
        order: ORDER.into(),
        unit: Some(m.unit),
    };
    write_header(&header_path(path), &h)?;
    let bytes: Vec<u8> = m.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let dp = real_data_path(path);
    fs::write(&dp, bytes).map_err(|e| Error::io(&dp, e))
}

pub fn read_real_map(path: impl AsRef<Path>) -> Result<RealMap> {
    let path = path.as_ref();
    let h = read_header(&header_path(path))?;
    if h.dtype != DTYPE_REAL {
        return Err(Error::UnsupportedFormat(format!("dtype {:?} (expected {DTYPE_REAL})", h.dtype)));
    }
    let dims = GridDims::from_array(h.dims)?;
    let dp = real_data_path(path);
    let bytes = fs::read(&dp).map_err(|e| Error::io(&dp, e))?;
    if bytes.len() != dims.len() * 8 {
        return Err(Error::CorruptVolume {
            path: dp,
            reason: format!("expected {} bytes, found {}", dims.len() * 8, bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    RealMap::from_vec(dims, h.unit.unwrap_or(Unit::Arbitrary), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(a: usize, b: usize, c: usize) -> GridDims {
        GridDims::new(a, b, c).unwrap()
    }

    #[test]
    fn zero_volume_file_size_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z");
        let v = VolumeSet::zeros(dims(2, 2, 1), 1, 1, 1, Space::Image);
        write_volume(&v, &p).unwrap();
        assert_eq!(fs::read(dir.path().join("z.c64")).unwrap().len(), 64);
        let hdr = fs::read_to_string(dir.path().join("z.hdr")).unwrap();
        assert!(hdr.contains("dims = [2, 2, 1]"), "{hdr}");
        assert!(hdr.contains("dtype = \"c64le\""));
        assert!(hdr.contains("order = \"x-fastest\""));
    }

    #[test]
    fn sample_byte_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pos");
        let mut v = VolumeSet::zeros(dims(3, 2, 2), 2, 2, 2, Space::Kspace);
        let i = v.offset(1, 0, 0, 0, 0, 0);
        assert_eq!(i, 1);
        v.data[i] = C64::new(1.5, -2.25);
        write_volume(&v, &p).unwrap();
        let bytes = fs::read(dir.path().join("pos.c64")).unwrap();
        assert_eq!(&bytes[16..24], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[24..32], &(-2.25f64).to_le_bytes());
        assert!(bytes[..16].iter().all(|&b| b == 0));
    }

    #[test]
    fn truncated_data_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t");
        let v = VolumeSet::zeros(dims(4, 4, 2), 1, 1, 1, Space::Image);
        write_volume(&v, &p).unwrap();
        let dp = dir.path().join("t.c64");
        let bytes = fs::read(&dp).unwrap();
        fs::write(&dp, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::CorruptVolume { .. })));
    }

    #[test]
    fn zero_dim_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        fs::write(
            dir.path().join("bad.hdr"),
            "dims = [0, 4, 4]\nn_coils = 1\nn_shots = 1\nn_echoes = 1\nspace = \"image\"\ndtype = \"c64le\"\norder = \"x-fastest\"\n",
        )
        .unwrap();
        fs::write(dir.path().join("bad.c64"), []).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn unknown_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dt");
        fs::write(
            dir.path().join("dt.hdr"),
            "dims = [1, 1, 1]\nn_coils = 1\nn_shots = 1\nn_echoes = 1\nspace = \"image\"\ndtype = \"c32le\"\norder = \"x-fastest\"\n",
        )
        .unwrap();
        fs::write(dir.path().join("dt.c64"), [0u8; 8]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_volume(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn real_map_round_trip_keeps_unit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("field");
        let m = RealMap::from_fn(dims(3, 4, 2), Unit::Hz, |x, y, z| x as f64 - 0.5 * y as f64 + z as f64 * 1e-3);
        write_real_map(&m, &p).unwrap();
        let back = read_real_map(&p).unwrap();
        assert_eq!(back, m);
        assert!(fs::read_to_string(dir.path().join("field.hdr")).unwrap().contains("unit = \"hz\""));
    }

    #[test]
    fn extension_is_optional() {
        let p = Path::new("/tmp/a/b.hdr");
        assert_eq!(complex_data_path(p), PathBuf::from("/tmp/a/b.c64"));
        assert_eq!(header_path(Path::new("/tmp/a/b")), PathBuf::from("/tmp/a/b.hdr"));
        assert_eq!(header_path(Path::new("/tmp/a/b.v2")), PathBuf::from("/tmp/a/b.v2.hdr"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn flatten_unflatten_bijection(nx in 1usize..5, ny in 1usize..5, nz in 1usize..4,
                                       nc in 1usize..3, ns in 1usize..3, ne in 1usize..3) {
            let v = VolumeSet::zeros(dims(nx, ny, nz), nc, ns, ne, Space::Image);
            for i in 0..v.data.len() {
                let [x, y, z, c, t, n] = v.unflatten(i);
                prop_assert_eq!(v.offset(x, y, z, c, t, n), i);
            }
        }

        #[test]
        fn write_read_is_bit_exact(nx in 1usize..6, ny in 1usize..6, nz in 1usize..4,
                                   nc in 1usize..3, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = dims(nx, ny, nz);
            let data = (0..d.len() * nc * 2)
                .map(|_| C64::new(f64::from_bits(rng.random::<u64>() >> 2), rng.random::<f64>() - 0.5))
                .collect();
            let v = VolumeSet::from_vec(d, nc, 2, 1, Space::Kspace, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt");
            write_volume(&v, &p).unwrap();
            let back = read_volume(&p).unwrap();
            prop_assert!(back.same_shape(&v));
            prop_assert_eq!(back.space, v.space);
            for (a, b) in back.data.iter().zip(&v.data) {
                prop_assert_eq!(a.re.to_bits(), b.re.to_bits());
                prop_assert_eq!(a.im.to_bits(), b.im.to_bits());
            }
        }
    }
}
