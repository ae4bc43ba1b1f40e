//! T2* mapping by dictionary matching and the image-quality metrics used to
//! compare reconstructions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::volumes::{GridDims, RealMap, Unit, VolumeSet};

/// Upper end of the T2* search range, ms.
pub const T2STAR_MAX_MS: f64 = 300.0;
pub const T2STAR_MIN_MS: f64 = 1.0;

/// Magnitude decay atoms `exp(-TE_n / T2*)`, normalized to unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct T2starDictionary {
    pub te_ms: Vec<f64>,
    pub t2star_grid_ms: Vec<f64>,
    /// Row-major `n_atoms x n_echoes`.
    pub atoms: Vec<f64>,
    /// Euclidean norm of each atom before normalization.
    pub raw_norms: Vec<f64>,
}

/// 1..=125 ms in steps of 1, then 126..=300 ms in steps of 3.
pub fn t2star_grid() -> Vec<f64> {
    let fine = (1..=125).map(|t| t as f64);
    let coarse = (0..59).map(|i| 126.0 + 3.0 * i as f64);
    fine.chain(coarse).collect()
}

impl T2starDictionary {
    pub fn new(te_ms: &[f64]) -> Result<Self> {
        if te_ms.len() < 2 {
            return Err(Error::Config(format!("T2* fitting needs at least 2 echoes, got {}", te_ms.len())));
        }
        if te_ms.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Config(format!("echo times must be finite and >= 0: {te_ms:?}")));
        }
        let grid = t2star_grid();
        let ne = te_ms.len();
        let mut atoms = Vec::with_capacity(grid.len() * ne);
        let mut raw_norms = Vec::with_capacity(grid.len());
        for &t2 in &grid {
            let curve: Vec<f64> = te_ms.iter().map(|te| (-te / t2).exp()).collect();
            let n = curve.iter().map(|v| v * v).sum::<f64>().sqrt();
            atoms.extend(curve.iter().map(|v| v / n));
            raw_norms.push(n);
        }
        Ok(T2starDictionary { te_ms: te_ms.to_vec(), t2star_grid_ms: grid, atoms, raw_norms })
    }

    pub fn n_atoms(&self) -> usize {
        self.t2star_grid_ms.len()
    }

    pub fn n_echoes(&self) -> usize {
        self.te_ms.len()
    }

    pub fn atom(&self, a: usize) -> &[f64] {
        let ne = self.n_echoes();
        &self.atoms[a * ne..(a + 1) * ne]
    }

    /// Best atom for one signal: `(atom index, correlation)`; ties go to the
    /// smaller T2*.
    pub fn best_match(&self, signal: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..self.n_atoms() {
            let c: f64 = self.atom(a).iter().zip(signal).map(|(x, s)| x * s).sum();
            if c.abs() > best.1 {
                best = (a, c.abs());
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct T2starFit {
    pub t2star_ms: RealMap,
    pub pd: RealMap,
    /// Support voxels with an all-zero signal; their T2* is the sentinel 0.
    pub flagged: usize,
}

fn echo_signals(echoes: &VolumeSet, n_expected: Option<usize>) -> Result<Vec<Vec<f64>>> {
    if echoes.n_coils != 1 || echoes.n_shots != 1 {
        return Err(Error::DimensionMismatch(format!(
            "T2* fitting expects one coil and one shot per echo, got {}",
            echoes.shape_string()
        )));
    }
    if let Some(n) = n_expected {
        if echoes.n_echoes != n {
            return Err(Error::DimensionMismatch(format!(
                "{} echoes but the dictionary has {n} echo times",
                echoes.n_echoes
            )));
        }
    }
    Ok((0..echoes.n_echoes).map(|n| echoes.block(0, 0, n).iter().map(|v| v.norm()).collect()).collect())
}

fn check_support(dims: GridDims, support: &[bool]) -> Result<()> {
    if support.len() != dims.len() {
        return Err(Error::DimensionMismatch(format!("support has {} voxels, grid {dims} has {}", support.len(), dims.len())));
    }
    Ok(())
}

/// Dictionary fit on echo magnitudes. The amplitude is the projection onto
/// the matched atom rescaled to the unnormalized decay curve, so a noiseless
/// `pd exp(-TE/T2*)` returns `pd` itself.
pub fn fit_t2star_varpro(echoes: &VolumeSet, dict: &T2starDictionary, support: &[bool]) -> Result<T2starFit> {
    let dims = echoes.dims;
    check_support(dims, support)?;
    let mags = echo_signals(echoes, Some(dict.n_echoes()))?;
    let ne = dict.n_echoes();
    let fits = exec::map_range(dims.len(), |i| {
        if !support[i] {
            return (0.0, 0.0, false);
        }
        let s: Vec<f64> = (0..ne).map(|n| mags[n][i]).collect();
        if s.iter().all(|v| *v == 0.0) {
            return (0.0, 0.0, true);
        }
        let (a, _) = dict.best_match(&s);
        let proj: f64 = dict.atom(a).iter().zip(&s).map(|(x, v)| x * v).sum();
        (dict.t2star_grid_ms[a], proj / dict.raw_norms[a], false)
    });
    let mut t2 = RealMap::zeros(dims, Unit::Ms);
    let mut pd = RealMap::zeros(dims, Unit::Arbitrary);
    let mut flagged = 0;
    for (i, (t, p, f)) in fits.into_iter().enumerate() {
        t2.values[i] = t;
        pd.values[i] = p;
        flagged += f as usize;
    }
    if flagged > 0 {
        log::warn!("{flagged} support voxels have zero signal; T2* set to 0");
    }
    Ok(T2starFit { t2star_ms: t2, pd, flagged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoglinFit {
    pub t2star_ms: RealMap,
    /// Support voxels skipped for a non-positive magnitude; left at 0.
    pub excluded: usize,
}

/// Least-squares line through `(TE, ln|S|)`; `T2* = -1/slope`, clamped to
/// `[1, 300]` ms.
pub fn fit_t2star_loglin(echoes: &VolumeSet, te_ms: &[f64], support: &[bool]) -> Result<LoglinFit> {
    let dims = echoes.dims;
    check_support(dims, support)?;
    if te_ms.len() < 2 {
        return Err(Error::Config(format!("log-linear fit needs at least 2 echoes, got {}", te_ms.len())));
    }
    let mags = echo_signals(echoes, Some(te_ms.len()))?;
    let ne = te_ms.len() as f64;
    let t_mean = te_ms.iter().sum::<f64>() / ne;
    let sxx: f64 = te_ms.iter().map(|t| (t - t_mean).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Config("log-linear fit needs distinct echo times".into()));
    }
    let fits = exec::map_range(dims.len(), |i| {
        if !support[i] {
            return Some(0.0);
        }
        let mut logs = Vec::with_capacity(te_ms.len());
        for m in &mags {
            if !(m[i] > 0.0) {
                return None;
            }
            logs.push(m[i].ln());
        }
        let l_mean = logs.iter().sum::<f64>() / ne;
        let sxy: f64 = te_ms.iter().zip(&logs).map(|(t, l)| (t - t_mean) * (l - l_mean)).sum();
        let slope = sxy / sxx;
        Some(if slope < 0.0 { (-1.0 / slope).clamp(T2STAR_MIN_MS, T2STAR_MAX_MS) } else { T2STAR_MAX_MS })
    });
    let mut t2 = RealMap::zeros(dims, Unit::Ms);
    let mut excluded = 0;
    for (i, f) in fits.into_iter().enumerate() {
        match f {
            Some(v) => t2.values[i] = v,
            None => excluded += 1,
        }
    }
    Ok(LoglinFit { t2star_ms: t2, excluded })
}

/// Spacing of the dictionary grid around `t2star_ms`.
pub fn local_grid_step(t2star_ms: f64) -> f64 {
    if t2star_ms <= 125.0 {
        1.0
    } else {
        3.0
    }
}

fn check_same(a: &RealMap, b: &RealMap) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch(format!("{} vs {}", a.dims, b.dims)));
    }
    Ok(())
}

/// `100 ||x - ref|| / ||ref||` over the mask (all voxels when `None`).
pub fn rmse_percent(x: &RealMap, reference: &RealMap, mask: Option<&[bool]>) -> Result<f64> {
    check_same(x, reference)?;
    if let Some(m) = mask {
        check_support(x.dims, m)?;
    }
    let inside = |i: usize| mask.is_none_or(|m| m[i]);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (a, r)) in x.values.iter().zip(&reference.values).enumerate() {
        if inside(i) {
            num += (a - r) * (a - r);
            den += r * r;
        }
    }
    if !(den > 0.0) {
        return Err(Error::OutOfRange("reference is zero inside the mask".into()));
    }
    Ok(100.0 * (num / den).sqrt())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `nx x ny` slice.
fn filter_valid(img: &[f64], nx: usize, ny: usize, k: &[f64]) -> Vec<f64> {
    let w = k.len();
    let ox = nx + 1 - w;
    let oy = ny + 1 - w;
    let mut rows = vec![0.0; ox * ny];
    for y in 0..ny {
        for x in 0..ox {
            rows[y * ox + x] = (0..w).map(|j| k[j] * img[y * nx + x + j]).sum();
        }
    }
    let mut out = vec![0.0; ox * oy];
    for y in 0..oy {
        for x in 0..ox {
            out[y * ox + x] = (0..w).map(|j| k[j] * rows[(y + j) * ox + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one 2D slice, both inputs already scaled to `[0, 1]`.
pub fn ssim_slice(x: &[f64], r: &[f64], nx: usize, ny: usize) -> Result<f64> {
    if nx < SSIM_WINDOW || ny < SSIM_WINDOW {
        return Err(Error::InvalidDims(format!("SSIM needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {nx}x{ny}")));
    }
    let k = ssim_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let rr: Vec<f64> = r.iter().map(|v| v * v).collect();
    let xr: Vec<f64> = x.iter().zip(r).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, nx, ny, &k);
    let mr = filter_valid(r, nx, ny, &k);
    let sxx = filter_valid(&xx, nx, ny, &k);
    let srr = filter_valid(&rr, nx, ny, &k);
    let sxr = filter_valid(&xr, nx, ny, &k);
    let n = mx.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (mx[i], mr[i]);
        let va = sxx[i] - a * a;
        let vb = srr[i] - b * b;
        let cov = sxr[i] - a * b;
        acc += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2));
    }
    Ok(acc / n as f64)
}

/// Slicewise mean SSIM after dividing both maps by the reference maximum.
pub fn ssim(x: &RealMap, reference: &RealMap) -> Result<f64> {
    check_same(x, reference)?;
    let scale = reference.max_abs();
    if !(scale > 0.0) {
        return Err(Error::OutOfRange("SSIM reference is all zero".into()));
    }
    let d = x.dims;
    let plane = d.n_fe * d.n_pe;
    let mut total = 0.0;
    for z in 0..d.n_z {
        let xs: Vec<f64> = x.values[z * plane..(z + 1) * plane].iter().map(|v| v / scale).collect();
        let rs: Vec<f64> = reference.values[z * plane..(z + 1) * plane].iter().map(|v| v / scale).collect();
        total += ssim_slice(&xs, &rs, d.n_fe, d.n_pe)?;
    }
    Ok(total / d.n_z as f64)
}

/// Half-open voxel box `[x0, x1) x [y0, y1) x [z0, z1)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub label: String,
    pub x0: usize,
    pub y0: usize,
    pub z0: usize,
    pub x1: usize,
    pub y1: usize,
    pub z1: usize,
}

impl Roi {
    pub fn validate(&self, dims: GridDims) -> Result<()> {
        let ok = self.x0 < self.x1
            && self.y0 < self.y1
            && self.z0 < self.z1
            && self.x1 <= dims.n_fe
            && self.y1 <= dims.n_pe
            && self.z1 <= dims.n_z;
        if !ok {
            return Err(Error::OutOfRange(format!("ROI '{}' is empty or outside {dims}", self.label)));
        }
        Ok(())
    }

    pub fn voxels(&self, dims: GridDims) -> impl Iterator<Item = usize> + '_ {
        (self.z0..self.z1)
            .flat_map(move |z| (self.y0..self.y1).flat_map(move |y| (self.x0..self.x1).map(move |x| dims.index(x, y, z))))
    }

    pub fn len(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0) * (self.z1 - self.z0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSet {
    pub roi: Vec<Roi>,
}

impl RoiSet {
    pub fn validate(&self, dims: GridDims) -> Result<()> {
        if self.roi.is_empty() {
            return Err(Error::Config("ROI set is empty".into()));
        }
        self.roi.iter().try_for_each(|r| r.validate(dims))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(format!("ROI config: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("ROI config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Mean of `map` over each ROI.
    pub fn means(&self, map: &RealMap) -> Result<Vec<f64>> {
        self.validate(map.dims)?;
        Ok(self.roi.iter().map(|r| roi_mean(map, r)).collect())
    }
}

pub fn roi_mean(map: &RealMap, roi: &Roi) -> f64 {
    roi.voxels(map.dims).map(|i| map.values[i]).sum::<f64>() / roi.len() as f64
}

/// Mean over standard deviation of magnitudes in the ROI; `+inf` for a
/// constant ROI.
pub fn local_snr(img: &RealMap, roi: &Roi) -> Result<f64> {
    roi.validate(img.dims)?;
    let v: Vec<f64> = roi.voxels(img.dims).map(|i| img.values[i].abs()).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.iter().all(|x| *x == v[0]) {
        return Ok(f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(mean / var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub n: usize,
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Bias and 95% limits of agreement of `a - b`.
pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::OutOfRange(format!("Bland-Altman needs at least 2 pairs, got {}", a.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let bias = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(BlandAltman { n: d.len(), bias, loa_low: bias - 1.96 * sd, loa_high: bias + 1.96 * sd })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub method: String,
    pub echo: usize,
    pub rmse_percent: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiStat {
    pub method: String,
    pub roi: String,
    pub mean: f64,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub a: String,
    pub b: String,
    pub result: BlandAltman,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub rois: Vec<RoiStat>,
    pub agreement: Vec<Agreement>,
}

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "kind,method,echo,roi,rmse_percent,ssim,mean,snr,bias,loa_low,loa_high";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for m in &self.images {
            let _ = writeln!(s, "image,{},{},,{},{},,,,,", m.method, m.echo, fmt_num(m.rmse_percent), fmt_num(m.ssim));
        }
        for r in &self.rois {
            let _ = writeln!(s, "roi,{},,{},,,{},{},,,", r.method, r.roi, fmt_num(r.mean), fmt_num(r.snr));
        }
        for a in &self.agreement {
            let _ = writeln!(
                s,
                "bland_altman,{}-{},,,,,,,{},{},{}",
                a.a,
                a.b,
                fmt_num(a.result.bias),
                fmt_num(a.result.loa_low),
                fmt_num(a.result.loa_high)
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        if !self.images.is_empty() {
            s.push_str("image metrics\n");
            for m in &self.images {
                let _ = writeln!(s, "  {:<14} echo {}  rmse {:>8.3}%  ssim {:.4}", m.method, m.echo, m.rmse_percent, m.ssim);
            }
        }
        if !self.rois.is_empty() {
            s.push_str("roi statistics\n");
            for r in &self.rois {
                let _ = writeln!(s, "  {:<14} {:<10} mean {:>10.4}  snr {}", r.method, r.roi, r.mean, fmt_num(r.snr));
            }
        }
        if !self.agreement.is_empty() {
            s.push_str("bland-altman\n");
            for a in &self.agreement {
                let r = a.result;
                let _ = writeln!(
                    s,
                    "  {} vs {} (n={}): bias {:.4}, limits [{:.4}, {:.4}]",
                    a.a, a.b, r.n, r.bias, r.loa_low, r.loa_high
                );
            }
        }
        s
    }
}
