//! Ground-truth digital objects: tissue maps, coil sensitivities,
//! off-resonance field, per-echo images and per-shot phase errors.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{GridDims, RealMap, Space, Unit, VolumeSet, C64, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomPreset {
    Ellipsoids,
    Uniform,
}

/// T2* values assigned to ellipsoid compartments, ms.
pub const COMPARTMENT_T2STAR_MS: [f64; 4] = [40.0, 55.0, 70.0, 90.0];

/// T2* of the uniform preset, ms.
pub const UNIFORM_T2STAR_MS: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub preset: PhantomPreset,
    /// Peak |value| of the smooth second-order background field.
    pub poly_peak_hz: f64,
    /// Peak of the Gaussian susceptibility blob.
    pub blob_peak_hz: f64,
    pub blob_sigma_vox: f64,
    /// Bound on the discrete Laplacian of the background field, Hz/voxel^2.
    pub max_field_laplacian_hz: f64,
    /// Peak |phi0| for the ellipsoids preset.
    pub phase_amplitude_rad: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            preset: PhantomPreset::Ellipsoids,
            poly_peak_hz: 0.0,
            blob_peak_hz: 0.0,
            blob_sigma_vox: 3.0,
            max_field_laplacian_hz: 2.0,
            phase_amplitude_rad: 0.3,
        }
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Compartment {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub pd: f64,
    pub t2star_ms: f64,
}

impl Compartment {
    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let p = [x, y, z];
        (0..3).map(|i| ((p[i] - self.center[i]) / self.semi_axes[i]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub dims: GridDims,
    pub pd: RealMap,
    pub t2star_ms: RealMap,
    pub df_hz: RealMap,
    pub phi0: RealMap,
    pub support: Vec<bool>,
    pub compartments: Vec<Compartment>,
    /// Voxel index of the susceptibility blob center, if any.
    pub blob_center: Option<[usize; 3]>,
}

/// Normalized coordinate in [-0.5, 0.5) with 0 at index floor(n/2).
#[inline]
fn norm_coord(i: usize, n: usize) -> f64 {
    (i as f64 - (n / 2) as f64) / n as f64
}

/// Zero margin kept along each axis, voxels.
pub fn support_margins(dims: GridDims) -> [f64; 3] {
    [
        (0.12 * dims.n_fe as f64).round().max(2.0),
        (0.2 * dims.n_pe as f64).round().max(3.0),
        (0.12 * dims.n_z as f64).round().max(1.0),
    ]
}

fn outer_ellipsoid(dims: GridDims) -> ([f64; 3], [f64; 3]) {
    let n = dims.as_array();
    let m = support_margins(dims);
    let center = [(n[0] / 2) as f64, (n[1] / 2) as f64, (n[2] / 2) as f64];
    // keep the ellipsoid inside [margin, n - 1 - margin] on both sides
    let semi = [0, 1, 2].map(|i| (center[i] - m[i]).min(n[i] as f64 - 1.0 - m[i] - center[i]).max(0.5));
    (center, semi)
}

/// Second-order polynomial in normalized coordinates, monomials
/// `1, u, v, w, u^2, v^2, w^2, uv, uw, vw`.
fn poly2(coef: &[f64; 10], u: f64, v: f64, w: f64) -> f64 {
    coef[0]
        + coef[1] * u
        + coef[2] * v
        + coef[3] * w
        + coef[4] * u * u
        + coef[5] * v * v
        + coef[6] * w * w
        + coef[7] * u * v
        + coef[8] * u * w
        + coef[9] * v * w
}

fn poly_map(dims: GridDims, coef: &[f64; 10], peak: f64, unit: Unit) -> RealMap {
    let raw = RealMap::from_fn(dims, unit, |x, y, z| {
        poly2(coef, norm_coord(x, dims.n_fe), norm_coord(y, dims.n_pe), norm_coord(z, dims.n_z))
    });
    let m = raw.max_abs();
    if peak == 0.0 || m == 0.0 {
        return RealMap::zeros(dims, unit);
    }
    let s = peak / m;
    RealMap { values: raw.values.iter().map(|v| v * s).collect(), ..raw }
}

fn random_coefs(rng: &mut ChaCha8Rng) -> [f64; 10] {
    let mut c = [0.0; 10];
    for v in c.iter_mut() {
        *v = rng.random::<f64>() * 2.0 - 1.0;
    }
    c
}

/// Max |discrete Laplacian| over the grid interior.
pub fn max_laplacian(map: &RealMap, skip: impl Fn(usize, usize, usize) -> bool) -> f64 {
    let d = map.dims;
    let mut worst: f64 = 0.0;
    for z in 0..d.n_z {
        for y in 0..d.n_pe {
            for x in 0..d.n_fe {
                if skip(x, y, z) {
                    continue;
                }
                let c = map.at(x, y, z);
                let mut lap = 0.0;
                let mut axes = 0;
                if x > 0 && x + 1 < d.n_fe {
                    lap += map.at(x - 1, y, z) + map.at(x + 1, y, z) - 2.0 * c;
                    axes += 1;
                }
                if y > 0 && y + 1 < d.n_pe {
                    lap += map.at(x, y - 1, z) + map.at(x, y + 1, z) - 2.0 * c;
                    axes += 1;
                }
                if z > 0 && z + 1 < d.n_z {
                    lap += map.at(x, y, z - 1) + map.at(x, y, z + 1) - 2.0 * c;
                    axes += 1;
                }
                if axes > 0 {
                    worst = worst.max(lap.abs());
                }
            }
        }
    }
    worst
}

pub fn make_phantom(dims: GridDims, seed: u64, params: &PhantomParams) -> Result<Phantom> {
    dims.validate()?;
    if params.preset == PhantomPreset::Ellipsoids && dims.min_dim() < 8 {
        return Err(Error::InvalidDims(format!("ellipsoids preset needs every dimension >= 8, got {dims}")));
    }
    if params.blob_sigma_vox <= 0.0 || !params.blob_sigma_vox.is_finite() {
        return Err(Error::Config("blob_sigma_vox must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (center, semi) = outer_ellipsoid(dims);

    let compartments = match params.preset {
        PhantomPreset::Uniform => vec![Compartment { center, semi_axes: semi, pd: 1.0, t2star_ms: UNIFORM_T2STAR_MS }],
        PhantomPreset::Ellipsoids => {
            let count = rng.random_range(3..=6usize);
            let mut order = COMPARTMENT_T2STAR_MS;
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let mut pds: Vec<f64> = Vec::new();
            let mut out = Vec::with_capacity(count);
            for k in 0..count {
                let pd = loop {
                    let p = 0.5 + 0.5 * rng.random::<f64>();
                    if pds.iter().all(|q| (p - q).abs() > 0.05) {
                        break p;
                    }
                };
                pds.push(pd);
                let t2 = order[k % order.len()];
                if k == 0 {
                    out.push(Compartment { center, semi_axes: semi, pd, t2star_ms: t2 });
                    continue;
                }
                // inner compartments: scaled copies placed fully inside the outer one
                let scale: [f64; 3] = [0, 1, 2].map(|_| 0.3 + 0.25 * rng.random::<f64>());
                let axes = [0, 1, 2].map(|i| (semi[i] * scale[i]).max(1.0));
                let room = [0, 1, 2].map(|i| (semi[i] - axes[i]) * 0.5);
                let c = [0, 1, 2].map(|i| center[i] + room[i] * (2.0 * rng.random::<f64>() - 1.0));
                out.push(Compartment { center: c, semi_axes: axes, pd, t2star_ms: t2 });
            }
            out
        }
    };

    let mut pd = RealMap::zeros(dims, Unit::Arbitrary);
    let mut t2 = RealMap::zeros(dims, Unit::Ms);
    let mut support = vec![false; dims.len()];
    for i in 0..dims.len() {
        let (x, y, z) = dims.coords(i);
        for comp in &compartments {
            if comp.contains(x as f64, y as f64, z as f64) {
                pd.values[i] = comp.pd;
                t2.values[i] = comp.t2star_ms;
                support[i] = true;
            }
        }
    }

    // Background field: smooth polynomial with a bounded Laplacian.
    let coef = random_coefs(&mut rng);
    let mut df = poly_map(dims, &coef, params.poly_peak_hz, Unit::Hz);
    let lap = max_laplacian(&df, |_, _, _| false);
    if lap > params.max_field_laplacian_hz && lap > 0.0 {
        let s = params.max_field_laplacian_hz / lap;
        df.values.iter_mut().for_each(|v| *v *= s);
    }

    let mut blob_center = None;
    if params.blob_peak_hz != 0.0 {
        // blob sits on a supported voxel near the middle of the object
        let inner: Vec<usize> = (0..dims.len())
            .filter(|&i| {
                let (x, y, z) = dims.coords(i);
                support[i]
                    && [x as f64, y as f64, z as f64]
                        .iter()
                        .zip(center.iter().zip(&semi))
                        .all(|(p, (c, s))| (p - c).abs() <= 0.5 * s)
            })
            .collect();
        let pick = if inner.is_empty() { dims.index(dims.n_fe / 2, dims.n_pe / 2, dims.n_z / 2) } else { inner[rng.random_range(0..inner.len())] };
        let (bx, by, bz) = dims.coords(pick);
        let s2 = 2.0 * params.blob_sigma_vox * params.blob_sigma_vox;
        for i in 0..dims.len() {
            let (x, y, z) = dims.coords(i);
            let r2 = (x as f64 - bx as f64).powi(2) + (y as f64 - by as f64).powi(2) + (z as f64 - bz as f64).powi(2);
            df.values[i] += params.blob_peak_hz * (-r2 / s2).exp();
        }
        blob_center = Some([bx, by, bz]);
    }

    let phi0 = match params.preset {
        PhantomPreset::Uniform => RealMap::zeros(dims, Unit::Radians),
        PhantomPreset::Ellipsoids => {
            let mut c = random_coefs(&mut rng);
            // first-order phase only
            c[4..].iter_mut().for_each(|v| *v = 0.0);
            poly_map(dims, &c, params.phase_amplitude_rad, Unit::Radians)
        }
    };

    Ok(Phantom { dims, pd, t2star_ms: t2, df_hz: df, phi0, support, compartments, blob_center })
}

impl Phantom {
    pub fn support_map(&self) -> RealMap {
        RealMap {
            dims: self.dims,
            unit: Unit::Arbitrary,
            values: self.support.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Per-echo complex images `pd exp(-TE/T2*) exp(i(phi0 + 2 pi df TE))`, zero
/// outside the support.
pub fn echo_images(ph: &Phantom, te_ms: &[f64]) -> Result<VolumeSet> {
    if te_ms.is_empty() {
        return Err(Error::Config("echo_images needs at least one echo time".into()));
    }
    if te_ms.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::Config(format!("echo times must be >= 0: {te_ms:?}")));
    }
    let nv = ph.dims.len();
    let mut out = VolumeSet::zeros(ph.dims, 1, 1, te_ms.len(), Space::Image);
    for (n, &te) in te_ms.iter().enumerate() {
        let block = out.block_mut(0, 0, n);
        for i in 0..nv {
            if !ph.support[i] {
                continue;
            }
            let t2 = ph.t2star_ms.values[i];
            let mag = ph.pd.values[i] * (-te / t2).exp();
            let phase = ph.phi0.values[i] + 2.0 * PI * ph.df_hz.values[i] * te * 1e-3;
            block[i] = C64::from_polar(mag, phase);
        }
    }
    Ok(out)
}

/// Complex coil sensitivities, normalized to unit sum-of-squares at every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilSet {
    pub dims: GridDims,
    pub n_coils: usize,
    /// Coil-major blocks of `dims.len()` samples.
    pub maps: Vec<C64>,
}

impl CoilSet {
    pub fn coil(&self, c: usize) -> &[C64] {
        let nv = self.dims.len();
        &self.maps[c * nv..(c + 1) * nv]
    }

    pub fn to_volume(&self) -> VolumeSet {
        VolumeSet { dims: self.dims, n_coils: self.n_coils, n_shots: 1, n_echoes: 1, space: Space::Image, data: self.maps.clone() }
    }

    pub fn from_volume(v: &VolumeSet) -> Result<Self> {
        if v.n_shots != 1 || v.n_echoes != 1 {
            return Err(Error::DimensionMismatch(format!("coil volume must have 1 shot and 1 echo, got {}", v.shape_string())));
        }
        Ok(CoilSet { dims: v.dims, n_coils: v.n_coils, maps: v.data.clone() })
    }

    pub fn max_sos_error(&self) -> f64 {
        let nv = self.dims.len();
        (0..nv)
            .map(|i| {
                let s: f64 = (0..self.n_coils).map(|c| self.maps[c * nv + i].norm_sqr()).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Gaussian-weighted lobes on a ring around the z axis at alternating heights,
/// each with a smooth random linear phase. Maps are normalized to unit
/// root-sum-of-squares.
pub fn make_coils(dims: GridDims, n_coils: usize, seed: u64) -> Result<CoilSet> {
    dims.validate()?;
    if n_coils == 0 {
        return Err(Error::Config("n_coils must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC011_5E7);
    let radius = 0.8;
    let width = 0.5;
    let lift = 0.2;
    let twist = rng.random::<f64>() * 2.0 * PI;
    let coils: Vec<([f64; 3], [f64; 4])> = (0..n_coils)
        .map(|c| {
            // ring around z with alternating heights, seeded rotation
            let a = 2.0 * PI * c as f64 / n_coils as f64 + twist;
            let pos = [radius * a.cos(), radius * a.sin(), if c % 2 == 0 { lift } else { -lift }];
            let ph = [0, 1, 2, 3].map(|k| if k == 3 { 2.0 * PI * rng.random::<f64>() } else { 20.0 * (rng.random::<f64>() - 0.5) });
            (pos, ph)
        })
        .collect();
    let nv = dims.len();
    let mut maps = vec![ZERO; nv * n_coils];
    for i in 0..nv {
        let (x, y, z) = dims.coords(i);
        let p = [norm_coord(x, dims.n_fe), norm_coord(y, dims.n_pe), norm_coord(z, dims.n_z)];
        let mut sos = 0.0;
        for (c, (pos, ph)) in coils.iter().enumerate() {
            let d2: f64 = (0..3).map(|k| (p[k] - pos[k]).powi(2)).sum();
            let mag = (-d2 / (2.0 * width * width)).exp();
            let phase = ph[0] * p[0] + ph[1] * p[1] + ph[2] * p[2] + ph[3];
            let v = C64::from_polar(mag, phase);
            sos += v.norm_sqr();
            maps[c * nv + i] = v;
        }
        let s = 1.0 / sos.sqrt();
        for c in 0..n_coils {
            maps[c * nv + i] *= s;
        }
    }
    Ok(CoilSet { dims, n_coils, maps })
}

/// Per-shot smooth phase errors. Shot 0 is the reference and gets a zero map;
/// every other shot is a random second-order polynomial scaled so its peak
/// |phase| equals `amplitude_rad`.
pub fn shot_phase_errors(dims: GridDims, n_shots: usize, amplitude_rad: f64, seed: u64) -> Result<Vec<RealMap>> {
    dims.validate()?;
    if !(amplitude_rad >= 0.0) || !amplitude_rad.is_finite() {
        return Err(Error::Config(format!("shot phase amplitude must be >= 0, got {amplitude_rad}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5407_7A5E);
    Ok((0..n_shots)
        .map(|t| {
            let coef = random_coefs(&mut rng);
            if t == 0 {
                RealMap::zeros(dims, Unit::Radians)
            } else {
                poly_map(dims, &coef, amplitude_rad, Unit::Radians)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(a: usize, b: usize, c: usize) -> GridDims {
        GridDims::new(a, b, c).unwrap()
    }

    #[test]
    fn uniform_null_field() {
        let p = PhantomParams { preset: PhantomPreset::Uniform, ..Default::default() };
        let ph = make_phantom(d(16, 16, 8), 3, &p).unwrap();
        assert!(ph.df_hz.values.iter().all(|&v| v == 0.0));
        assert!(ph.phi0.values.iter().all(|&v| v == 0.0));
        assert!(ph.support.iter().any(|&s| s));
    }

    #[test]
    fn deterministic_in_seed() {
        let p = PhantomParams { poly_peak_hz: 20.0, blob_peak_hz: 30.0, ..Default::default() };
        let a = make_phantom(d(24, 24, 12), 42, &p).unwrap();
        let b = make_phantom(d(24, 24, 12), 42, &p).unwrap();
        assert_eq!(a, b);
        let c = make_phantom(d(24, 24, 12), 43, &p).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blob_peak_at_center() {
        let p = PhantomParams { blob_peak_hz: 50.0, ..Default::default() };
        let ph = make_phantom(d(32, 32, 16), 7, &p).unwrap();
        let [x, y, z] = ph.blob_center.unwrap();
        assert!((ph.df_hz.max_abs() - 50.0).abs() < 1e-12);
        assert!((ph.df_hz.at(x, y, z) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn compartments_and_ranges() {
        for seed in 0..10 {
            let ph = make_phantom(d(32, 32, 16), seed, &PhantomParams::default()).unwrap();
            assert!((3..=6).contains(&ph.compartments.len()));
            for (i, &s) in ph.support.iter().enumerate() {
                if s {
                    let t = ph.t2star_ms.values[i];
                    assert!(COMPARTMENT_T2STAR_MS.contains(&t));
                    assert!((1.0..=300.0).contains(&t));
                    assert!(ph.pd.values[i] > 0.0);
                } else {
                    assert_eq!(ph.pd.values[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn pe_margin_is_empty() {
        let dims = d(48, 48, 16);
        let ph = make_phantom(dims, 1, &PhantomParams::default()).unwrap();
        let m = support_margins(dims)[1] as usize;
        assert!(m >= 3);
        for i in 0..dims.len() {
            let (_, y, _) = dims.coords(i);
            if y < m || y >= dims.n_pe - m {
                assert!(!ph.support[i]);
            }
        }
    }

    #[test]
    fn background_field_laplacian_bounded() {
        let p = PhantomParams { poly_peak_hz: 200.0, blob_peak_hz: 40.0, blob_sigma_vox: 2.0, ..Default::default() };
        let ph = make_phantom(d(16, 16, 8), 5, &p).unwrap();
        let [bx, by, bz] = ph.blob_center.unwrap();
        let far = |x: usize, y: usize, z: usize| {
            let r2 = (x as f64 - bx as f64).powi(2) + (y as f64 - by as f64).powi(2) + (z as f64 - bz as f64).powi(2);
            r2.sqrt() < 5.0 * p.blob_sigma_vox
        };
        // tail of the blob beyond 5 sigma contributes < 1e-4 Hz
        assert!(max_laplacian(&ph.df_hz, far) <= p.max_field_laplacian_hz + 1e-3);
    }

    #[test]
    fn too_small_for_ellipsoids() {
        assert!(matches!(make_phantom(d(16, 7, 8), 0, &PhantomParams::default()), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn echo_magnitudes() {
        let p = PhantomParams { preset: PhantomPreset::Uniform, ..Default::default() };
        let mut ph = make_phantom(d(12, 12, 8), 0, &p).unwrap();
        ph.t2star_ms.values.iter_mut().for_each(|v| *v = 60.0);
        let i = ph.support.iter().position(|&s| s).unwrap();
        let v = echo_images(&ph, &[0.0, 60.0]).unwrap();
        assert_eq!(v.block(0, 0, 0)[i].norm(), ph.pd.values[i]);
        assert!((v.block(0, 0, 1)[i].norm() - (-1.0f64).exp()).abs() < 1e-15);
        assert!(((-1.0f64).exp() - 0.367879).abs() < 1e-6);

        let te = [18.0, 43.17, 68.34];
        let want = [0.7408182, 0.4869957, 0.3201390];
        let v = echo_images(&ph, &te).unwrap();
        for n in 0..3 {
            assert!((v.block(0, 0, n)[i].norm() - want[n]).abs() < 5e-7);
        }
        let outside = ph.support.iter().position(|&s| !s).unwrap();
        assert_eq!(v.block(0, 0, 0)[outside], ZERO);
        assert!(echo_images(&ph, &[]).is_err());
    }

    #[test]
    fn echo_magnitude_monotone_in_te() {
        let ph = make_phantom(d(16, 16, 8), 9, &PhantomParams { poly_peak_hz: 30.0, ..Default::default() }).unwrap();
        let v = echo_images(&ph, &[5.0, 10.0, 30.0, 80.0]).unwrap();
        for i in 0..ph.dims.len() {
            for n in 1..4 {
                assert!(v.block(0, 0, n)[i].norm() <= v.block(0, 0, n - 1)[i].norm());
            }
        }
    }

    #[test]
    fn coils_unit_sos() {
        let one = make_coils(d(8, 8, 4), 1, 0).unwrap();
        assert!(one.maps.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        let many = make_coils(d(16, 12, 8), 8, 3).unwrap();
        assert!(many.max_sos_error() < 1e-10);
        assert!(make_coils(d(4, 4, 4), 0, 0).is_err());
    }

    #[test]
    fn coils_smooth() {
        let dims = d(32, 32, 32);
        let coils = make_coils(dims, 8, 1).unwrap();
        let mut worst: f64 = 0.0;
        for c in 0..8 {
            let m = coils.coil(c);
            for i in 0..dims.len() {
                let (x, y, z) = dims.coords(i);
                for (dx, dy, dz) in [(1, 0, 0), (0, 1, 0), (0, 0, 1)] {
                    let (a, b, e) = (x + dx, y + dy, z + dz);
                    if a < 32 && b < 32 && e < 32 {
                        worst = worst.max((m[i].norm() - m[dims.index(a, b, e)].norm()).abs());
                    }
                }
            }
        }
        assert!(worst < 0.05, "max neighbor difference {worst}");
    }

    #[test]
    fn shot_phases() {
        let dims = d(12, 12, 6);
        let zero = shot_phase_errors(dims, 4, 0.0, 1).unwrap();
        assert!(zero.iter().all(|m| m.values.iter().all(|&v| v == 0.0)));
        for seed in 0..5 {
            let maps = shot_phase_errors(dims, 4, 0.5, seed).unwrap();
            assert!(maps[0].values.iter().all(|&v| v == 0.0));
            let peak = maps.iter().map(|m| m.max_abs()).fold(0.0, f64::max);
            assert!((peak - 0.5).abs() < 1e-12);
        }
        assert!(shot_phase_errors(dims, 2, -1.0, 0).is_err());
    }
}
