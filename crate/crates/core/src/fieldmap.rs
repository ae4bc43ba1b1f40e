//! Off-resonance estimation from a blip-up/down magnitude pair by a
//! regularized displacement fit along each phase-encode line.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::solve_spd;
use crate::volumes::{GridDims, RealMap, Unit};

/// Weight of the squared second difference of the displacement profile.
const CURVATURE_WEIGHT: f64 = 0.1;

/// Weight pulling the displacement toward zero where the images carry no signal.
const RIDGE_WEIGHT: f64 = 1e-4;

/// Coarse-to-fine PE blur widths in voxels.
const BLUR_LEVELS: [f64; 3] = [2.0, 1.0, 0.0];

const LM_ITERATIONS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSearch {
    pub search_max_vox: f64,
    pub step_vox: f64,
    pub smoothing_sigma_vox: f64,
}

impl Default for FieldSearch {
    fn default() -> Self {
        FieldSearch { search_max_vox: 8.0, step_vox: 0.25, smoothing_sigma_vox: 2.0 }
    }
}

impl FieldSearch {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_vox > 0.0) || !(self.search_max_vox >= self.step_vox) {
            return Err(Error::Config(format!(
                "need search_max_vox >= step_vox > 0, got {} and {}",
                self.search_max_vox, self.step_vox
            )));
        }
        if !(self.smoothing_sigma_vox >= 0.0) {
            return Err(Error::Config(format!("smoothing_sigma_vox must be >= 0, got {}", self.smoothing_sigma_vox)));
        }
        Ok(())
    }

    /// Candidate displacements ordered by increasing magnitude, positive first on ties.
    fn candidates(&self) -> Vec<f64> {
        let k = (self.search_max_vox / self.step_vox + 1e-9).floor() as i64;
        let mut c = vec![0.0];
        for i in 1..=k {
            let d = i as f64 * self.step_vox;
            c.push(d);
            c.push(-d);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldEstimate {
    pub df_hz: RealMap,
    pub displacement_vox: RealMap,
    pub smoothing_sigma_vox: f64,
}

/// Estimates `df` such that the blip-up image is displaced by `+df / bw` and
/// the blip-down image by `-df / bw` voxels along PE.
///
/// Each PE line is fitted on its own. With `d` the displacement profile and
/// `d'` its derivative, the model asks `up(y + d) (1 + d') = down(y - d) (1 - d')`,
/// so the intensity pile-up and stretching of a non-uniform field are part of
/// the fit. The start is the best constant shift on the `step_vox` grid; a
/// Levenberg-Marquardt fit with a curvature penalty then refines the profile
/// on progressively less blurred lines, bounded by `search_max_vox`. The fit is
/// run both ways round and antisymmetrized, and the map is smoothed with a
/// Gaussian weighted by the mean magnitude.
pub fn estimate_field(up: &RealMap, down: &RealMap, bw_pe_hz_per_px: f64, search: &FieldSearch) -> Result<FieldEstimate> {
    search.validate()?;
    if up.dims != down.dims {
        return Err(Error::DimensionMismatch(format!("up {} vs down {}", up.dims, down.dims)));
    }
    if !(bw_pe_hz_per_px > 0.0) {
        return Err(Error::Config(format!("bw_pe_hz_per_px must be > 0, got {bw_pe_hz_per_px}")));
    }
    up.check_finite()?;
    down.check_finite()?;
    let dims = up.dims;
    let scale = up.max_abs().max(down.max_abs());
    let mut raw = RealMap::zeros(dims, Unit::Voxels);
    if scale > 0.0 {
        let forward = fit_lines(up, down, scale, search);
        let backward = fit_lines(down, up, scale, search);
        for (i, v) in raw.values.iter_mut().enumerate() {
            *v = 0.5 * (forward[i] - backward[i]);
        }
    }
    let weights: Vec<f64> = up.values.iter().zip(&down.values).map(|(a, b)| 0.5 * (a.abs() + b.abs())).collect();
    let displacement = if search.smoothing_sigma_vox > 0.0 {
        let mut s = weighted_gaussian_smooth(&raw, &weights, search.smoothing_sigma_vox);
        s.unit = Unit::Voxels;
        s
    } else {
        raw
    };
    Ok(FieldEstimate {
        df_hz: field_to_hz(&displacement, bw_pe_hz_per_px),
        displacement_vox: displacement,
        smoothing_sigma_vox: search.smoothing_sigma_vox,
    })
}

/// Fits every `(x, z)` line of `a` against `b`; volume-ordered displacements.
fn fit_lines(a: &RealMap, b: &RealMap, scale: f64, search: &FieldSearch) -> Vec<f64> {
    let dims = a.dims;
    let line = |m: &RealMap, x: usize, z: usize| -> Vec<f64> { (0..dims.n_pe).map(|y| m.at(x, y, z).abs() / scale).collect() };
    let lines = exec::map_range(dims.n_fe * dims.n_z, |col| {
        let (x, z) = (col % dims.n_fe, col / dims.n_fe);
        fit_line(&line(a, x, z), &line(b, x, z), search)
    });
    let mut out = vec![0.0; dims.len()];
    for (col, d) in lines.iter().enumerate() {
        let (x, z) = (col % dims.n_fe, col / dims.n_fe);
        for (y, v) in d.iter().enumerate() {
            out[dims.index(x, y, z)] = *v;
        }
    }
    out
}

/// Circular linear interpolation.
fn interp(v: &[f64], pos: f64) -> f64 {
    let n = v.len() as isize;
    let f = pos.floor();
    let t = pos - f;
    let i0 = (f as isize).rem_euclid(n) as usize;
    let a = v[i0];
    if t == 0.0 {
        return a;
    }
    a * (1.0 - t) + v[(i0 + 1) % v.len()] * t
}

fn slope(v: &[f64], pos: f64) -> f64 {
    interp(v, pos + 0.5) - interp(v, pos - 0.5)
}

fn blur_line(v: &[f64], sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let n = v.len() as isize;
    let total: f64 = k.iter().sum();
    (0..n)
        .map(|y| k.iter().enumerate().map(|(j, w)| w * v[(y + j as isize - r).rem_euclid(n) as usize]).sum::<f64>() / total)
        .collect()
}

fn fit_line(u: &[f64], w: &[f64], search: &FieldSearch) -> Vec<f64> {
    let n = u.len();
    if u.iter().chain(w).all(|v| *v == 0.0) {
        return vec![0.0; n];
    }
    let mut start = (f64::INFINITY, 0.0);
    for c in search.candidates() {
        let cost: f64 = (0..n).map(|y| (interp(u, y as f64 + c) - interp(w, y as f64 - c)).powi(2)).sum();
        if cost < start.0 {
            start = (cost, c);
        }
    }
    let mut d = vec![start.1; n];
    for sigma in BLUR_LEVELS {
        if sigma > 0.0 {
            refine(&blur_line(u, sigma), &blur_line(w, sigma), &mut d, search.search_max_vox);
        } else {
            refine(u, w, &mut d, search.search_max_vox);
        }
    }
    d
}

/// Residuals `up(y + d) (1 + d') - down(y - d) (1 - d')` with central `d'`.
fn residuals(u: &[f64], w: &[f64], d: &[f64]) -> Vec<f64> {
    let n = d.len();
    (0..n)
        .map(|y| {
            let g = 0.5 * (d[(y + 1) % n] - d[(y + n - 1) % n]);
            interp(u, y as f64 + d[y]) * (1.0 + g) - interp(w, y as f64 - d[y]) * (1.0 - g)
        })
        .collect()
}

fn curvature(d: &[f64]) -> Vec<f64> {
    let n = d.len();
    (0..n).map(|y| d[(y + n - 1) % n] - 2.0 * d[y] + d[(y + 1) % n]).collect()
}

fn energy(u: &[f64], w: &[f64], d: &[f64]) -> f64 {
    residuals(u, w, d).iter().map(|r| r * r).sum::<f64>()
        + CURVATURE_WEIGHT * curvature(d).iter().map(|c| c * c).sum::<f64>()
        + RIDGE_WEIGHT * d.iter().map(|v| v * v).sum::<f64>()
}

fn refine(u: &[f64], w: &[f64], d: &mut Vec<f64>, bound: f64) {
    let n = d.len();
    let mut e = energy(u, w, d);
    let mut damping = 1e-3;
    for _ in 0..LM_ITERATIONS {
        let r = residuals(u, w, d);
        let c = curvature(d);
        let mut h = vec![0.0; n * n];
        let mut grad: Vec<f64> = d.iter().map(|v| RIDGE_WEIGHT * v).collect();
        for y in 0..n {
            let (prev, next) = ((y + n - 1) % n, (y + 1) % n);
            let g = 0.5 * (d[next] - d[prev]);
            let (p, q) = (y as f64 + d[y], y as f64 - d[y]);
            let (uv, wv) = (interp(u, p), interp(w, q));
            let edge = 0.5 * (uv + wv);
            let row = [(y, slope(u, p) * (1.0 + g) + slope(w, q) * (1.0 - g)), (next, edge), (prev, -edge)];
            let curv = [(prev, 1.0), (y, -2.0), (next, 1.0)];
            for &(i, a) in &row {
                grad[i] += a * r[y];
                for &(j, b) in &row {
                    h[i * n + j] += a * b;
                }
            }
            for &(i, a) in &curv {
                grad[i] += CURVATURE_WEIGHT * a * c[y];
                for &(j, b) in &curv {
                    h[i * n + j] += CURVATURE_WEIGHT * a * b;
                }
            }
        }
        if grad.iter().all(|g| *g == 0.0) {
            return;
        }
        for i in 0..n {
            h[i * n + i] += RIDGE_WEIGHT;
        }
        let mut accepted = None;
        for _ in 0..12 {
            let mut a = h.clone();
            for i in 0..n {
                a[i * n + i] += damping * h[i * n + i];
            }
            let mut step: Vec<f64> = grad.iter().map(|g| -g).collect();
            if solve_spd(&mut a, &mut step, n).is_err() {
                damping *= 4.0;
                continue;
            }
            let trial: Vec<f64> = d.iter().zip(&step).map(|(v, s)| (v + s).clamp(-bound, bound)).collect();
            let et = energy(u, w, &trial);
            if et < e {
                accepted = Some((trial, et));
                damping = (damping / 3.0).max(1e-9);
                break;
            }
            damping *= 4.0;
        }
        let Some((trial, et)) = accepted else { return };
        let gain = e - et;
        *d = trial;
        e = et;
        if gain <= 1e-12 * e.max(1e-30) {
            return;
        }
    }
}

/// Displacement in voxels to off-resonance in Hz.
pub fn field_to_hz(displacement_vox: &RealMap, bw_pe_hz_per_px: f64) -> RealMap {
    RealMap {
        dims: displacement_vox.dims,
        unit: Unit::Hz,
        values: displacement_vox.values.iter().map(|d| d * bw_pe_hz_per_px).collect(),
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect()
}

fn convolve_axis(v: &[f64], dims: GridDims, axis: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let n = dims.as_array()[axis] as isize;
    let mut out = vec![0.0; v.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let (x, y, z) = dims.coords(i);
        let p = [x, y, z][axis] as isize;
        let mut acc = 0.0;
        for (j, w) in k.iter().enumerate() {
            let q = p + j as isize - r;
            if q < 0 || q >= n {
                continue;
            }
            let mut c = [x, y, z];
            c[axis] = q as usize;
            acc += w * v[dims.index(c[0], c[1], c[2])];
        }
        *o = acc;
    }
    out
}

fn blur(v: &[f64], dims: GridDims, k: &[f64]) -> Vec<f64> {
    let a = convolve_axis(v, dims, 0, k);
    let b = convolve_axis(&a, dims, 1, k);
    convolve_axis(&b, dims, 2, k)
}

/// Normalized convolution `G * (w m) / G * w`; zero where the weights vanish.
pub fn weighted_gaussian_smooth(map: &RealMap, weights: &[f64], sigma: f64) -> RealMap {
    let dims = map.dims;
    let k = gaussian_kernel(sigma);
    let wm: Vec<f64> = map.values.iter().zip(weights).map(|(m, w)| m * w).collect();
    let num = blur(&wm, dims, &k);
    let den = blur(weights, dims, &k);
    let scale = den.iter().cloned().fold(0.0, f64::max);
    let values = num
        .iter()
        .zip(&den)
        .map(|(n, d)| if *d > 1e-12 * scale && *d > 0.0 { n / d } else { 0.0 })
        .collect();
    RealMap { dims, unit: map.unit, values }
}
