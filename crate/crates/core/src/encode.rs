//! Field-informed multi-shot encoding `A_t = M_t F E_t C` and the linear
//! solvers built on it.
//!
//! Off-resonance phase accrues along the echo train, so it depends on the
//! acquisition time of the ky line only. For every (x, z) column the operator
//! therefore reduces to a dense `ky x y` matrix
//! `E[ky][y] = N^-1/2 exp(-2 pi i (ky - c)(y - c) / N) exp(-i s 2 pi df(x,y,z) tau(ky))`
//! followed by centered transforms along x and z. That hybrid evaluation is
//! exactly the per-line definition, just grouped by ky.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fft::{CenteredFft1, Direction};
use crate::phantom::{echo_images, CoilSet, Phantom};
use crate::protocol::{Polarity, ShotPlan};
use crate::volumes::{dot, norm_sqr, GridDims, RealMap, Space, VolumeSet, C64, ZERO};

/// Centered transforms over an (x, z) plane stored x fastest.
#[derive(Clone)]
struct PlaneFft {
    nx: usize,
    nz: usize,
    fx: CenteredFft1,
    fz: CenteredFft1,
}

impl PlaneFft {
    fn new(nx: usize, nz: usize) -> Self {
        PlaneFft { nx, nz, fx: CenteredFft1::new(nx), fz: CenteredFft1::new(nz) }
    }

    fn scratch(&self) -> Vec<C64> {
        vec![ZERO; self.fx.scratch_len().max(self.fz.scratch_len()) + self.nz]
    }

    fn process(&self, plane: &mut [C64], dir: Direction, scratch: &mut [C64]) {
        let (nx, nz) = (self.nx, self.nz);
        let (buf, s) = scratch.split_at_mut(nz);
        if nx > 1 {
            for row in plane.chunks_exact_mut(nx) {
                self.fx.process(row, dir, s);
            }
        }
        if nz > 1 {
            for x in 0..nx {
                for (z, b) in buf.iter_mut().enumerate() {
                    *b = plane[x + nx * z];
                }
                self.fz.process(buf, dir, s);
                for (z, b) in buf.iter().enumerate() {
                    plane[x + nx * z] = *b;
                }
            }
        }
    }
}

/// Everything the encoding operator needs: shot plan, coils and the field map
/// used for the off-resonance phase (ground truth in simulation, estimated in
/// reconstruction).
#[derive(Clone)]
pub struct EncodingContext {
    pub plan: ShotPlan,
    pub coils: CoilSet,
    pub field_hz: RealMap,
    dims: GridDims,
    /// Per polarity, per column `x + n_fe z`, the row-major `n_pe x n_pe` matrix.
    enc: [Vec<C64>; 2],
    /// Coils in column layout: `[coil][column][y]`.
    coil_cols: Vec<C64>,
    plane: PlaneFft,
}

impl EncodingContext {
    pub fn new(plan: &ShotPlan, coils: &CoilSet, field_hz: &RealMap) -> Result<Self> {
        Self::build(plan, coils, field_hz, None)
    }

    /// Context whose train also carries `exp(-tau / T2*)` decay. Used only to
    /// simulate model mismatch; `r2star` is in 1/s.
    pub fn with_readout_decay(plan: &ShotPlan, coils: &CoilSet, field_hz: &RealMap, r2star: &RealMap) -> Result<Self> {
        Self::build(plan, coils, field_hz, Some(r2star))
    }

    fn build(plan: &ShotPlan, coils: &CoilSet, field_hz: &RealMap, r2star: Option<&RealMap>) -> Result<Self> {
        let dims = plan.dims;
        if coils.dims != dims || field_hz.dims != dims {
            return Err(Error::DimensionMismatch(format!(
                "plan {dims}, coils {}, field {}",
                coils.dims, field_hz.dims
            )));
        }
        field_hz.check_finite()?;
        if let Some(r) = r2star {
            if r.dims != dims {
                return Err(Error::DimensionMismatch(format!("decay map {} vs plan {dims}", r.dims)));
            }
        }
        let GridDims { n_fe: nx, n_pe: ny, n_z: nz } = dims;
        let ncol = nx * nz;
        let c = (ny / 2) as f64;
        let scale = 1.0 / (ny as f64).sqrt();
        let taus: Vec<f64> = (0..ny).map(|ky| plan.line_time_unchecked(ky)).collect();
        let build_pol = |pol: Polarity| -> Vec<C64> {
            let s = pol.sign();
            let cols = exec::map_range(ncol, |col| {
                let (x, z) = (col % nx, col / nx);
                let mut m = vec![ZERO; ny * ny];
                for y in 0..ny {
                    let i = dims.index(x, y, z);
                    let w = 2.0 * PI * field_hz.values[i] * s;
                    let r2 = r2star.map_or(0.0, |r| r.values[i]);
                    for ky in 0..ny {
                        let k = ky as f64 - c;
                        let ph = -2.0 * PI * k * (y as f64 - c) / ny as f64 - w * taus[ky];
                        let amp = scale * (-r2 * taus[ky]).exp();
                        m[ky * ny + y] = C64::from_polar(amp, ph);
                    }
                }
                m
            });
            cols.concat()
        };
        let enc = [build_pol(Polarity::Up), build_pol(Polarity::Down)];
        let mut coil_cols = Vec::with_capacity(coils.maps.len());
        for ci in 0..coils.n_coils {
            coil_cols.extend(to_columns(dims, coils.coil(ci)));
        }
        Ok(EncodingContext {
            plan: plan.clone(),
            coils: coils.clone(),
            field_hz: field_hz.clone(),
            dims,
            enc,
            coil_cols,
            plane: PlaneFft::new(nx, nz),
        })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn n_shots(&self) -> usize {
        self.plan.n_shots()
    }

    pub fn n_coils(&self) -> usize {
        self.coils.n_coils
    }

    /// Same plan and coils, different field.
    pub fn with_field(&self, field_hz: &RealMap) -> Result<Self> {
        Self::new(&self.plan, &self.coils, field_hz)
    }

    fn coil_col(&self, c: usize) -> &[C64] {
        let nv = self.dims.len();
        &self.coil_cols[c * nv..(c + 1) * nv]
    }

    /// k-space of one shot for one image: `n_coils` blocks, zero where unsampled.
    pub fn forward_shot(&self, shot: usize, image: &[C64]) -> Vec<C64> {
        let dims = self.dims;
        let GridDims { n_fe: nx, n_pe: ny, n_z: nz } = dims;
        let ncol = nx * nz;
        let pattern = &self.plan.shots[shot];
        let enc = &self.enc[pattern.polarity.index()];
        let lines = &pattern.lines;
        let img = to_columns(dims, image);
        let per_coil = exec::map_range(self.n_coils(), |ci| {
            let coil = self.coil_col(ci);
            let mut planes = vec![ZERO; lines.len() * ncol];
            let mut g = vec![ZERO; ny];
            for col in 0..ncol {
                let base = col * ny;
                for y in 0..ny {
                    g[y] = coil[base + y] * img[base + y];
                }
                let m = &enc[col * ny * ny..(col + 1) * ny * ny];
                for (li, &ky) in lines.iter().enumerate() {
                    let row = &m[ky * ny..(ky + 1) * ny];
                    planes[li * ncol + col] = row.iter().zip(&g).map(|(a, b)| a * b).sum();
                }
            }
            let mut out = vec![ZERO; dims.len()];
            let mut scratch = self.plane.scratch();
            for (li, &ky) in lines.iter().enumerate() {
                let plane = &mut planes[li * ncol..(li + 1) * ncol];
                self.plane.process(plane, Direction::Forward, &mut scratch);
                for kz in 0..nz {
                    if pattern.mask[ky + ny * kz] {
                        let dst = dims.index(0, ky, kz);
                        out[dst..dst + nx].copy_from_slice(&plane[nx * kz..nx * (kz + 1)]);
                    }
                }
            }
            out
        });
        per_coil.concat()
    }

    /// Exact adjoint of [`forward_shot`](Self::forward_shot).
    pub fn adjoint_shot(&self, shot: usize, kspace: &[C64]) -> Vec<C64> {
        let dims = self.dims;
        let nv = dims.len();
        let GridDims { n_fe: nx, n_pe: ny, n_z: nz } = dims;
        let ncol = nx * nz;
        let pattern = &self.plan.shots[shot];
        let enc = &self.enc[pattern.polarity.index()];
        let lines = &pattern.lines;
        let per_coil = exec::map_range(self.n_coils(), |ci| {
            let ksp = &kspace[ci * nv..(ci + 1) * nv];
            let mut planes = vec![ZERO; lines.len() * ncol];
            let mut scratch = self.plane.scratch();
            for (li, &ky) in lines.iter().enumerate() {
                let plane = &mut planes[li * ncol..(li + 1) * ncol];
                for kz in 0..nz {
                    if pattern.mask[ky + ny * kz] {
                        let src = dims.index(0, ky, kz);
                        plane[nx * kz..nx * (kz + 1)].copy_from_slice(&ksp[src..src + nx]);
                    }
                }
                self.plane.process(plane, Direction::Inverse, &mut scratch);
            }
            let coil = self.coil_col(ci);
            let mut cols = vec![ZERO; nv];
            let mut acc = vec![ZERO; ny];
            for col in 0..ncol {
                acc.iter_mut().for_each(|a| *a = ZERO);
                let m = &enc[col * ny * ny..(col + 1) * ny * ny];
                for (li, &ky) in lines.iter().enumerate() {
                    let h = planes[li * ncol + col];
                    if h == ZERO {
                        continue;
                    }
                    let row = &m[ky * ny..(ky + 1) * ny];
                    for (a, e) in acc.iter_mut().zip(row) {
                        *a += e.conj() * h;
                    }
                }
                let base = col * ny;
                for y in 0..ny {
                    cols[base + y] = coil[base + y].conj() * acc[y];
                }
            }
            cols
        });
        let mut sum = vec![ZERO; nv];
        for part in &per_coil {
            for (s, v) in sum.iter_mut().zip(part) {
                *s += v;
            }
        }
        from_columns(dims, &sum)
    }

    /// `A_t^H A_t x`.
    pub fn normal_shot(&self, shot: usize, image: &[C64]) -> Vec<C64> {
        self.adjoint_shot(shot, &self.forward_shot(shot, image))
    }

    fn check_images(&self, images: &VolumeSet) -> Result<()> {
        if images.space != Space::Image {
            return Err(Error::SpaceMismatch { expected: "image", found: images.space.name() });
        }
        if images.dims != self.dims || images.n_coils != 1 || images.n_shots != self.n_shots() {
            return Err(Error::DimensionMismatch(format!(
                "expected images {} x 1 coil x {} shots, got {}",
                self.dims,
                self.n_shots(),
                images.shape_string()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_kspace(&self, kspace: &VolumeSet) -> Result<()> {
        if kspace.space != Space::Kspace {
            return Err(Error::SpaceMismatch { expected: "kspace", found: kspace.space.name() });
        }
        if kspace.dims != self.dims || kspace.n_coils != self.n_coils() || kspace.n_shots != self.n_shots() {
            return Err(Error::DimensionMismatch(format!(
                "expected k-space {} x {} coils x {} shots, got {}",
                self.dims,
                self.n_coils(),
                self.n_shots(),
                kspace.shape_string()
            )));
        }
        Ok(())
    }

    /// Encodes one image per (shot, echo) into multi-coil k-space.
    pub fn forward(&self, images: &VolumeSet) -> Result<VolumeSet> {
        self.check_images(images)?;
        let (ns, ne) = (images.n_shots, images.n_echoes);
        let blocks = exec::map_range(ns * ne, |b| {
            let (t, n) = (b % ns, b / ns);
            self.forward_shot(t, images.block(0, t, n))
        });
        VolumeSet::from_vec(self.dims, self.n_coils(), ns, ne, Space::Kspace, interleave_coils(self.dims, self.n_coils(), ns, ne, blocks))
    }

    /// Adjoint of [`forward`](Self::forward): one image per (shot, echo).
    pub fn adjoint(&self, kspace: &VolumeSet) -> Result<VolumeSet> {
        self.check_kspace(kspace)?;
        let (ns, ne) = (kspace.n_shots, kspace.n_echoes);
        let blocks = exec::map_range(ns * ne, |b| {
            let (t, n) = (b % ns, b / ns);
            self.adjoint_shot(t, &shot_coils(kspace, t, n))
        });
        VolumeSet::from_vec(self.dims, 1, ns, ne, Space::Image, blocks.concat())
    }

    /// Largest eigenvalue of `A^H A` over all shots, by power iteration.
    pub fn lipschitz(&self, iterations: usize, seed: u64) -> f64 {
        let nv = self.dims.len();
        let ns = self.n_shots();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<C64> = (0..nv * ns)
            .map(|_| C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
            .collect();
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            let n = norm_sqr(&x).sqrt();
            if n == 0.0 {
                return 0.0;
            }
            x.iter_mut().for_each(|v| *v /= n);
            let y = exec::map_range(ns, |t| self.normal_shot(t, &x[t * nv..(t + 1) * nv])).concat();
            lambda = dot(&x, &y).re;
            x = y;
        }
        lambda
    }
}

/// Concatenated coil blocks of shot `t`, echo `n`.
pub(crate) fn shot_coils(v: &VolumeSet, t: usize, n: usize) -> Vec<C64> {
    (0..v.n_coils).flat_map(|c| v.block(c, t, n).iter().copied()).collect()
}

/// Reorders per-(shot, echo) coil stacks into canonical (coil, shot, echo) order.
pub(crate) fn interleave_coils(dims: GridDims, nc: usize, ns: usize, ne: usize, blocks: Vec<Vec<C64>>) -> Vec<C64> {
    let nv = dims.len();
    let mut data = vec![ZERO; nv * nc * ns * ne];
    for (b, stack) in blocks.iter().enumerate() {
        let (t, n) = (b % ns, b / ns);
        for c in 0..nc {
            let dst = (c + nc * (t + ns * n)) * nv;
            data[dst..dst + nv].copy_from_slice(&stack[c * nv..(c + 1) * nv]);
        }
    }
    data
}

fn to_columns(dims: GridDims, v: &[C64]) -> Vec<C64> {
    let GridDims { n_fe: nx, n_pe: ny, n_z: nz } = dims;
    let mut out = vec![ZERO; v.len()];
    for z in 0..nz {
        for y in 0..ny {
            let src = dims.index(0, y, z);
            for x in 0..nx {
                out[(x + nx * z) * ny + y] = v[src + x];
            }
        }
    }
    out
}

fn from_columns(dims: GridDims, cols: &[C64]) -> Vec<C64> {
    let GridDims { n_fe: nx, n_pe: ny, n_z: nz } = dims;
    let mut out = vec![ZERO; cols.len()];
    for z in 0..nz {
        for y in 0..ny {
            let dst = dims.index(0, y, z);
            for x in 0..nx {
                out[dst + x] = cols[(x + nx * z) * ny + y];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    /// Standard deviation per real channel of the complex Gaussian noise.
    pub noise_sigma: f64,
    /// Adds `exp(-tau / T2*)` decay along the train (model mismatch study).
    pub readout_decay: bool,
    pub seed: u64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions { noise_sigma: 0.0, readout_decay: false, seed: 0 }
    }
}

/// Per-shot ground-truth images `echo_images * exp(i phase_t)`.
pub fn shot_images(ph: &Phantom, te_ms: &[f64], n_shots: usize, shot_phases: &[RealMap]) -> Result<VolumeSet> {
    if !shot_phases.is_empty() && shot_phases.len() != n_shots {
        return Err(Error::DimensionMismatch(format!("{} shot phase maps for {n_shots} shots", shot_phases.len())));
    }
    let echoes = echo_images(ph, te_ms)?;
    let mut out = VolumeSet::zeros(ph.dims, 1, n_shots, te_ms.len(), Space::Image);
    for n in 0..te_ms.len() {
        for t in 0..n_shots {
            let src = echoes.block(0, 0, n);
            let dst = out.block_mut(0, t, n);
            match shot_phases.get(t) {
                Some(p) => {
                    for ((d, s), &phi) in dst.iter_mut().zip(src).zip(&p.values) {
                        *d = s * C64::from_polar(1.0, phi);
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    Ok(out)
}

/// Synthesizes acquired multi-coil k-space `d_{t,n}` with the phantom's true
/// field, optional shot phase errors and noise on sampled locations only.
pub fn simulate_acquisition(
    ph: &Phantom,
    coils: &CoilSet,
    plan: &ShotPlan,
    te_ms: &[f64],
    shot_phases: &[RealMap],
    opts: &SimulationOptions,
) -> Result<VolumeSet> {
    if ph.dims != plan.dims {
        return Err(Error::DimensionMismatch(format!("phantom {} vs plan {}", ph.dims, plan.dims)));
    }
    if !(opts.noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", opts.noise_sigma)));
    }
    let ctx = if opts.readout_decay {
        let r2 = RealMap::from_fn(ph.dims, crate::volumes::Unit::Arbitrary, |x, y, z| {
            let t2 = ph.t2star_ms.at(x, y, z);
            if t2 > 0.0 {
                1e3 / t2
            } else {
                0.0
            }
        });
        EncodingContext::with_readout_decay(plan, coils, &ph.df_hz, &r2)?
    } else {
        EncodingContext::new(plan, coils, &ph.df_hz)?
    };
    let images = shot_images(ph, te_ms, plan.n_shots(), shot_phases)?;
    let mut d = ctx.forward(&images)?;
    if opts.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0000_A015_E000);
        let n_pe = plan.dims.n_pe;
        let nv = plan.dims.len();
        let nx = plan.dims.n_fe;
        for (i, s) in d.data.iter_mut().enumerate() {
            let b = i / nv;
            let t = (b / d.n_coils) % d.n_shots;
            let r = i % nv;
            let (ky, kz) = ((r / nx) % n_pe, r / (nx * n_pe));
            if plan.sampled(t, ky, kz) {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *s += C64::new(re, im) * opts.noise_sigma;
            }
        }
    }
    Ok(d)
}

/// Noise level giving the requested image SNR relative to the mean magnitude
/// of `reference` over `support`.
pub fn noise_sigma_for_snr(reference: &[C64], support: &[bool], snr: f64) -> f64 {
    let (sum, count) = reference
        .iter()
        .zip(support)
        .filter(|(_, &s)| s)
        .fold((0.0, 0usize), |(a, n), (v, _)| (a + v.norm(), n + 1));
    if count == 0 || snr <= 0.0 {
        return 0.0;
    }
    sum / count as f64 / snr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    pub max_iter: usize,
    /// Relative residual `||A^H d - A^H A x|| / ||A^H d||`.
    pub tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { max_iter: 50, tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct CgOutput {
    /// One image per echo (`n_shots = 1`).
    pub image: VolumeSet,
    pub iterations: Vec<usize>,
    /// Relative normal-equation residual history per echo.
    pub residuals: Vec<Vec<f64>>,
    pub converged: bool,
    /// Residual grew for 5 consecutive iterations in some echo.
    pub diverged: bool,
}

/// Least-squares image shared by `shots`, one per echo, from the normal
/// equations `sum_t A_t^H A_t x = sum_t A_t^H d_t`.
///
/// Uses the conjugate-residual variant of CG so the normal-equation residual
/// is non-increasing.
pub fn cg_sense(ctx: &EncodingContext, d: &VolumeSet, shots: &[usize], cfg: &CgConfig) -> Result<CgOutput> {
    ctx.check_kspace(d)?;
    if shots.is_empty() || shots.iter().any(|&t| t >= ctx.n_shots()) {
        return Err(Error::Config(format!("invalid shot selection {shots:?}")));
    }
    let dims = ctx.dims();
    let nv = dims.len();
    let normal = |x: &[C64]| -> Vec<C64> {
        let parts = exec::map_range(shots.len(), |i| ctx.normal_shot(shots[i], x));
        let mut acc = vec![ZERO; nv];
        for p in &parts {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
        acc
    };
    let mut image = VolumeSet::zeros(dims, 1, 1, d.n_echoes, Space::Image);
    let mut iterations = Vec::new();
    let mut residuals = Vec::new();
    let mut converged = true;
    let mut diverged = false;
    for n in 0..d.n_echoes {
        let parts = exec::map_range(shots.len(), |i| ctx.adjoint_shot(shots[i], &shot_coils(d, shots[i], n)));
        let mut b = vec![ZERO; nv];
        for p in &parts {
            for (a, v) in b.iter_mut().zip(p) {
                *a += v;
            }
        }
        let bnorm = norm_sqr(&b).sqrt();
        let mut hist = vec![if bnorm == 0.0 { 0.0 } else { 1.0 }];
        let mut x = vec![ZERO; nv];
        let mut it = 0;
        if bnorm > 0.0 {
            let mut r = b.clone();
            let mut p = r.clone();
            let mut ar = normal(&r);
            let mut ap = ar.clone();
            let mut rar = dot(&r, &ar).re;
            let mut growth = 0;
            let mut ok = false;
            while it < cfg.max_iter {
                let denom = norm_sqr(&ap);
                if denom == 0.0 || rar == 0.0 {
                    ok = true;
                    break;
                }
                let alpha = rar / denom;
                for i in 0..nv {
                    x[i] += p[i] * alpha;
                    r[i] -= ap[i] * alpha;
                }
                it += 1;
                let rel = norm_sqr(&r).sqrt() / bnorm;
                if rel > *hist.last().unwrap() {
                    growth += 1;
                    if growth >= 5 {
                        diverged = true;
                        log::warn!("cg_sense: residual grew for 5 consecutive iterations at echo {n}");
                    }
                } else {
                    growth = 0;
                }
                hist.push(rel);
                if !rel.is_finite() {
                    return Err(Error::NonFinite { iteration: it, detail: "cg_sense residual".into() });
                }
                if rel < cfg.tol {
                    ok = true;
                    break;
                }
                ar = normal(&r);
                let rar_new = dot(&r, &ar).re;
                let beta = rar_new / rar;
                rar = rar_new;
                for i in 0..nv {
                    p[i] = r[i] + p[i] * beta;
                    ap[i] = ar[i] + ap[i] * beta;
                }
            }
            converged &= ok;
        }
        image.block_mut(0, 0, n).copy_from_slice(&x);
        iterations.push(it);
        residuals.push(hist);
    }
    Ok(CgOutput { image, iterations, residuals, converged, diverged })
}

/// Joint least squares over all shots with one shared image per echo.
pub fn hybrid_space_sense(ctx: &EncodingContext, d: &VolumeSet, cfg: &CgConfig) -> Result<CgOutput> {
    let all: Vec<usize> = (0..ctx.n_shots()).collect();
    cg_sense(ctx, d, &all, cfg)
}

/// Circular linear interpolation of a PE column at fractional position `pos`.
pub(crate) fn sample_pe(map: &[f64], dims: GridDims, x: usize, z: usize, pos: f64) -> f64 {
    let ny = dims.n_pe as isize;
    let f = pos.floor();
    let w = pos - f;
    let y0 = (f as isize).rem_euclid(ny) as usize;
    let y1 = (y0 + 1) % dims.n_pe;
    let a = map[dims.index(x, y0, z)];
    if w == 0.0 {
        return a;
    }
    a * (1.0 - w) + map[dims.index(x, y1, z)] * w
}

/// Undoes opposite-polarity PE displacement `df / bw` in each magnitude image
/// by linear interpolation and averages the two.
pub fn unwarp_and_average(up: &RealMap, down: &RealMap, field_hz: &RealMap, bw_pe_hz_per_px: f64) -> Result<RealMap> {
    if up.dims != down.dims || up.dims != field_hz.dims {
        return Err(Error::DimensionMismatch(format!("up {}, down {}, field {}", up.dims, down.dims, field_hz.dims)));
    }
    let dims = up.dims;
    let values = (0..dims.len())
        .map(|i| {
            let (x, y, z) = dims.coords(i);
            let shift = field_hz.values[i] / bw_pe_hz_per_px;
            let u = sample_pe(&up.values, dims, x, z, y as f64 + shift).abs();
            let d = sample_pe(&down.values, dims, x, z, y as f64 - shift).abs();
            0.5 * (u + d)
        })
        .collect();
    Ok(RealMap { dims, unit: up.unit, values })
}
