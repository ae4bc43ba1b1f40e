//! Block-Hankel structured low-rank reconstruction.
//!
//! Each shot (and, jointly, each echo) contributes an `m^3` sliding-window
//! block of its k-space; the blocks are concatenated column-wise. Smooth phase
//! differences between shots and smooth decay between echoes make the stacked
//! matrix low rank, which the iterative hard-thresholding solver enforces.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encode::{shot_coils, EncodingContext};
use crate::error::{Error, Result};
use crate::exec;
use crate::fft::{CenteredFft3, Direction};
use crate::linalg::{gram, hermitian_eigen, matmul, CMatrix};
use crate::volumes::{norm_sqr, GridDims, Space, VolumeSet, C64, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackMode {
    /// Blocks from every shot of one echo.
    Shots,
    /// Blocks from every shot of every echo.
    ShotsAndEchoes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HankelSpec {
    pub kernel: usize,
    pub mode: StackMode,
    pub dims: GridDims,
    pub n_shots: usize,
    pub n_echoes: usize,
}

impl HankelSpec {
    pub const DEFAULT_KERNEL: usize = 3;

    pub fn new(dims: GridDims, kernel: usize, mode: StackMode, n_shots: usize, n_echoes: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be an odd positive integer, got {kernel}")));
        }
        dims.check_kernel(kernel)?;
        if n_shots == 0 || n_echoes == 0 {
            return Err(Error::Config("Hankel stack needs at least one shot and one echo".into()));
        }
        if mode == StackMode::Shots && n_echoes != 1 {
            return Err(Error::Config(format!("mode shots stacks a single echo, got {n_echoes}")));
        }
        Ok(HankelSpec { kernel, mode, dims, n_shots, n_echoes })
    }

    pub fn channels(&self) -> usize {
        self.n_shots * self.n_echoes
    }

    pub fn window_len(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn origins(&self) -> [usize; 3] {
        let m = self.kernel;
        [self.dims.n_fe - m + 1, self.dims.n_pe - m + 1, self.dims.n_z - m + 1]
    }

    pub fn rows(&self) -> usize {
        self.origins().iter().product()
    }

    pub fn cols(&self) -> usize {
        self.window_len() * self.channels()
    }

    /// Number of windows that reference grid point `(x, y, z)`.
    pub fn multiplicity(&self, x: usize, y: usize, z: usize) -> usize {
        let m = self.kernel;
        let count = |p: usize, n: usize| p.min(n - m) + 1 - (p + 1).saturating_sub(m);
        count(x, self.dims.n_fe) * count(y, self.dims.n_pe) * count(z, self.dims.n_z)
    }

    fn check_volume(&self, v: &VolumeSet) -> Result<()> {
        if v.space != Space::Kspace {
            return Err(Error::SpaceMismatch { expected: "kspace", found: v.space.name() });
        }
        if v.dims != self.dims || v.n_coils != 1 || v.n_shots != self.n_shots || v.n_echoes != self.n_echoes {
            return Err(Error::DimensionMismatch(format!(
                "Hankel spec expects {} x 1 coil x {} shots x {} echoes, got {}",
                self.dims,
                self.n_shots,
                self.n_echoes,
                v.shape_string()
            )));
        }
        Ok(())
    }

    /// Flat offsets of the window samples relative to the origin.
    fn window_offsets(&self) -> Vec<usize> {
        let m = self.kernel;
        let (nx, ny) = (self.dims.n_fe, self.dims.n_pe);
        let mut off = Vec::with_capacity(m * m * m);
        for dz in 0..m {
            for dy in 0..m {
                for dx in 0..m {
                    off.push(dx + nx * (dy + ny * dz));
                }
            }
        }
        off
    }

    fn origin_index(&self, row: usize) -> usize {
        let [ox, oy, _] = self.origins();
        let (x, y, z) = (row % ox, (row / ox) % oy, row / (ox * oy));
        self.dims.index(x, y, z)
    }
}

/// Lifted matrix of channel-stacked k-space (channel = shot + n_shots * echo).
pub fn hankel_lift(v: &VolumeSet, spec: &HankelSpec) -> Result<CMatrix> {
    spec.check_volume(v)?;
    Ok(lift_raw(&v.data, spec))
}

fn lift_raw(data: &[C64], spec: &HankelSpec) -> CMatrix {
    let (rows, cols) = (spec.rows(), spec.cols());
    let nv = spec.dims.len();
    let offsets = spec.window_offsets();
    let w = offsets.len();
    let mut m = CMatrix::zeros(rows, cols);
    exec::for_each_chunk_mut(&mut m.data, cols, |row, out| {
        let base = spec.origin_index(row);
        for ch in 0..spec.channels() {
            let src = &data[ch * nv + base..];
            let dst = &mut out[ch * w..(ch + 1) * w];
            for (d, &o) in dst.iter_mut().zip(&offsets) {
                *d = src[o];
            }
        }
    });
    m
}

fn check_matrix(m: &CMatrix, spec: &HankelSpec) -> Result<()> {
    if m.rows != spec.rows() || m.cols != spec.cols() {
        return Err(Error::DimensionMismatch(format!(
            "matrix {}x{} does not match Hankel shape {}x{}",
            m.rows,
            m.cols,
            spec.rows(),
            spec.cols()
        )));
    }
    Ok(())
}

/// Adjoint of the lift: every sample receives the sum of the entries that reference it.
pub fn hankel_unlift_sum(m: &CMatrix, spec: &HankelSpec) -> Result<VolumeSet> {
    check_matrix(m, spec)?;
    let data = unlift_raw(m, spec, false);
    VolumeSet::from_vec(spec.dims, 1, spec.n_shots, spec.n_echoes, Space::Kspace, data)
}

/// Multiplicity-averaged adjoint, so that `unlift(lift(x)) = x`.
pub fn hankel_unlift(m: &CMatrix, spec: &HankelSpec) -> Result<VolumeSet> {
    check_matrix(m, spec)?;
    let data = unlift_raw(m, spec, true);
    VolumeSet::from_vec(spec.dims, 1, spec.n_shots, spec.n_echoes, Space::Kspace, data)
}

fn unlift_raw(m: &CMatrix, spec: &HankelSpec, average: bool) -> Vec<C64> {
    let nv = spec.dims.len();
    let offsets = spec.window_offsets();
    let w = offsets.len();
    let cols = m.cols;
    let mut out = vec![ZERO; nv * spec.channels()];
    exec::for_each_chunk_mut(&mut out, nv, |ch, acc| {
        for row in 0..m.rows {
            let base = spec.origin_index(row);
            let src = &m.data[row * cols + ch * w..row * cols + (ch + 1) * w];
            for (&o, v) in offsets.iter().zip(src) {
                acc[base + o] += v;
            }
        }
        if average {
            for (i, a) in acc.iter_mut().enumerate() {
                let (x, y, z) = spec.dims.coords(i);
                *a /= spec.multiplicity(x, y, z) as f64;
            }
        }
    });
    out
}

/// How many singular values survive a projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum RankPolicy {
    /// Keep the top `k`.
    FixedRank(usize),
    /// Keep the shortest prefix holding at least this fraction of `sum sigma^2`.
    EnergyFraction(f64),
    /// Keep every `sigma_i >= tau * sigma_1`.
    RelativeSigma(f64),
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankPolicy::FixedRank(0) => Err(Error::Config("fixed_rank must be >= 1".into())),
            RankPolicy::EnergyFraction(e) if !(e > 0.0 && e < 1.0) => {
                Err(Error::Config(format!("energy_fraction must lie in (0, 1), got {e}")))
            }
            RankPolicy::RelativeSigma(t) if !(t > 0.0 && t < 1.0) => {
                Err(Error::Config(format!("relative_sigma must lie in (0, 1), got {t}")))
            }
            _ => Ok(()),
        }
    }

    /// Retained count for descending singular values.
    pub fn select(&self, sigma: &[f64]) -> usize {
        match *self {
            RankPolicy::FixedRank(k) => k.min(sigma.len()),
            RankPolicy::EnergyFraction(eta) => {
                let total: f64 = sigma.iter().map(|s| s * s).sum();
                if total == 0.0 {
                    return 0;
                }
                let mut acc = 0.0;
                for (i, s) in sigma.iter().enumerate() {
                    acc += s * s;
                    if acc >= eta * total {
                        return i + 1;
                    }
                }
                sigma.len()
            }
            RankPolicy::RelativeSigma(tau) => match sigma.first() {
                Some(&s1) if s1 > 0.0 => sigma.iter().take_while(|&&s| s >= tau * s1).count(),
                _ => 0,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub matrix: CMatrix,
    pub rank: usize,
    /// All singular values of the input, descending.
    pub singular_values: Vec<f64>,
}

/// Truncated-SVD projection `H V_k V_k^H`, with `V_k` the leading right
/// singular vectors obtained from the eigen-decomposition of `H^H H`.
pub fn rank_project(m: &CMatrix, policy: &RankPolicy) -> Result<Projection> {
    policy.validate()?;
    let full = m.rows.min(m.cols);
    if let RankPolicy::FixedRank(k) = *policy {
        if k > full {
            return Err(Error::OutOfRange(format!("fixed_rank {k} exceeds min({}, {})", m.rows, m.cols)));
        }
    }
    if m.data.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::Decomposition { reason: "non-finite entries".into(), stats: m.stats() });
    }
    let g = gram(m);
    let (lambda, _) = hermitian_eigen(&g, m.cols, 0).map_err(|e| with_stats(e, m))?;
    let sigma: Vec<f64> = lambda.iter().take(full).map(|l| l.max(0.0).sqrt()).collect();
    let k = policy.select(&sigma);
    let matrix = if k == 0 {
        CMatrix::zeros(m.rows, m.cols)
    } else if k == m.cols {
        m.clone()
    } else {
        let (_, v) = hermitian_eigen(&g, m.cols, k).map_err(|e| with_stats(e, m))?;
        let t = matmul(&m.data, &v, m.rows, m.cols, k, false);
        CMatrix { rows: m.rows, cols: m.cols, data: matmul(&t, &v, m.rows, k, m.cols, true) }
    };
    Ok(Projection { matrix, rank: k, singular_values: sigma })
}

fn with_stats(e: Error, m: &CMatrix) -> Error {
    match e {
        Error::Decomposition { reason, .. } => Error::Decomposition { reason, stats: m.stats() },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum StepSize {
    /// `0.99 / L` with `L` from 20 power iterations on `A^H A`.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IhtConfig {
    pub max_iter: usize,
    pub rel_change_tol: f64,
    pub step: StepSize,
}

impl Default for IhtConfig {
    fn default() -> Self {
        IhtConfig { max_iter: 100, rel_change_tol: 1e-3, step: StepSize::Auto }
    }
}

impl IhtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_change_tol > 0.0) {
            return Err(Error::Config(format!("rel_change_tol must be > 0, got {}", self.rel_change_tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if let StepSize::Fixed(mu) = self.step {
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::Config(format!("step must be a positive finite number, got {mu}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `||A y - d||_2` at the new iterate.
    pub data_residual: f64,
    pub rel_change: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct SolverRun {
    /// Echo indices this run solved jointly.
    pub echoes: Vec<usize>,
    pub log: Vec<IterationRecord>,
    pub stop: StopReason,
    pub initial_residual: f64,
    pub step: f64,
}

impl SolverRun {
    pub fn final_residual(&self) -> f64 {
        self.log.last().map_or(self.initial_residual, |r| r.data_residual)
    }
}

#[derive(Debug, Clone)]
pub struct BudaOutput {
    /// Complex image per (shot, echo).
    pub shot_images: VolumeSet,
    /// Voxelwise mean of `|I_t|` per echo (`n_shots = 1`, imaginary part 0).
    pub combined: VolumeSet,
    pub runs: Vec<SolverRun>,
}

impl BudaOutput {
    pub fn converged(&self) -> bool {
        self.runs.iter().all(|r| r.stop == StopReason::Converged)
    }
}

/// Echo-by-echo reconstruction, stacking shots only.
pub fn buda_reconstruct(ctx: &EncodingContext, d: &VolumeSet, kernel: usize, policy: &RankPolicy, cfg: &IhtConfig) -> Result<BudaOutput> {
    let groups: Vec<Vec<usize>> = (0..d.n_echoes).map(|n| vec![n]).collect();
    reconstruct_groups(ctx, d, kernel, policy, cfg, &groups)
}

/// All echoes at once, stacking shots and echoes in one Hankel matrix.
pub fn buda_joint_reconstruct(ctx: &EncodingContext, d: &VolumeSet, kernel: usize, policy: &RankPolicy, cfg: &IhtConfig) -> Result<BudaOutput> {
    let groups = vec![(0..d.n_echoes).collect::<Vec<_>>()];
    reconstruct_groups(ctx, d, kernel, policy, cfg, &groups)
}

fn reconstruct_groups(
    ctx: &EncodingContext,
    d: &VolumeSet,
    kernel: usize,
    policy: &RankPolicy,
    cfg: &IhtConfig,
    groups: &[Vec<usize>],
) -> Result<BudaOutput> {
    ctx.check_kspace(d)?;
    policy.validate()?;
    cfg.validate()?;
    let dims = ctx.dims();
    let nv = dims.len();
    let ns = ctx.n_shots();
    let step = match cfg.step {
        StepSize::Fixed(mu) => mu,
        StepSize::Auto => {
            let l = ctx.lipschitz(20, 0);
            if !(l > 0.0) {
                return Err(Error::NonFinite { iteration: 0, detail: format!("Lipschitz estimate {l}") });
            }
            0.99 / l
        }
    };
    let fft = CenteredFft3::new(dims);
    let mut shot_images = VolumeSet::zeros(dims, 1, ns, d.n_echoes, Space::Image);
    let mut runs = Vec::new();
    for echoes in groups {
        let (y, run) = iht(ctx, d, echoes, kernel, policy, cfg, step, &fft)?;
        for (j, &n) in echoes.iter().enumerate() {
            for t in 0..ns {
                let b = t + ns * j;
                let mut img = y[b * nv..(b + 1) * nv].to_vec();
                fft.process(&mut img, Direction::Inverse);
                shot_images.block_mut(0, t, n).copy_from_slice(&img);
            }
        }
        runs.push(run);
    }
    let combined = combine_shots(&shot_images);
    Ok(BudaOutput { shot_images, combined, runs })
}

/// Voxelwise mean magnitude across shots, per echo.
pub fn combine_shots(v: &VolumeSet) -> VolumeSet {
    let nv = v.dims.len();
    let mut out = VolumeSet::zeros(v.dims, 1, 1, v.n_echoes, v.space);
    for n in 0..v.n_echoes {
        let dst = out.block_mut(0, 0, n);
        for t in 0..v.n_shots {
            for (o, s) in dst.iter_mut().zip(v.block(0, t, n)) {
                o.re += s.norm();
            }
        }
        dst.iter_mut().take(nv).for_each(|o| o.re /= v.n_shots as f64);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn iht(
    ctx: &EncodingContext,
    d: &VolumeSet,
    echoes: &[usize],
    kernel: usize,
    policy: &RankPolicy,
    cfg: &IhtConfig,
    step: f64,
    fft: &CenteredFft3,
) -> Result<(Vec<C64>, SolverRun)> {
    let dims = ctx.dims();
    let nv = dims.len();
    let ns = ctx.n_shots();
    let ne = echoes.len();
    let mode = if ne == 1 { StackMode::Shots } else { StackMode::ShotsAndEchoes };
    let spec = HankelSpec::new(dims, kernel, mode, ns, ne)?;
    if let RankPolicy::FixedRank(k) = *policy {
        if k > spec.rows().min(spec.cols()) {
            return Err(Error::OutOfRange(format!("fixed_rank {k} exceeds lifted matrix {}x{}", spec.rows(), spec.cols())));
        }
    }
    let blocks = ns * ne;
    let data: Vec<Vec<C64>> = (0..blocks).map(|b| shot_coils(d, b % ns, echoes[b / ns])).collect();

    // residual blocks A F^-1 y - d and their total norm
    let residual = |y: &[C64]| -> (Vec<Vec<C64>>, f64) {
        let r = exec::map_range(blocks, |b| {
            let mut img = y[b * nv..(b + 1) * nv].to_vec();
            fft.process(&mut img, Direction::Inverse);
            let mut k = ctx.forward_shot(b % ns, &img);
            for (a, s) in k.iter_mut().zip(&data[b]) {
                *a -= s;
            }
            k
        });
        let norm = r.iter().map(|v| norm_sqr(v)).sum::<f64>().sqrt();
        (r, norm)
    };

    let mut y = vec![ZERO; blocks * nv];
    let (mut r, initial_residual) = residual(&y);
    let mut log = Vec::new();
    let mut stop = StopReason::MaxIter;
    for it in 1..=cfg.max_iter {
        let grads = exec::map_range(blocks, |b| {
            let mut g = ctx.adjoint_shot(b % ns, &r[b]);
            fft.process(&mut g, Direction::Forward);
            g
        });
        let mut z = y.clone();
        for (b, g) in grads.iter().enumerate() {
            for (zi, gi) in z[b * nv..(b + 1) * nv].iter_mut().zip(g) {
                *zi -= gi * step;
            }
        }
        let h = lift_raw(&z, &spec);
        drop(z);
        let p = rank_project(&h, policy)?;
        drop(h);
        let y_new = unlift_raw(&p.matrix, &spec, true);
        let diff: f64 = y_new.iter().zip(&y).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let norm = norm_sqr(&y_new).sqrt();
        let rel_change = if norm > 0.0 { diff / norm } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
        y = y_new;
        let (r_new, res) = residual(&y);
        r = r_new;
        if !res.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                detail: format!("data residual {res}, iterate norm {norm}, rank {}", p.rank),
            });
        }
        log::debug!("iht iteration {it}: residual {res:.6e}, change {rel_change:.3e}, rank {}", p.rank);
        log.push(IterationRecord { iteration: it, data_residual: res, rel_change, rank: p.rank });
        if rel_change < cfg.rel_change_tol {
            stop = StopReason::Converged;
            break;
        }
    }
    if stop == StopReason::MaxIter {
        log::warn!("iht stopped at max_iter {} without reaching rel_change < {}", cfg.max_iter, cfg.rel_change_tol);
    }
    Ok((y, SolverRun { echoes: echoes.to_vec(), log, stop, initial_residual, step }))
}

/// CSV with one row per iteration of every run.
pub fn iteration_log_csv(runs: &[SolverRun]) -> String {
    let mut s = String::from("run,echoes,iteration,data_residual,rel_change,rank\n");
    for (i, run) in runs.iter().enumerate() {
        let echoes = run.echoes.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(";");
        for r in &run.log {
            let _ = writeln!(s, "{i},{echoes},{},{:.9e},{:.9e},{}", r.iteration, r.data_residual, r.rel_change, r.rank);
        }
    }
    s
}

pub fn write_iteration_log(path: &Path, runs: &[SolverRun]) -> Result<()> {
    std::fs::write(path, iteration_log_csv(runs)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kspace(dims: GridDims, ns: usize, ne: usize, seed: u64) -> VolumeSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.len() * ns * ne).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        VolumeSet::from_vec(dims, 1, ns, ne, Space::Kspace, data).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> CMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        CMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn lifted_shapes() {
        let dims = GridDims::new(12, 12, 12).unwrap();
        let s = HankelSpec::new(dims, 3, StackMode::Shots, 2, 1).unwrap();
        assert_eq!((s.rows(), s.cols()), (1000, 54));
        let j = HankelSpec::new(dims, 3, StackMode::ShotsAndEchoes, 2, 3).unwrap();
        assert_eq!((j.rows(), j.cols()), (1000, 162));
        let m = hankel_lift(&random_kspace(dims, 2, 3, 0), &j).unwrap();
        assert_eq!((m.rows, m.cols), (1000, 162));
    }

    #[test]
    fn spec_errors() {
        let dims = GridDims::new(12, 12, 4).unwrap();
        assert!(matches!(HankelSpec::new(dims, 5, StackMode::Shots, 2, 1), Err(Error::KernelTooLarge { .. })));
        assert!(HankelSpec::new(dims, 2, StackMode::Shots, 2, 1).is_err());
        assert!(HankelSpec::new(dims, 3, StackMode::Shots, 2, 3).is_err());
        let s = HankelSpec::new(dims, 3, StackMode::Shots, 2, 1).unwrap();
        assert!(hankel_lift(&random_kspace(dims, 3, 1, 0), &s).is_err());
        assert!(hankel_unlift(&CMatrix::zeros(3, 3), &s).is_err());
    }

    #[test]
    fn multiplicity_by_indicator() {
        let dims = GridDims::new(6, 6, 6).unwrap();
        let s = HankelSpec::new(dims, 3, StackMode::Shots, 1, 1).unwrap();
        for (x, y, z) in [(0, 0, 0), (2, 3, 2), (1, 0, 5), (5, 5, 5)] {
            let mut v = VolumeSet::zeros(dims, 1, 1, 1, Space::Kspace);
            v.data[dims.index(x, y, z)] = C64::new(1.0, 0.0);
            let count = hankel_lift(&v, &s).unwrap().data.iter().filter(|e| **e != ZERO).count();
            assert_eq!(count, s.multiplicity(x, y, z));
        }
        assert_eq!(s.multiplicity(0, 0, 0), 1);
        assert_eq!(s.multiplicity(2, 2, 2), 27);
        assert_eq!(s.multiplicity(2, 0, 0), 3);
    }

    #[test]
    fn unlift_of_zero_is_zero() {
        let dims = GridDims::new(5, 5, 5).unwrap();
        let s = HankelSpec::new(dims, 3, StackMode::Shots, 2, 1).unwrap();
        let v = hankel_unlift(&CMatrix::zeros(s.rows(), s.cols()), &s).unwrap();
        assert!(v.data.iter().all(|x| *x == ZERO));
    }

    #[test]
    fn rank_one_unchanged() {
        let u: Vec<C64> = (0..7).map(|i| C64::new(i as f64 + 1.0, 0.5 * i as f64)).collect();
        let w: Vec<C64> = (0..4).map(|j| C64::new(1.0 - j as f64, 2.0)).collect();
        let m = CMatrix::from_vec(7, 4, u.iter().flat_map(|a| w.iter().map(move |b| a * b.conj())).collect()).unwrap();
        let p = rank_project(&m, &RankPolicy::FixedRank(1)).unwrap();
        for (a, b) in p.matrix.data.iter().zip(&m.data) {
            assert!((a - b).norm() < 1e-12 * m.frobenius());
        }
    }

    #[test]
    fn policies_select() {
        let s = [4.0, 2.0, 1.0, 0.5];
        assert_eq!(RankPolicy::FixedRank(2).select(&s), 2);
        // energies 16, 4, 1, 0.25 of 21.25
        assert_eq!(RankPolicy::EnergyFraction(0.75).select(&s), 1);
        assert_eq!(RankPolicy::EnergyFraction(0.9).select(&s), 2);
        assert_eq!(RankPolicy::RelativeSigma(0.25).select(&s), 3);
        assert_eq!(RankPolicy::RelativeSigma(0.3).select(&s), 2);
        assert_eq!(RankPolicy::EnergyFraction(0.5).select(&[0.0, 0.0]), 0);
        assert!(RankPolicy::FixedRank(0).validate().is_err());
        assert!(RankPolicy::EnergyFraction(1.0).validate().is_err());
        assert!(RankPolicy::RelativeSigma(0.0).validate().is_err());
    }

    #[test]
    fn fixed_rank_bounds() {
        let m = random_matrix(6, 4, 1);
        assert!(rank_project(&m, &RankPolicy::FixedRank(5)).is_err());
        let full = rank_project(&m, &RankPolicy::FixedRank(4)).unwrap();
        assert_eq!(full.matrix, m);
        let wide = random_matrix(3, 5, 2);
        let p = rank_project(&wide, &RankPolicy::FixedRank(3)).unwrap();
        for (a, b) in p.matrix.data.iter().zip(&wide.data) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn non_finite_is_decomposition_error() {
        let mut m = random_matrix(4, 3, 3);
        m.data[5] = C64::new(f64::NAN, 0.0);
        assert!(matches!(rank_project(&m, &RankPolicy::FixedRank(1)), Err(Error::Decomposition { .. })));
    }

    #[test]
    fn iteration_log_format() {
        let run = SolverRun {
            echoes: vec![0, 1],
            log: vec![IterationRecord { iteration: 1, data_residual: 2.0, rel_change: 0.5, rank: 3 }],
            stop: StopReason::MaxIter,
            initial_residual: 4.0,
            step: 1.0,
        };
        let csv = iteration_log_csv(&[run]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "run,echoes,iteration,data_residual,rel_change,rank");
        assert_eq!(lines[1], "0,0;1,1,2.000000000e0,5.000000000e-1,3");
    }

    #[test]
    fn config_parses_from_toml() {
        let c: IhtConfig = toml::from_str("max_iter = 30\nstep = { mode = \"fixed\", value = 0.5 }\n").unwrap();
        assert_eq!(c.max_iter, 30);
        assert_eq!(c.step, StepSize::Fixed(0.5));
        assert_eq!(c.rel_change_tol, 1e-3);
        let p: RankPolicy = toml::from_str("mode = \"energy_fraction\"\nvalue = 0.9\n").unwrap();
        assert_eq!(p, RankPolicy::EnergyFraction(0.9));
        assert!(IhtConfig { rel_change_tol: 0.0, ..Default::default() }.validate().is_err());
    }
}
