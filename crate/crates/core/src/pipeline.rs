//! End-to-end runs: simulate an acquisition, choose or estimate the field,
//! reconstruct with one or more methods and score the results.

use serde::{Deserialize, Serialize};

use crate::encode::{
    cg_sense, hybrid_space_sense, noise_sigma_for_snr, simulate_acquisition, unwarp_and_average, CgConfig, CgOutput,
    EncodingContext, SimulationOptions,
};
use crate::error::{Error, Result};
use crate::fieldmap::{estimate_field, FieldEstimate, FieldSearch};
use crate::phantom::{echo_images, make_coils, make_phantom, shot_phase_errors, CoilSet, Phantom, PhantomParams};
use crate::protocol::{generate_shot_plan, Polarity, Protocol, ShotPlan};
use crate::quant::{self, ImageMetrics, MetricsReport, Roi, RoiSet};
use crate::slr::{buda_joint_reconstruct, buda_reconstruct, IhtConfig, RankPolicy, SolverRun};
use crate::volumes::{RealMap, Space, Unit, VolumeSet, C64};

/// Echo times of the noiseless multi-echo reference used for T2* agreement.
pub const REFERENCE_TE_MS: [f64; 6] = [6.0, 18.0, 30.0, 43.17, 55.0, 68.34];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SenseUp,
    SenseDown,
    TopupAvg,
    HybridSense,
    Buda,
    BudaJoint,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::SenseUp, Method::SenseDown, Method::TopupAvg, Method::HybridSense, Method::Buda, Method::BudaJoint];

    pub fn name(self) -> &'static str {
        match self {
            Method::SenseUp => "sense-up",
            Method::SenseDown => "sense-down",
            Method::TopupAvg => "topup-avg",
            Method::HybridSense => "hybrid-sense",
            Method::Buda => "buda",
            Method::BudaJoint => "buda-joint",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldSource {
    GroundTruth,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_coils: usize,
    /// Per real channel; ignored when `snr` is set.
    pub noise_sigma: f64,
    /// Mean first-echo magnitude over the support divided by the noise level.
    pub snr: Option<f64>,
    pub shot_phase_amplitude_rad: f64,
    pub readout_decay: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { n_coils: 8, noise_sigma: 0.0, snr: None, shot_phase_amplitude_rad: 0.0, readout_decay: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub methods: Vec<Method>,
    pub field_source: FieldSource,
    pub kernel: usize,
    pub rank: RankPolicy,
    pub iht: IhtConfig,
    pub cg: CgConfig,
    pub field_search: FieldSearch,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            methods: vec![Method::Buda],
            field_source: FieldSource::GroundTruth,
            kernel: 3,
            rank: RankPolicy::FixedRank(20),
            iht: IhtConfig::default(),
            cg: CgConfig::default(),
            field_search: FieldSearch::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub protocol: Protocol,
    pub phantom: PhantomParams,
    pub simulation: SimulationConfig,
    pub recon: ReconConfig,
}

pub fn default_protocol() -> Protocol {
    Protocol {
        dims: [32, 32, 16],
        fov_mm: [220.0, 220.0, 128.0],
        tr_ms: 72.0,
        te_ms: vec![30.0],
        flip_deg: 16.0,
        r_inplane: 4,
        r_z: 1,
        n_shots: 2,
        caipi_z_shift: 0,
        bw_pe_hz_per_px: 16.85,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            protocol: default_protocol(),
            phantom: PhantomParams { poly_peak_hz: 30.0, blob_peak_hz: 40.0, ..PhantomParams::default() },
            simulation: SimulationConfig::default(),
            recon: ReconConfig::default(),
        }
    }
}

fn keyed(key: &str, e: Error) -> Error {
    match e {
        Error::Config(m) | Error::InvalidDims(m) | Error::OutOfRange(m) => Error::Config(format!("{key}: {m}")),
        Error::KernelTooLarge { kernel, min_dim } => {
            Error::Config(format!("{key}: kernel {kernel} exceeds smallest grid dimension {min_dim}"))
        }
        other => other,
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate().map_err(|e| keyed("protocol", e))?;
        let dims = self.protocol.grid()?;
        let s = &self.simulation;
        if s.n_coils == 0 {
            return Err(Error::Config("simulation.n_coils must be >= 1".into()));
        }
        if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("simulation.noise_sigma must be >= 0, got {}", s.noise_sigma)));
        }
        if let Some(snr) = s.snr {
            if !(snr > 0.0) {
                return Err(Error::Config(format!("simulation.snr must be > 0, got {snr}")));
            }
        }
        if !(s.shot_phase_amplitude_rad >= 0.0 && s.shot_phase_amplitude_rad.is_finite()) {
            return Err(Error::Config("simulation.shot_phase_amplitude_rad must be >= 0".into()));
        }
        let r = &self.recon;
        if r.methods.is_empty() {
            return Err(Error::Config("recon.methods must list at least one method".into()));
        }
        r.rank.validate().map_err(|e| keyed("recon.rank", e))?;
        r.iht.validate().map_err(|e| keyed("recon.iht", e))?;
        r.field_search.validate().map_err(|e| keyed("recon.field_search", e))?;
        if r.kernel % 2 == 0 {
            return Err(Error::Config(format!("recon.kernel must be odd, got {}", r.kernel)));
        }
        dims.check_kernel(r.kernel).map_err(|e| keyed("recon.kernel", e))?;
        if r.cg.max_iter == 0 || !(r.cg.tol > 0.0) {
            return Err(Error::Config("recon.cg needs max_iter >= 1 and tol > 0".into()));
        }
        Ok(())
    }
}

/// Everything produced by the simulation stage.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub phantom: Phantom,
    pub coils: CoilSet,
    pub plan: ShotPlan,
    /// Ground-truth echo images, one coil and one shot.
    pub truth: VolumeSet,
    pub shot_phases: Vec<RealMap>,
    pub kspace: VolumeSet,
    pub noise_sigma: f64,
}

/// Seeds of the independent random streams derived from the run seed.
pub fn stream_seeds(seed: u64) -> (u64, u64, u64, u64) {
    (seed, seed.wrapping_add(0x1000), seed.wrapping_add(0x2000), seed.wrapping_add(0x3000))
}

pub fn simulate(cfg: &RunConfig) -> Result<Simulation> {
    cfg.validate()?;
    let dims = cfg.protocol.grid()?;
    let (s_ph, s_coil, s_shot, s_noise) = stream_seeds(cfg.seed);
    let phantom = make_phantom(dims, s_ph, &cfg.phantom)?;
    let coils = make_coils(dims, cfg.simulation.n_coils, s_coil)?;
    let plan = generate_shot_plan(&cfg.protocol)?;
    let te = &cfg.protocol.te_ms;
    let truth = echo_images(&phantom, te)?;
    let shot_phases = if cfg.simulation.shot_phase_amplitude_rad > 0.0 {
        shot_phase_errors(dims, plan.n_shots(), cfg.simulation.shot_phase_amplitude_rad, s_shot)?
    } else {
        Vec::new()
    };
    let noise_sigma = match cfg.simulation.snr {
        Some(snr) => noise_sigma_for_snr(truth.block(0, 0, 0), &phantom.support, snr),
        None => cfg.simulation.noise_sigma,
    };
    let opts = SimulationOptions { noise_sigma, readout_decay: cfg.simulation.readout_decay, seed: s_noise };
    let kspace = simulate_acquisition(&phantom, &coils, &plan, te, &shot_phases, &opts)?;
    Ok(Simulation { phantom, coils, plan, truth, shot_phases, kspace, noise_sigma })
}

/// Zero-field SENSE per polarity group: distorted up and down images.
pub fn polarity_images(plan: &ShotPlan, coils: &CoilSet, d: &VolumeSet, cg: &CgConfig) -> Result<(CgOutput, CgOutput)> {
    let zero = RealMap::zeros(plan.dims, Unit::Hz);
    let ctx = EncodingContext::new(plan, coils, &zero)?;
    let up = cg_sense(&ctx, d, &plan.shots_with(Polarity::Up), cg)?;
    let down = cg_sense(&ctx, d, &plan.shots_with(Polarity::Down), cg)?;
    Ok((up, down))
}

/// Field from the first-echo magnitudes of the polarity-group SENSE images.
pub fn estimate_field_from_kspace(
    plan: &ShotPlan,
    coils: &CoilSet,
    d: &VolumeSet,
    cg: &CgConfig,
    search: &FieldSearch,
) -> Result<FieldEstimate> {
    let (up, down) = polarity_images(plan, coils, d, cg)?;
    estimate_field(&up.image.magnitude(0, 0, 0), &down.image.magnitude(0, 0, 0), plan.bw_pe_hz_per_px, search)
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    /// One image per echo; magnitude-only methods store real values.
    pub image: VolumeSet,
    pub runs: Vec<SolverRun>,
}

impl MethodResult {
    pub fn magnitudes(&self) -> Vec<RealMap> {
        (0..self.image.n_echoes).map(|n| self.image.magnitude(0, 0, n)).collect()
    }
}

fn real_volume(maps: &[RealMap]) -> Result<VolumeSet> {
    VolumeSet::from_real_maps(maps)
}

pub fn reconstruct(
    method: Method,
    plan: &ShotPlan,
    coils: &CoilSet,
    d: &VolumeSet,
    field_hz: &RealMap,
    cfg: &ReconConfig,
) -> Result<MethodResult> {
    let ctx = || EncodingContext::new(plan, coils, field_hz);
    let (image, runs) = match method {
        Method::SenseUp | Method::SenseDown => {
            let (up, down) = polarity_images(plan, coils, d, &cfg.cg)?;
            (if method == Method::SenseUp { up.image } else { down.image }, Vec::new())
        }
        Method::TopupAvg => {
            let (up, down) = polarity_images(plan, coils, d, &cfg.cg)?;
            let maps = (0..d.n_echoes)
                .map(|n| unwarp_and_average(&up.image.magnitude(0, 0, n), &down.image.magnitude(0, 0, n), field_hz, plan.bw_pe_hz_per_px))
                .collect::<Result<Vec<_>>>()?;
            (real_volume(&maps)?, Vec::new())
        }
        Method::HybridSense => (hybrid_space_sense(&ctx()?, d, &cfg.cg)?.image, Vec::new()),
        Method::Buda => {
            let out = buda_reconstruct(&ctx()?, d, cfg.kernel, &cfg.rank, &cfg.iht)?;
            (out.combined, out.runs)
        }
        Method::BudaJoint => {
            let out = buda_joint_reconstruct(&ctx()?, d, cfg.kernel, &cfg.rank, &cfg.iht)?;
            (out.combined, out.runs)
        }
    };
    Ok(MethodResult { method, image, runs })
}

/// Magnitude RMSE percent of each echo against the truth inside `support`.
pub fn per_echo_rmse(image: &VolumeSet, truth: &VolumeSet, support: &[bool]) -> Result<Vec<f64>> {
    if image.dims != truth.dims || image.n_echoes != truth.n_echoes {
        return Err(Error::DimensionMismatch(format!("{} vs {}", image.shape_string(), truth.shape_string())));
    }
    (0..truth.n_echoes)
        .map(|n| quant::rmse_percent(&image.magnitude(0, 0, n), &truth.magnitude(0, 0, n), Some(support)))
        .collect()
}

/// RMSE and SSIM rows for every echo of every result.
pub fn image_metrics(results: &[MethodResult], truth: &VolumeSet, support: &[bool]) -> Result<Vec<ImageMetrics>> {
    let mut rows = Vec::new();
    for r in results {
        let rmse = per_echo_rmse(&r.image, truth, support)?;
        for (n, e) in rmse.into_iter().enumerate() {
            let ssim = quant::ssim(&r.image.magnitude(0, 0, n), &truth.magnitude(0, 0, n))?;
            rows.push(ImageMetrics { method: r.method.name().into(), echo: n, rmse_percent: e, ssim });
        }
    }
    Ok(rows)
}

/// T2* of the noiseless multi-echo reference acquisition of `ph`.
pub fn reference_t2star(ph: &Phantom) -> Result<RealMap> {
    let echoes = echo_images(ph, &REFERENCE_TE_MS)?;
    let dict = quant::T2starDictionary::new(&REFERENCE_TE_MS)?;
    Ok(quant::fit_t2star_varpro(&magnitude_volume(&echoes), &dict, &ph.support)?.t2star_ms)
}

/// Per-echo magnitudes of a single-coil single-shot volume, as real values.
pub fn magnitude_volume(v: &VolumeSet) -> VolumeSet {
    let mut out = v.clone();
    out.data.iter_mut().for_each(|x| *x = C64::new(x.norm(), 0.0));
    out.space = Space::Image;
    out
}

/// Up to `count` disjoint boxes of `size` voxels, each inside a region of
/// constant T2*, spread over as many distinct T2* values as the object has.
pub fn auto_rois(ph: &Phantom, count: usize, size: [usize; 3]) -> Result<RoiSet> {
    let d = ph.dims;
    if size.iter().zip(d.as_array()).any(|(s, n)| *s == 0 || *s > n) {
        return Err(Error::Config(format!("ROI size {size:?} does not fit {d}")));
    }
    let fits = |x0: usize, y0: usize, z0: usize| -> Option<f64> {
        let t = ph.t2star_ms.at(x0, y0, z0);
        for z in z0..z0 + size[2] {
            for y in y0..y0 + size[1] {
                for x in x0..x0 + size[0] {
                    let i = d.index(x, y, z);
                    if !ph.support[i] || ph.t2star_ms.values[i] != t {
                        return None;
                    }
                }
            }
        }
        Some(t)
    };
    // non-overlapping candidate tiles, grouped by T2*
    let mut groups: Vec<(f64, Vec<[usize; 3]>)> = Vec::new();
    for z in (0..=d.n_z - size[2]).step_by(size[2]) {
        for y in (0..=d.n_pe - size[1]).step_by(size[1]) {
            for x in (0..=d.n_fe - size[0]).step_by(size[0]) {
                if let Some(t) = fits(x, y, z) {
                    match groups.iter_mut().find(|g| g.0 == t) {
                        Some(g) => g.1.push([x, y, z]),
                        None => groups.push((t, vec![[x, y, z]])),
                    }
                }
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::Config(format!("no {size:?} box fits inside a constant-T2* region of the phantom; supply ROIs explicitly")));
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    // round-robin quota over T2* groups, then evenly spaced tiles per group
    let mut quota = vec![0usize; groups.len()];
    let mut left = count;
    while left > 0 {
        let before = left;
        for (q, g) in quota.iter_mut().zip(&groups) {
            if left > 0 && *q < g.1.len() {
                *q += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    let picked: Vec<(f64, [usize; 3])> = groups
        .iter()
        .zip(&quota)
        .flat_map(|((t, tiles), &q)| (0..q).map(move |j| (*t, tiles[j * tiles.len() / q])))
        .collect();
    let roi = picked
        .into_iter()
        .enumerate()
        .map(|(k, (t, o))| Roi {
            label: format!("roi{k}_t{t:.0}"),
            x0: o[0],
            y0: o[1],
            z0: o[2],
            x1: o[0] + size[0],
            y1: o[1] + size[1],
            z1: o[2] + size[2],
        })
        .collect();
    let set = RoiSet { roi };
    set.validate(d)?;
    Ok(set)
}

/// T2* agreement between a method's echo magnitudes and the reference.
pub fn t2star_agreement(
    result: &MethodResult,
    te_ms: &[f64],
    ph: &Phantom,
    reference: &RealMap,
    rois: &RoiSet,
) -> Result<(quant::T2starFit, quant::BlandAltman)> {
    let dict = quant::T2starDictionary::new(te_ms)?;
    let fit = quant::fit_t2star_varpro(&magnitude_volume(&result.image), &dict, &ph.support)?;
    let a = rois.means(&fit.t2star_ms)?;
    let b = rois.means(reference)?;
    Ok((fit, quant::bland_altman(&a, &b)?))
}

/// Full report: image metrics, ROI statistics on the first echo, and
/// pairwise Bland-Altman of ROI means over the first echo.
pub fn evaluate(results: &[MethodResult], truth: &VolumeSet, support: &[bool], rois: &RoiSet) -> Result<MetricsReport> {
    let mut report = MetricsReport { images: image_metrics(results, truth, support)?, ..Default::default() };
    for r in results {
        let m = r.image.magnitude(0, 0, 0);
        for roi in &rois.roi {
            report.rois.push(quant::RoiStat {
                method: r.method.name().into(),
                roi: roi.label.clone(),
                mean: quant::roi_mean(&m, roi),
                snr: quant::local_snr(&m, roi)?,
            });
        }
    }
    Ok(report)
}
