use std::path::{Path, PathBuf};

use buda_core::encode::{shot_images, EncodingContext};
use buda_core::phantom::{CoilSet, Phantom};
use buda_core::pipeline::{self, FieldSource, Method, MethodResult, RunConfig};
use buda_core::protocol::generate_shot_plan;
use buda_core::quant::{self, Agreement, RoiSet};
use buda_core::slr::write_iteration_log;
use buda_core::volumes::{write_real_map, write_volume, GridDims, RealMap, Unit, VolumeSet};

use crate::error::CliError;
use crate::files::{self, Manifest, MaskPlane, CONFIG_FILE};
use crate::Global;

const PHANTOM_MAPS: [&str; 5] = ["pd", "t2star_ms", "df_hz", "phi0", "support"];

fn save_volume(dir: &Path, name: &str, v: &VolumeSet, m: &mut Manifest) -> Result<(), CliError> {
    write_volume(v, dir.join(name))?;
    m.files.push(format!("{name}.hdr"));
    m.files.push(format!("{name}.c64"));
    Ok(())
}

fn save_map(dir: &Path, name: &str, v: &RealMap, m: &mut Manifest) -> Result<(), CliError> {
    write_real_map(v, dir.join(name))?;
    m.files.push(format!("{name}.hdr"));
    m.files.push(format!("{name}.f64"));
    Ok(())
}

fn save_config(dir: &Path, cfg: &RunConfig, m: &mut Manifest) -> Result<(), CliError> {
    files::write_text(&dir.join(CONFIG_FILE), &cfg.to_toml_string()?)?;
    m.files.push(CONFIG_FILE.into());
    Ok(())
}

pub fn simulate(g: &Global, verify: bool) -> Result<(), CliError> {
    let cfg = files::load_config(g.config.as_deref(), None, g.seed)?;
    simulate_into(&cfg, &g.out, verify)
}

fn simulate_into(cfg: &RunConfig, out: &Path, verify: bool) -> Result<(), CliError> {
    files::create_dir(out)?;
    let sim = pipeline::simulate(cfg)?;
    let mut m = Manifest::new("simulate", cfg.seed);
    save_config(out, cfg, &mut m)?;
    let ph = &sim.phantom;
    for (name, map) in PHANTOM_MAPS.iter().zip([&ph.pd, &ph.t2star_ms, &ph.df_hz, &ph.phi0, &ph.support_map()]) {
        save_map(out, name, map, &mut m)?;
    }
    save_volume(out, "coils", &sim.coils.to_volume(), &mut m)?;
    let n_echoes = cfg.protocol.te_ms.len();
    save_volume(out, "masks", &sim.plan.mask_volume(n_echoes), &mut m)?;
    for n in 0..n_echoes {
        for (t, s) in sim.plan.shots.iter().enumerate() {
            let polarity = format!("{:?}", s.polarity).to_lowercase();
            m.mask_planes.push(MaskPlane { shot: t, echo: n, polarity, samples: s.sample_count() });
        }
    }
    save_volume(out, "truth", &sim.truth, &mut m)?;
    save_volume(out, "kspace", &sim.kspace, &mut m)?;
    m.write(out)?;
    log::info!("simulated {} shots x {} echoes into {}", sim.plan.n_shots(), n_echoes, out.display());
    if verify {
        verify_simulation(cfg, &sim)?;
    }
    Ok(())
}

fn verify_simulation(cfg: &RunConfig, sim: &pipeline::Simulation) -> Result<(), CliError> {
    let ctx = EncodingContext::new(&sim.plan, &sim.coils, &sim.phantom.df_hz)?;
    let images = shot_images(&sim.phantom, &cfg.protocol.te_ms, sim.plan.n_shots(), &sim.shot_phases)?;
    let model = ctx.forward(&images)?;
    if sim.noise_sigma == 0.0 && !cfg.simulation.readout_decay {
        if model.data != sim.kspace.data {
            return Err(CliError::Inconsistent("noiseless k-space differs from the forward model".into()));
        }
        log::info!("verify: k-space equals the forward model exactly");
    } else {
        // unsampled entries must stay exactly zero
        let stray = model.data.iter().zip(&sim.kspace.data).filter(|(a, b)| a.norm() == 0.0 && b.norm() != 0.0).count();
        if stray > 0 {
            return Err(CliError::Inconsistent(format!("{stray} unsampled k-space entries are nonzero")));
        }
        log::info!("verify: noisy data, sampling pattern consistent");
    }
    Ok(())
}

/// Simulated inputs needed downstream of `simulate`; loading also checks
/// that the phantom and truth agree with the configuration.
struct DataSet {
    cfg: RunConfig,
    coils: CoilSet,
    kspace: VolumeSet,
}

fn load_phantom(dir: &Path) -> Result<Phantom, CliError> {
    let maps: Vec<RealMap> = PHANTOM_MAPS.iter().map(|n| files::load_map(&dir.join(n))).collect::<Result<_, _>>()?;
    let dims = maps[0].dims;
    if maps.iter().any(|m| m.dims != dims) {
        return Err(CliError::Inconsistent("phantom maps have different dims".into()));
    }
    let mut it = maps.into_iter();
    let (pd, t2, df, phi0, support) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(Phantom {
        dims,
        pd,
        t2star_ms: t2,
        df_hz: df,
        phi0,
        support: support.values.iter().map(|v| *v > 0.5).collect(),
        compartments: Vec::new(),
        blob_center: None,
    })
}

fn load_data(g: &Global, dir: &Path) -> Result<DataSet, CliError> {
    let cfg = files::load_config(g.config.as_deref(), Some(dir), None)?;
    let phantom = load_phantom(dir)?;
    let coils = CoilSet::from_volume(&files::load_volume(&dir.join("coils"))?)?;
    let kspace = files::load_volume(&dir.join("kspace"))?;
    let truth = files::load_volume(&dir.join("truth"))?;
    let dims = cfg.protocol.grid()?;
    for (what, d) in [("phantom", phantom.dims), ("coils", coils.dims), ("kspace", kspace.dims), ("truth", truth.dims)] {
        if d != dims {
            return Err(CliError::Inconsistent(format!("{what} dims {d} differ from configured {dims}")));
        }
    }
    if kspace.n_shots != cfg.protocol.n_shots || kspace.n_echoes != cfg.protocol.te_ms.len() {
        return Err(CliError::Inconsistent(format!("k-space {} does not match the protocol", kspace.shape_string())));
    }
    Ok(DataSet { cfg, coils, kspace })
}

pub fn estimate_field(g: &Global, data: &Path) -> Result<(), CliError> {
    let ds = load_data(g, data)?;
    estimate_field_into(&ds, &g.out).map(|_| ())
}

fn estimate_field_into(ds: &DataSet, out: &Path) -> Result<RealMap, CliError> {
    files::create_dir(out)?;
    let plan = generate_shot_plan(&ds.cfg.protocol)?;
    let r = &ds.cfg.recon;
    let (up, down) = pipeline::polarity_images(&plan, &ds.coils, &ds.kspace, &r.cg)?;
    let (up, down) = (up.image.magnitude(0, 0, 0), down.image.magnitude(0, 0, 0));
    let est = buda_core::fieldmap::estimate_field(&up, &down, plan.bw_pe_hz_per_px, &r.field_search)?;
    let mut m = Manifest::new("estimate-field", ds.cfg.seed);
    save_map(out, "field_hz", &est.df_hz, &mut m)?;
    save_map(out, "displacement_vox", &est.displacement_vox, &mut m)?;
    save_map(out, "sense_up", &up, &mut m)?;
    save_map(out, "sense_down", &down, &mut m)?;
    m.write(out)?;
    Ok(est.df_hz)
}

pub fn recon(g: &Global, data: &Path, field: Option<&Path>) -> Result<(), CliError> {
    let ds = load_data(g, data)?;
    recon_into(&ds, data, field, &g.out)
}

fn recon_into(ds: &DataSet, data: &Path, field: Option<&Path>, out: &Path) -> Result<(), CliError> {
    files::create_dir(out)?;
    let mut m = Manifest::new("recon", ds.cfg.seed);
    let field_hz = match (field, ds.cfg.recon.field_source) {
        (Some(p), _) => files::load_map(p)?,
        (None, FieldSource::GroundTruth) => files::load_map(&data.join("df_hz"))?,
        (None, FieldSource::Estimated) => estimate_field_into(ds, &out.join("field"))?,
    };
    if field_hz.dims != ds.kspace.dims {
        return Err(CliError::Inconsistent(format!("field dims {} vs data {}", field_hz.dims, ds.kspace.dims)));
    }
    save_map(out, "field_used", &field_hz, &mut m)?;
    let plan = generate_shot_plan(&ds.cfg.protocol)?;
    for &method in &ds.cfg.recon.methods {
        log::info!("reconstructing {}", method.name());
        let r = pipeline::reconstruct(method, &plan, &ds.coils, &ds.kspace, &field_hz, &ds.cfg.recon)?;
        save_volume(out, method.name(), &r.image, &mut m)?;
        if !r.runs.is_empty() {
            let log_name = format!("{}_iterations.csv", method.name());
            write_iteration_log(&out.join(&log_name), &r.runs)?;
            m.files.push(log_name);
        }
        m.methods.push(method.name().into());
    }
    save_config(out, &ds.cfg, &mut m)?;
    m.write(out)
}

fn load_results(recon: &Path) -> Result<(RunConfig, Vec<MethodResult>), CliError> {
    let manifest = files::Manifest::read(recon)?;
    let cfg = files::load_config(None, Some(recon), None)?;
    let results = manifest
        .methods
        .iter()
        .map(|name| {
            let method = Method::parse(name)?;
            let image = files::load_volume(&recon.join(name))?;
            Ok(MethodResult { method, image, runs: Vec::new() })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok((cfg, results))
}

pub fn map_t2star(g: &Global, recon: &Path) -> Result<(), CliError> {
    map_t2star_into(recon, &g.out)
}

fn map_t2star_into(recon: &Path, out: &Path) -> Result<(), CliError> {
    files::create_dir(out)?;
    let (cfg, results) = load_results(recon)?;
    let te = &cfg.protocol.te_ms;
    let dict = quant::T2starDictionary::new(te)?;
    let mut m = Manifest::new("map-t2star", cfg.seed);
    for r in &results {
        let mags = pipeline::magnitude_volume(&r.image);
        // fit wherever any echo carries signal
        let support: Vec<bool> = (0..mags.dims.len()).map(|i| (0..mags.n_echoes).any(|n| mags.block(0, 0, n)[i].re > 0.0)).collect();
        let fit = quant::fit_t2star_varpro(&mags, &dict, &support)?;
        save_map(out, &format!("t2star_{}", r.method.name()), &fit.t2star_ms, &mut m)?;
        save_map(out, &format!("pd_{}", r.method.name()), &fit.pd, &mut m)?;
        m.methods.push(r.method.name().into());
    }
    m.write(out)
}

fn check_dims(what: &str, a: GridDims, b: GridDims) -> Result<(), CliError> {
    if a != b {
        return Err(CliError::Inconsistent(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

pub fn evaluate(
    g: &Global,
    recon: &Path,
    truth: &Path,
    t2star: Option<&Path>,
    rois: Option<&Path>,
    pairs: &[String],
) -> Result<(), CliError> {
    evaluate_into(recon, truth, t2star, rois, pairs, &g.out)
}

fn evaluate_into(
    recon: &Path,
    truth_dir: &Path,
    t2star: Option<&Path>,
    rois: Option<&Path>,
    pairs: &[String],
    out: &Path,
) -> Result<(), CliError> {
    files::create_dir(out)?;
    let (cfg, results) = load_results(recon)?;
    let truth = files::load_volume(&truth_dir.join("truth"))?;
    let phantom = load_phantom(truth_dir)?;
    check_dims("truth vs phantom", truth.dims, phantom.dims)?;
    for r in &results {
        check_dims(r.method.name(), r.image.dims, truth.dims)?;
        if r.image.n_echoes != truth.n_echoes {
            return Err(CliError::Inconsistent(format!("{} has {} echoes, truth {}", r.method.name(), r.image.n_echoes, truth.n_echoes)));
        }
    }
    let mut m = Manifest::new("evaluate", cfg.seed);
    let roi_set = match rois {
        Some(p) => RoiSet::from_toml_str(&files::read_text(p)?)?,
        None => pipeline::auto_rois(&phantom, 8, [3, 3, 2])?,
    };
    roi_set.validate(truth.dims)?;
    files::write_text(&out.join("rois.toml"), &roi_set.to_toml_string()?)?;
    m.files.push("rois.toml".into());

    let mut report = pipeline::evaluate(&results, &truth, &phantom.support, &roi_set)?;
    // truth against itself anchors the table
    let self_row = MethodResult { method: Method::Buda, image: truth.clone(), runs: Vec::new() };
    for row in pipeline::image_metrics(std::slice::from_ref(&self_row), &truth, &phantom.support)? {
        report.images.insert(row.echo, quant::ImageMetrics { method: "truth".into(), ..row });
    }

    if let Some(dir) = t2star {
        let reference = pipeline::reference_t2star(&phantom)?;
        let mut maps: Vec<(String, RealMap)> = vec![("reference".into(), reference)];
        for r in &results {
            let map = files::load_map(&dir.join(format!("t2star_{}", r.method.name())))?;
            check_dims("t2star map", map.dims, truth.dims)?;
            maps.push((r.method.name().into(), map));
        }
        let means: Vec<(String, Vec<f64>)> =
            maps.iter().map(|(n, map)| Ok((n.clone(), roi_set.means(map)?))).collect::<Result<_, CliError>>()?;
        let mut table = String::from("roi");
        for (n, _) in &means {
            table.push_str(&format!(",{n}"));
        }
        table.push('\n');
        for (k, roi) in roi_set.roi.iter().enumerate() {
            table.push_str(&roi.label);
            for (_, v) in &means {
                table.push_str(&format!(",{:.6}", v[k]));
            }
            table.push('\n');
        }
        files::write_text(&out.join("t2star_rois.csv"), &table)?;
        m.files.push("t2star_rois.csv".into());
        let requested: Vec<(String, String)> = if pairs.is_empty() {
            results.iter().map(|r| (r.method.name().to_string(), "reference".to_string())).collect()
        } else {
            pairs
                .iter()
                .map(|p| match p.split_once(':') {
                    Some((a, b)) => Ok((a.to_string(), b.to_string())),
                    None => Err(CliError::Config(format!("pair '{p}' must look like a:b"))),
                })
                .collect::<Result<_, _>>()?
        };
        let lookup = |name: &str| {
            means.iter().find(|(n, _)| n == name).map(|(_, v)| v).ok_or_else(|| CliError::Config(format!("unknown pair member '{name}'")))
        };
        for (a, b) in requested {
            let result = quant::bland_altman(lookup(&a)?, lookup(&b)?)?;
            report.agreement.push(Agreement { a, b, result });
        }
    } else if !pairs.is_empty() {
        return Err(CliError::Config("--pairs needs --t2star".into()));
    }

    files::write_text(&out.join("report.csv"), &report.to_csv())?;
    files::write_text(&out.join("summary.txt"), &report.summary())?;
    m.files.push("report.csv".into());
    m.files.push("summary.txt".into());

    let slices = out.join("slices");
    files::create_dir(&slices)?;
    let pgm = |name: String, map: &RealMap, m: &mut Manifest| -> Result<(), CliError> {
        files::write_pgm(&slices.join(&name), map)?;
        m.files.push(format!("slices/{name}"));
        Ok(())
    };
    for n in 0..truth.n_echoes {
        let t = truth.magnitude(0, 0, n);
        pgm(format!("truth_e{n}.pgm"), &t, &mut m)?;
        for r in &results {
            let a = r.image.magnitude(0, 0, n);
            pgm(format!("{}_e{n}.pgm", r.method.name()), &a, &mut m)?;
            let diff = RealMap {
                dims: a.dims,
                unit: Unit::Arbitrary,
                values: a.values.iter().zip(&t.values).map(|(x, y)| (x - y).abs()).collect(),
            };
            pgm(format!("{}_diff_e{n}.pgm", r.method.name()), &diff, &mut m)?;
        }
    }
    m.write(out)?;
    print!("{}", report.summary());
    Ok(())
}

pub fn pipeline(g: &Global) -> Result<(), CliError> {
    let cfg = files::load_config(g.config.as_deref(), None, g.seed)?;
    let root = &g.out;
    let dirs: [PathBuf; 4] = ["sim", "recon", "t2star", "eval"].map(|d| root.join(d));
    simulate_into(&cfg, &dirs[0], false)?;
    let sub = Global { config: None, out: dirs[1].clone(), seed: None, threads: g.threads };
    let ds = load_data(&sub, &dirs[0])?;
    recon_into(&ds, &dirs[0], None, &dirs[1])?;
    let t2 = if cfg.protocol.te_ms.len() >= 2 {
        map_t2star_into(&dirs[1], &dirs[2])?;
        Some(dirs[2].as_path())
    } else {
        None
    };
    evaluate_into(&dirs[1], &dirs[0], t2, None, &[], &dirs[3])
}
