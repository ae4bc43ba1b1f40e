mod common;

use std::io::Write as _;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use buda_core::encode::{simulate_acquisition, CgConfig, EncodingContext, SimulationOptions};
use buda_core::exec;
use buda_core::fft::{CenteredFft1, Direction};
use buda_core::fieldmap::FieldSearch;
use buda_core::phantom::{echo_images, make_coils, make_phantom, PhantomParams};
use buda_core::pipeline::{
    auto_rois, default_protocol, estimate_field_from_kspace, per_echo_rmse, polarity_images, reconstruct, reference_t2star,
    simulate, t2star_agreement, FieldSource, Method, RunConfig, Simulation,
};
use buda_core::protocol::{generate_shot_plan, Polarity, Protocol};
use buda_core::quant::{bland_altman, fit_t2star_loglin, fit_t2star_varpro, local_grid_step, t2star_grid, T2starDictionary};
use buda_core::slr::{
    hankel_lift, hankel_unlift, hankel_unlift_sum, iteration_log_csv, write_iteration_log, HankelSpec, IhtConfig, RankPolicy,
    SolverRun, StackMode, StopReason,
};
use buda_core::volumes::{read_real_map, read_volume, write_real_map, write_volume, GridDims, RealMap, Space, Unit, VolumeSet, C64};
use common::{brute_lift, brute_unlift};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: usize, title: &str, pass: bool, detail: &str, elapsed: Duration) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n} [{title}]: {verdict} ({detail}; {:.1} s)\n", elapsed.as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn protocol(dims: [usize; 3], te: &[f64], r: usize, rz: usize, shots: usize, shift: usize) -> Protocol {
    Protocol { dims, te_ms: te.to_vec(), r_inplane: r, r_z: rz, n_shots: shots, caipi_z_shift: shift, ..default_protocol() }
}

fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    (0..n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect()
}

fn run_config(seed: u64, p: Protocol, snr: Option<f64>, shot_phase: f64) -> RunConfig {
    let mut cfg = RunConfig { seed, protocol: p, ..Default::default() };
    cfg.simulation.snr = snr;
    cfg.simulation.shot_phase_amplitude_rad = shot_phase;
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_1_adjoint() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut seen = [[false; 2]; 2];
    let trials = 24;
    for trial in 0..trials {
        let n_pe = [8, 12, 16][trial % 3];
        let n_z = [4, 8, 16][(trial / 3) % 3];
        let n_fe = 4 + rng.random_range(0..13);
        let r = if n_pe % 4 == 0 && trial % 2 == 0 { 4 } else { 2 };
        let rz = if trial % 4 < 2 { 2 } else { 1 };
        let shift = usize::from(rz == 2 && trial % 3 != 0);
        let shots = 2 * (1 + rng.random_range(0..4));
        let coils = 1 + rng.random_range(0..8);
        let echoes = 1 + trial % 2;
        let te: Vec<f64> = (0..echoes).map(|e| 18.0 + 25.0 * e as f64).collect();
        let dims = GridDims::new(n_fe, n_pe, n_z).unwrap();
        let plan = generate_shot_plan(&protocol([n_fe, n_pe, n_z], &te, r, rz, shots, shift)).unwrap();
        let cs = make_coils(dims, coils, trial as u64).unwrap();
        let field = RealMap::from_vec(dims, Unit::Hz, (0..dims.len()).map(|_| 100.0 * (rng.random::<f64>() - 0.5)).collect()).unwrap();
        let ctx = EncodingContext::new(&plan, &cs, &field).unwrap();
        let x = VolumeSet::from_vec(dims, 1, shots, echoes, Space::Image, random(dims.len() * shots * echoes, &mut rng)).unwrap();
        let y = VolumeSet::from_vec(dims, coils, shots, echoes, Space::Kspace, random(dims.len() * coils * shots * echoes, &mut rng))
            .unwrap();
        let ax = ctx.forward(&x).unwrap();
        let aty = ctx.adjoint(&y).unwrap();
        let rel = (ax.dot(&y) - x.dot(&aty)).norm() / (ax.norm() * y.norm());
        worst = worst.max(rel);
        seen[usize::from(shift > 0)][usize::from(!plan.shots_with(Polarity::Down).is_empty())] = true;
    }
    let elapsed = t0.elapsed();
    let pass = worst <= 1e-10 && elapsed < Duration::from_secs(10) && seen[0][1] && seen[1][1];
    report(1, "operator adjoint", pass, &format!("{trials} configurations, worst relative error {worst:.2e}"), elapsed);
    assert!(pass);
}

#[test]
fn criterion_2_hankel_oracle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let dims = GridDims::new(6, 6, 6).unwrap();
    let (m, shots, echoes) = (3, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = VolumeSet::from_vec(dims, 1, shots, echoes, Space::Kspace, random(dims.len() * shots * echoes, &mut rng)).unwrap();
    let spec = HankelSpec::new(dims, m, StackMode::ShotsAndEchoes, shots, echoes).unwrap();
    let h = hankel_lift(&v, &spec).unwrap();
    let (rows, cols, want) = brute_lift(&v, m);
    let formula = ((6 - m + 1) * (6 - m + 1) * (6 - m + 1), m * m * m * shots * echoes);
    let shape_ok = (h.rows, h.cols) == (rows, cols) && (rows, cols) == formula;
    let mut lift_err: f64 = 0.0;
    for (a, b) in h.data.iter().zip(&want) {
        lift_err = lift_err.max((a - b).norm());
    }
    let mut hm = h.clone();
    hm.data = random(rows * cols, &mut rng);
    let (sum, count) = brute_unlift(&hm.data, dims, m, shots, echoes);
    let us = hankel_unlift_sum(&hm, &spec).unwrap();
    let ua = hankel_unlift(&hm, &spec).unwrap();
    let mut unlift_err: f64 = 0.0;
    for i in 0..sum.len() {
        unlift_err = unlift_err.max((us.data[i] - sum[i]).norm());
        unlift_err = unlift_err.max((ua.data[i] - sum[i] / count[i] as f64).norm());
    }
    let elapsed = t0.elapsed();
    let pass = shape_ok && lift_err <= 1e-14 && unlift_err <= 1e-14 && elapsed < Duration::from_secs(5);
    report(
        2,
        "Hankel oracle",
        pass,
        &format!("shape {rows}x{cols}, lift error {lift_err:.1e}, unlift error {unlift_err:.1e}"),
        elapsed,
    );
    assert!(pass);
}

/// Shift of `a` relative to `b` along PE by phase correlation, with a
/// parabolic sub-voxel refinement of the peak.
fn pe_displacement(a: &RealMap, b: &RealMap) -> f64 {
    let d = a.dims;
    let ny = d.n_pe;
    let fft = CenteredFft1::new(ny);
    let mut scratch = vec![C64::new(0.0, 0.0); fft.scratch_len()];
    let mut cross = vec![C64::new(0.0, 0.0); ny];
    for z in 0..d.n_z {
        for x in 0..d.n_fe {
            let mut ca: Vec<C64> = (0..ny).map(|y| C64::new(a.at(x, y, z), 0.0)).collect();
            let mut cb: Vec<C64> = (0..ny).map(|y| C64::new(b.at(x, y, z), 0.0)).collect();
            fft.process(&mut ca, Direction::Forward, &mut scratch);
            fft.process(&mut cb, Direction::Forward, &mut scratch);
            for k in 0..ny {
                cross[k] += ca[k] * cb[k].conj();
            }
        }
    }
    for c in cross.iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            *c /= n;
        }
    }
    fft.process(&mut cross, Direction::Inverse, &mut scratch);
    // centered transform: lag 0 sits at index ny / 2
    let re: Vec<f64> = cross.iter().map(|c| c.re).collect();
    let peak = (0..ny).max_by(|&i, &j| re[i].total_cmp(&re[j])).unwrap();
    let (l, c, r) = (re[(peak + ny - 1) % ny], re[peak], re[(peak + 1) % ny]);
    let denom = l - 2.0 * c + r;
    let frac = if denom.abs() > 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
    peak as f64 + frac - (ny / 2) as f64
}

#[test]
fn criterion_3_distortion() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let p = protocol([32, 32, 8], &[30.0], 1, 1, 2, 0);
    let dims = p.grid().unwrap();
    let bw = p.bw_pe_hz_per_px;
    let mut ph = make_phantom(dims, 3, &PhantomParams::default()).unwrap();
    ph.df_hz = RealMap::from_fn(dims, Unit::Hz, |_, _, _| 3.0 * bw);
    let coils = make_coils(dims, 8, 3).unwrap();
    let plan = generate_shot_plan(&p).unwrap();
    let d = simulate_acquisition(&ph, &coils, &plan, &p.te_ms, &[], &SimulationOptions::default()).unwrap();
    let cg = CgConfig { max_iter: 50, tol: 1e-10 };
    let (up, down) = polarity_images(&plan, &coils, &d, &cg).unwrap();
    let truth = echo_images(&ph, &p.te_ms).unwrap().magnitude(0, 0, 0);
    let s_up = pe_displacement(&up.image.magnitude(0, 0, 0), &truth);
    let s_down = pe_displacement(&down.image.magnitude(0, 0, 0), &truth);
    let shift_ok = (s_up - 3.0).abs() <= 0.05 && (s_down + 3.0).abs() <= 0.05;

    let mut fcfg = run_config(5, protocol([32, 32, 16], &[30.0], 2, 1, 2, 0), None, 0.0);
    fcfg.phantom.poly_peak_hz = 0.0;
    fcfg.phantom.blob_peak_hz = 40.0;
    let sim = simulate(&fcfg).unwrap();
    let est = estimate_field_from_kspace(&sim.plan, &sim.coils, &sim.kspace, &fcfg.recon.cg, &FieldSearch::default()).unwrap();
    let peak = sim.phantom.df_hz.max_abs();
    let support = &sim.phantom.support;
    let errs: Vec<f64> = (0..support.len())
        .filter(|&i| support[i])
        .map(|i| (est.df_hz.values[i] - sim.phantom.df_hz.values[i]).abs() / fcfg.protocol.bw_pe_hz_per_px)
        .collect();
    let mae = mean(&errs);
    let elapsed = t0.elapsed();
    let pass = shift_ok && mae < 0.5 && (peak - 40.0).abs() < 1.0 && elapsed < Duration::from_secs(30);
    report(
        3,
        "distortion fidelity",
        pass,
        &format!("up {s_up:+.3} vox, down {s_down:+.3} vox, field MAE {mae:.3} vox on a {peak:.1} Hz peak"),
        elapsed,
    );
    assert!(pass);
}

fn check_contract(runs: &[SolverRun], cfg: &IhtConfig) -> bool {
    !runs.is_empty()
        && runs.iter().all(|r| {
            let stop_ok = match r.stop {
                StopReason::Converged => r.log.last().is_some_and(|l| l.rel_change < cfg.rel_change_tol),
                StopReason::MaxIter => r.log.len() == cfg.max_iter,
            };
            stop_ok && !r.log.is_empty() && r.final_residual() <= r.initial_residual
        })
}

#[test]
fn criterion_4_shot_ordering() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let configs = [("buda 4-shot CAIPI", 2, 4, 1), ("buda 4-shot no CAIPI", 2, 4, 0), ("buda 2-shot", 1, 2, 0)];
    let mut buda = [[0.0; 3]; 3];
    let mut hybrid = [0.0; 3];
    let mut contract = true;
    for seed in 0..3u64 {
        for (c, &(_, rz, shots, shift)) in configs.iter().enumerate() {
            let mut cfg = run_config(seed, protocol([48, 48, 16], &[30.0], 4, rz, shots, shift), Some(30.0), 0.5);
            cfg.recon.rank = RankPolicy::FixedRank(20);
            cfg.recon.iht.max_iter = 100;
            let sim = simulate(&cfg).unwrap();
            let field = &sim.phantom.df_hz;
            let r = reconstruct(Method::Buda, &sim.plan, &sim.coils, &sim.kspace, field, &cfg.recon).unwrap();
            contract &= check_contract(&r.runs, &cfg.recon.iht);
            buda[c][seed as usize] = per_echo_rmse(&r.image, &sim.truth, &sim.phantom.support).unwrap()[0];
            if shots == 2 {
                let h = reconstruct(Method::HybridSense, &sim.plan, &sim.coils, &sim.kspace, field, &cfg.recon).unwrap();
                hybrid[seed as usize] = per_echo_rmse(&h.image, &sim.truth, &sim.phantom.support).unwrap()[0];
            }
        }
    }
    let b: Vec<f64> = buda.iter().map(|v| mean(v)).collect();
    let hs = mean(&hybrid);
    let elapsed = t0.elapsed();
    let pass = b[0] <= b[1] && b[1] <= b[2] && b[2] < hs && contract && elapsed < Duration::from_secs(600);
    report(
        4,
        "shot/CAIPI ordering",
        pass,
        &format!(
            "mean RMSE {} {:.2}% <= {} {:.2}% <= {} {:.2}% < hybrid-sense 2-shot {hs:.2}%",
            configs[0].0, b[0], configs[1].0, b[1], configs[2].0, b[2]
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_5_joint_vs_separate() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let te = [18.0, 43.17, 68.34];
    let mut joint = [[0.0; 3]; 2];
    let mut separate = [0.0; 3];
    for seed in 0..3u64 {
        for (c, shift) in [1usize, 0].into_iter().enumerate() {
            let mut cfg = run_config(seed, protocol([24, 24, 8], &te, 8, 2, 8, shift), Some(30.0), 0.5);
            cfg.recon.rank = RankPolicy::FixedRank(20);
            cfg.recon.iht.max_iter = 60;
            let sim = simulate(&cfg).unwrap();
            let field = &sim.phantom.df_hz;
            let j = reconstruct(Method::BudaJoint, &sim.plan, &sim.coils, &sim.kspace, field, &cfg.recon).unwrap();
            joint[c][seed as usize] = mean(&per_echo_rmse(&j.image, &sim.truth, &sim.phantom.support).unwrap());
            if shift == 1 {
                let s = reconstruct(Method::Buda, &sim.plan, &sim.coils, &sim.kspace, field, &cfg.recon).unwrap();
                separate[seed as usize] = mean(&per_echo_rmse(&s.image, &sim.truth, &sim.phantom.support).unwrap());
            }
        }
    }
    let (jc, jn, sep) = (mean(&joint[0]), mean(&joint[1]), mean(&separate));
    let elapsed = t0.elapsed();
    let pass = jc < sep && jc < jn && elapsed < Duration::from_secs(900);
    report(
        5,
        "joint vs separate",
        pass,
        &format!("mean per-echo RMSE joint CAIPI {jc:.2}%, joint no CAIPI {jn:.2}%, separate CAIPI {sep:.2}%"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_6_solver_contract() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (Method::Buda, protocol([32, 32, 8], &[30.0], 4, 1, 2, 0), 100),
        (Method::Buda, protocol([32, 32, 8], &[30.0], 4, 2, 4, 1), 5),
        (Method::BudaJoint, protocol([24, 24, 8], &[18.0, 43.17, 68.34], 4, 1, 2, 0), 100),
        (Method::BudaJoint, protocol([24, 24, 8], &[18.0, 43.17, 68.34], 8, 2, 8, 1), 20),
    ];
    let mut ok = true;
    let mut stops = Vec::new();
    for (k, (method, p, max_iter)) in cases.into_iter().enumerate() {
        let mut cfg = run_config(k as u64, p, Some(30.0), 0.5);
        cfg.recon.iht.max_iter = max_iter;
        let sim = simulate(&cfg).unwrap();
        let r = reconstruct(method, &sim.plan, &sim.coils, &sim.kspace, &sim.phantom.df_hz, &cfg.recon).unwrap();
        ok &= check_contract(&r.runs, &cfg.recon.iht);
        let path = dir.path().join(format!("case{k}_iterations.csv"));
        write_iteration_log(&path, &r.runs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: usize = r.runs.iter().map(|run| run.log.len()).sum();
        ok &= text == iteration_log_csv(&r.runs) && text.lines().count() == rows + 1;
        stops.extend(r.runs.iter().map(|run| format!("{:?}@{}", run.stop, run.log.len())));
    }
    let elapsed = t0.elapsed();
    report(6, "solver contract", ok, &format!("stops {}", stops.join(" ")), elapsed);
    assert!(ok);
}

#[test]
fn criterion_7_t2star_fitting() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let te = [18.0, 43.17, 68.34];
    let dict = T2starDictionary::new(&te).unwrap();
    let grid = t2star_grid();
    let atoms_ok = dict.n_atoms() == 184
        && grid.len() == 184
        && (0..dict.n_atoms()).all(|a| (dict.atom(a).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);

    let on_grid = GridDims::new(grid.len(), 1, 1).unwrap();
    let mut v = VolumeSet::zeros(on_grid, 1, 1, te.len(), Space::Image);
    for (n, t) in te.iter().enumerate() {
        for (i, s) in v.block_mut(0, 0, n).iter_mut().enumerate() {
            *s = C64::new(2.5 * (-t / grid[i]).exp(), 0.0);
        }
    }
    let all = vec![true; on_grid.len()];
    let fit = fit_t2star_varpro(&v, &dict, &all).unwrap();
    let loglin = fit_t2star_loglin(&v, &te, &all).unwrap();
    let exact = (0..grid.len()).all(|i| fit.t2star_ms.values[i] == grid[i]);
    let pd_err = fit.pd.values.iter().map(|p| (p - 2.5).abs()).fold(0.0, f64::max);
    let oracle_ok = (0..grid.len()).all(|i| (fit.t2star_ms.values[i] - loglin.t2star_ms.values[i]).abs() <= local_grid_step(grid[i]));

    let dims = GridDims::new(32, 32, 16).unwrap();
    let ph = make_phantom(dims, 7, &PhantomParams::default()).unwrap();
    let mut echoes = echo_images(&ph, &te).unwrap();
    let sigma = buda_core::encode::noise_sigma_for_snr(echoes.block(0, 0, 0), &ph.support, 30.0);
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for s in echoes.data.iter_mut() {
        *s += C64::new(noise.sample(&mut rng), noise.sample(&mut rng));
    }
    let noisy = fit_t2star_varpro(&buda_core::pipeline::magnitude_volume(&echoes), &dict, &ph.support).unwrap();
    let mut steps: Vec<f64> = (0..dims.len())
        .filter(|&i| ph.support[i])
        .map(|i| (noisy.t2star_ms.values[i] - ph.t2star_ms.values[i]).abs() / local_grid_step(ph.t2star_ms.values[i]))
        .collect();
    steps.sort_by(f64::total_cmp);
    let median = steps[steps.len() / 2];
    let elapsed = t0.elapsed();
    let pass = atoms_ok && exact && pd_err <= 1e-10 && oracle_ok && median <= 2.0 && elapsed < Duration::from_secs(60);
    report(
        7,
        "T2* fitting",
        pass,
        &format!(
            "184 unit atoms {atoms_ok}, on-grid exact {exact}, pd error {pd_err:.1e}, VARPRO vs log-linear {oracle_ok}, SNR 30 median error {median:.2} grid steps"
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_8_t2star_agreement() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let (mut ours, mut refs) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let mut cfg = run_config(seed, protocol([32, 32, 16], &[18.0, 43.17, 68.34], 4, 1, 2, 0), Some(30.0), 0.5);
        cfg.recon.methods = vec![Method::BudaJoint];
        cfg.recon.field_source = FieldSource::Estimated;
        cfg.recon.rank = RankPolicy::FixedRank(40);
        let sim: Simulation = simulate(&cfg).unwrap();
        let est = estimate_field_from_kspace(&sim.plan, &sim.coils, &sim.kspace, &cfg.recon.cg, &cfg.recon.field_search).unwrap();
        let r = reconstruct(Method::BudaJoint, &sim.plan, &sim.coils, &sim.kspace, &est.df_hz, &cfg.recon).unwrap();
        let reference = reference_t2star(&sim.phantom).unwrap();
        let rois = auto_rois(&sim.phantom, 8, [3, 3, 2]).unwrap();
        let (fit, _) = t2star_agreement(&r, &cfg.protocol.te_ms, &sim.phantom, &reference, &rois).unwrap();
        ours.extend(rois.means(&fit.t2star_ms).unwrap());
        refs.extend(rois.means(&reference).unwrap());
    }
    let ba = bland_altman(&ours, &refs).unwrap();
    let elapsed = t0.elapsed();
    let pass = ba.n >= 6 && ba.bias.abs() <= 1.5 && elapsed < Duration::from_secs(900);
    report(
        8,
        "T2* Bland-Altman",
        pass,
        &format!("{} ROIs over 3 seeds, bias {:+.3} ms, limits [{:.3}, {:.3}] ms", ba.n, ba.bias, ba.loa_low, ba.loa_high),
        elapsed,
    );
    assert!(pass);
}

fn scenario_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut cfg = run_config(11, protocol([24, 24, 8], &[18.0, 43.17], 4, 2, 4, 1), Some(30.0), 0.5);
    cfg.recon.iht.max_iter = 15;
    let sim = simulate(&cfg).unwrap();
    let est = estimate_field_from_kspace(&sim.plan, &sim.coils, &sim.kspace, &cfg.recon.cg, &cfg.recon.field_search).unwrap();
    write_volume(&sim.kspace, dir.join("kspace")).unwrap();
    write_volume(&sim.truth, dir.join("truth")).unwrap();
    write_real_map(&est.df_hz, dir.join("field")).unwrap();
    for m in [Method::Buda, Method::BudaJoint, Method::HybridSense, Method::TopupAvg] {
        let r = reconstruct(m, &sim.plan, &sim.coils, &sim.kspace, &est.df_hz, &cfg.recon).unwrap();
        write_volume(&r.image, dir.join(m.name())).unwrap();
    }
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_9_determinism_and_format() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = scenario_files(a.path());
    let second = scenario_files(b.path());
    exec::set_parallel(false);
    let sequential = scenario_files(c.path());
    exec::set_parallel(true);
    let identical = !first.is_empty() && first == second && first == sequential;

    let mut round_trip = true;
    for name in ["kspace", "truth", "buda", "buda-joint", "hybrid-sense", "topup-avg"] {
        let v = read_volume(a.path().join(name)).unwrap();
        let again = tempfile::tempdir().unwrap();
        write_volume(&v, again.path().join("v")).unwrap();
        let w = read_volume(again.path().join("v")).unwrap();
        round_trip &= v.data.iter().zip(&w.data).all(|(p, q)| p.re.to_bits() == q.re.to_bits() && p.im.to_bits() == q.im.to_bits())
            && std::fs::read(a.path().join(format!("{name}.c64"))).unwrap() == std::fs::read(again.path().join("v.c64")).unwrap();
    }
    let field = read_real_map(a.path().join("field")).unwrap();
    let again = tempfile::tempdir().unwrap();
    write_real_map(&field, again.path().join("f")).unwrap();
    let f2 = read_real_map(again.path().join("f")).unwrap();
    round_trip &= field.unit == f2.unit && field.values.iter().zip(&f2.values).all(|(p, q)| p.to_bits() == q.to_bits());

    let elapsed = t0.elapsed();
    let pass = identical && round_trip;
    report(
        9,
        "determinism and format",
        pass,
        &format!("{} files byte-identical across reruns and sequential mode: {identical}, bit-exact round trips: {round_trip}", first.len()),
        elapsed,
    );
    assert!(pass);
}
