//! Directory layout, manifests and slice images.

use std::fs;
use std::path::{Path, PathBuf};

use buda_core::pipeline::RunConfig;
use buda_core::volumes::{read_real_map, read_volume, RealMap, VolumeSet};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlane {
    pub shot: usize,
    pub echo: usize,
    pub polarity: String,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mask_planes: Vec<MaskPlane>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest { command: command.into(), seed, ..Default::default() }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let s = toml::to_string(self).map_err(|e| CliError::Inconsistent(e.to_string()))?;
        write_text(&dir.join(MANIFEST_FILE), &s)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let s = read_text(&path)?;
        toml::from_str(&s).map_err(|e| CliError::Inconsistent(format!("{}: {e}", path.display())))
    }
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| buda_core::Error::Io { path: dir.to_path_buf(), source: e }.into())
}

pub fn write_text(path: &Path, s: &str) -> Result<(), CliError> {
    fs::write(path, s).map_err(|e| buda_core::Error::Io { path: path.to_path_buf(), source: e }.into())
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    fs::read_to_string(path).map_err(|e| buda_core::Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn require(path: &Path, exts: &[&str]) -> Result<(), CliError> {
    for e in exts {
        let p = path.with_extension(e);
        if !p.exists() {
            return Err(CliError::Missing(p.display().to_string()));
        }
    }
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<VolumeSet, CliError> {
    require(path, &["hdr", "c64"])?;
    Ok(read_volume(path)?)
}

pub fn load_map(path: &Path) -> Result<RealMap, CliError> {
    require(path, &["hdr", "f64"])?;
    Ok(read_real_map(path)?)
}

/// `--config` if given, else the copy saved next to the data, else defaults.
pub fn load_config(explicit: Option<&Path>, data_dir: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let path: Option<PathBuf> = match (explicit, data_dir) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(d)) => Some(d.join(CONFIG_FILE)),
        (None, None) => None,
    };
    let mut cfg = match path {
        Some(p) => RunConfig::from_toml_str(&read_text(&p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Central z slice scaled so its maximum maps to 255, as a binary graymap.
pub fn pgm_slice(map: &RealMap) -> Vec<u8> {
    let d = map.dims;
    let z = d.n_z / 2;
    let plane = &map.values[z * d.n_fe * d.n_pe..(z + 1) * d.n_fe * d.n_pe];
    let max = plane.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = format!("P5\n{} {}\n255\n", d.n_fe, d.n_pe).into_bytes();
    out.extend(plane.iter().map(|v| if max > 0.0 { (255.0 * v.abs() / max).round() as u8 } else { 0 }));
    out
}

pub fn write_pgm(path: &Path, map: &RealMap) -> Result<(), CliError> {
    fs::write(path, pgm_slice(map)).map_err(|e| buda_core::Error::Io { path: path.to_path_buf(), source: e }.into())
}
