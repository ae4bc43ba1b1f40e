//! Blip-up/down CAIPI shot plans.
//!
//! Shots alternate polarity in acquisition order (shot 1 blip-up, shot 2
//! blip-down, ...). Within each polarity group the ky offsets advance
//! round-robin so the group tiles ky as evenly as possible; the kz base of
//! shot `t` is `t mod r_z`, and with a CAIPI shift the kz offset advances by
//! `caipi_z_shift` on every acquired ky line.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{GridDims, Space, VolumeSet, C64};

/// Acquisition parameters. Field names double as the config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub dims: [usize; 3],
    pub fov_mm: [f64; 3],
    pub tr_ms: f64,
    pub te_ms: Vec<f64>,
    pub flip_deg: f64,
    pub r_inplane: usize,
    pub r_z: usize,
    pub n_shots: usize,
    pub caipi_z_shift: usize,
    pub bw_pe_hz_per_px: f64,
}

impl Protocol {
    pub fn grid(&self) -> Result<GridDims> {
        GridDims::from_array(self.dims)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.n_shots == 0 || self.n_shots % 2 != 0 {
            return Err(Error::Config(format!("n_shots must be even and positive, got {}", self.n_shots)));
        }
        if self.r_inplane == 0 || self.r_z == 0 {
            return Err(Error::Config("r_inplane and r_z must be >= 1".into()));
        }
        if self.te_ms.is_empty() {
            return Err(Error::Config("te_ms must list at least one echo time".into()));
        }
        if self.te_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("te_ms must be strictly increasing: {:?}", self.te_ms)));
        }
        if self.te_ms.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
            return Err(Error::Config("te_ms entries must be finite and >= 0".into()));
        }
        if !(self.bw_pe_hz_per_px > 0.0) || !self.bw_pe_hz_per_px.is_finite() {
            return Err(Error::Config(format!("bw_pe_hz_per_px must be positive, got {}", self.bw_pe_hz_per_px)));
        }
        if self.caipi_z_shift >= self.r_z && !(self.r_z == 1 && self.caipi_z_shift == 0) {
            return Err(Error::Config(format!(
                "caipi_z_shift {} must be smaller than r_z {}",
                self.caipi_z_shift, self.r_z
            )));
        }
        let [_, n_pe, n_z] = self.dims;
        if n_pe % self.r_inplane != 0 {
            return Err(Error::Config(format!("n_pe {n_pe} not divisible by r_inplane {}", self.r_inplane)));
        }
        if n_z % self.r_z != 0 {
            return Err(Error::Config(format!("n_z {n_z} not divisible by r_z {}", self.r_z)));
        }
        Ok(())
    }

    /// `r_inplane * r_z / n_shots` as a reduced fraction.
    pub fn r_effective(&self) -> (usize, usize) {
        let num = self.r_inplane * self.r_z;
        let den = self.n_shots;
        let g = gcd(num, den).max(1);
        (num / g, den / g)
    }

    pub fn n_echoes(&self) -> usize {
        self.te_ms.len()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Up,
    Down,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Up => 1.0,
            Polarity::Down => -1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Polarity::Up => 0,
            Polarity::Down => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotPattern {
    pub polarity: Polarity,
    pub ky_offset: usize,
    pub kz_base: usize,
    /// Acquired (ky, kz) samples, ky fastest: `mask[ky + n_pe * kz]`.
    pub mask: Vec<bool>,
    /// ky lines carrying at least one sample, ascending.
    pub lines: Vec<usize>,
}

impl ShotPattern {
    pub fn sample_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotPlan {
    pub dims: GridDims,
    pub r_inplane: usize,
    pub r_z: usize,
    pub caipi_z_shift: usize,
    pub bw_pe_hz_per_px: f64,
    /// Echo spacing between consecutive ky lines, seconds.
    pub t_line: f64,
    pub ky_center: usize,
    pub shots: Vec<ShotPattern>,
}

pub fn generate_shot_plan(p: &Protocol) -> Result<ShotPlan> {
    p.validate()?;
    let dims = p.grid()?;
    let (n_pe, n_z) = (dims.n_pe, dims.n_z);
    let half = p.n_shots / 2;
    let ky_step = (p.r_inplane / half).max(1);
    let shots = (0..p.n_shots)
        .map(|t| {
            let polarity = if t % 2 == 0 { Polarity::Up } else { Polarity::Down };
            let ky_offset = ((t / 2) * ky_step) % p.r_inplane;
            let kz_base = t % p.r_z;
            let mut mask = vec![false; n_pe * n_z];
            let mut lines = Vec::new();
            for (j, ky) in (ky_offset..n_pe).step_by(p.r_inplane).enumerate() {
                let kz0 = (j * p.caipi_z_shift + kz_base) % p.r_z;
                for kz in (kz0..n_z).step_by(p.r_z) {
                    mask[ky + n_pe * kz] = true;
                }
                lines.push(ky);
            }
            ShotPattern { polarity, ky_offset, kz_base, mask, lines }
        })
        .collect();
    Ok(ShotPlan {
        dims,
        r_inplane: p.r_inplane,
        r_z: p.r_z,
        caipi_z_shift: p.caipi_z_shift,
        bw_pe_hz_per_px: p.bw_pe_hz_per_px,
        t_line: 1.0 / (n_pe as f64 * p.bw_pe_hz_per_px),
        ky_center: n_pe / 2,
        shots,
    })
}

impl ShotPlan {
    pub fn n_shots(&self) -> usize {
        self.shots.len()
    }

    /// Acquisition time of line `ky` relative to the echo center, seconds.
    pub fn line_time(&self, ky: usize) -> Result<f64> {
        if ky >= self.dims.n_pe {
            return Err(Error::OutOfRange(format!("ky {ky} outside [0, {})", self.dims.n_pe)));
        }
        Ok(self.line_time_unchecked(ky))
    }

    #[inline]
    pub(crate) fn line_time_unchecked(&self, ky: usize) -> f64 {
        (ky as f64 - self.ky_center as f64) * self.t_line
    }

    #[inline]
    pub fn sampled(&self, shot: usize, ky: usize, kz: usize) -> bool {
        self.shots[shot].mask[ky + self.dims.n_pe * kz]
    }

    pub fn shots_with(&self, polarity: Polarity) -> Vec<usize> {
        (0..self.shots.len()).filter(|&t| self.shots[t].polarity == polarity).collect()
    }

    pub fn samples_per_shot(&self) -> usize {
        (self.dims.n_pe / self.r_inplane) * (self.dims.n_z / self.r_z)
    }

    /// Masks as a volume of 0/1 planes over (ky, kz), one per (shot, echo).
    /// The grid is `[1, n_pe, n_z]`.
    pub fn mask_volume(&self, n_echoes: usize) -> VolumeSet {
        let dims = GridDims { n_fe: 1, n_pe: self.dims.n_pe, n_z: self.dims.n_z };
        let mut v = VolumeSet::zeros(dims, 1, self.n_shots(), n_echoes, Space::Kspace);
        for n in 0..n_echoes {
            for (t, s) in self.shots.iter().enumerate() {
                for (dst, &m) in v.block_mut(0, t, n).iter_mut().zip(&s.mask) {
                    *dst = C64::new(if m { 1.0 } else { 0.0 }, 0.0);
                }
            }
        }
        v
    }
}
