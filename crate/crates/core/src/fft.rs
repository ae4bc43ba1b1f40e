//! Centered, orthonormal DFTs.
//!
//! Index `floor(N/2)` is the zero frequency on both sides of the transform:
//! `X[k] = N^-1/2 * sum_y x[y] exp(-2 pi i (k - c)(y - c) / N)`, `c = floor(N/2)`.

use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::exec;
use crate::volumes::{GridDims, Space, VolumeSet, C64, ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// 1D centered transform of a fixed length.
#[derive(Clone)]
pub struct CenteredFft1 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl CenteredFft1 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        CenteredFft1 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            scale: 1.0 / (n as f64).sqrt(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn scratch_len(&self) -> usize {
        self.n + self.fwd.get_inplace_scratch_len().max(self.inv.get_inplace_scratch_len())
    }

    /// Transforms `buf` in place. `scratch` must hold at least `scratch_len()` samples.
    pub fn process(&self, buf: &mut [C64], dir: Direction, scratch: &mut [C64]) {
        let n = self.n;
        if n == 1 {
            return;
        }
        let c = n / 2;
        let (tmp, fft_scratch) = scratch.split_at_mut(n);
        // ifftshift: tmp[i] = buf[(i + c) % n]
        tmp[..n - c].copy_from_slice(&buf[c..]);
        tmp[n - c..].copy_from_slice(&buf[..c]);
        let plan = match dir {
            Direction::Forward => &self.fwd,
            Direction::Inverse => &self.inv,
        };
        plan.process_with_scratch(tmp, fft_scratch);
        // fftshift: buf[k] = tmp[(k + n - c) % n]
        let s = self.scale;
        for (k, out) in buf.iter_mut().enumerate() {
            *out = tmp[(k + n - c) % n] * s;
        }
    }
}

/// Separable centered transform over a 3D grid (x fastest).
#[derive(Clone)]
pub struct CenteredFft3 {
    dims: GridDims,
    fx: CenteredFft1,
    fy: CenteredFft1,
    fz: CenteredFft1,
}

impl CenteredFft3 {
    pub fn new(dims: GridDims) -> Self {
        CenteredFft3 {
            dims,
            fx: CenteredFft1::new(dims.n_fe),
            fy: CenteredFft1::new(dims.n_pe),
            fz: CenteredFft1::new(dims.n_z),
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn process(&self, data: &mut [C64], dir: Direction) {
        let GridDims { n_fe: nx, n_pe: ny, n_z: nz } = self.dims;
        debug_assert_eq!(data.len(), nx * ny * nz);
        let scratch_len = self.fx.scratch_len().max(self.fy.scratch_len()).max(self.fz.scratch_len());
        let mut scratch = vec![ZERO; scratch_len];
        if nx > 1 {
            for line in data.chunks_exact_mut(nx) {
                self.fx.process(line, dir, &mut scratch);
            }
        }
        if ny > 1 {
            let mut buf = vec![ZERO; ny];
            for z in 0..nz {
                for x in 0..nx {
                    let base = x + nx * ny * z;
                    for (y, b) in buf.iter_mut().enumerate() {
                        *b = data[base + nx * y];
                    }
                    self.fy.process(&mut buf, dir, &mut scratch);
                    for (y, b) in buf.iter().enumerate() {
                        data[base + nx * y] = *b;
                    }
                }
            }
        }
        if nz > 1 {
            let plane = nx * ny;
            let mut buf = vec![ZERO; nz];
            for p in 0..plane {
                for (z, b) in buf.iter_mut().enumerate() {
                    *b = data[p + plane * z];
                }
                self.fz.process(&mut buf, dir, &mut scratch);
                for (z, b) in buf.iter().enumerate() {
                    data[p + plane * z] = *b;
                }
            }
        }
    }

    /// Applies the transform to every consecutive 3D block of `data`.
    pub fn process_blocks(&self, data: &mut [C64], dir: Direction) {
        exec::for_each_chunk_mut(data, self.dims.len(), |_, block| self.process(block, dir));
    }
}

/// Centered orthonormal 3D DFT applied independently per (coil, shot, echo).
pub fn fft3_centered(v: &VolumeSet, dir: Direction) -> Result<VolumeSet> {
    let (want, out_space) = match dir {
        Direction::Forward => (Space::Image, Space::Kspace),
        Direction::Inverse => (Space::Kspace, Space::Image),
    };
    if v.space != want {
        return Err(Error::SpaceMismatch { expected: want.name(), found: v.space.name() });
    }
    let mut out = v.clone();
    out.space = out_space;
    CenteredFft3::new(v.dims).process_blocks(&mut out.data, dir);
    Ok(out)
}
