use buda_core::volumes::{GridDims, VolumeSet, C64};

/// Row `(ox, oy, oz)` x-fastest; column `(echo, shot, dz, dy, dx)` with dx fastest.
pub fn brute_lift(v: &VolumeSet, m: usize) -> (usize, usize, Vec<C64>) {
    let d = v.dims;
    let (ox, oy, oz) = (d.n_fe - m + 1, d.n_pe - m + 1, d.n_z - m + 1);
    let rows = ox * oy * oz;
    let cols = m * m * m * v.n_shots * v.n_echoes;
    let mut out = vec![C64::new(0.0, 0.0); rows * cols];
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let r = x + ox * (y + oy * z);
                for n in 0..v.n_echoes {
                    for t in 0..v.n_shots {
                        let ch = t + v.n_shots * n;
                        for dz in 0..m {
                            for dy in 0..m {
                                for dx in 0..m {
                                    let c = ch * m * m * m + dx + m * (dy + m * dz);
                                    out[r * cols + c] = v.data[v.offset(x + dx, y + dy, z + dz, 0, t, n)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (rows, cols, out)
}

/// Scatter-add of every entry back to its sample, plus the per-sample counts.
pub fn brute_unlift(h: &[C64], dims: GridDims, m: usize, shots: usize, echoes: usize) -> (Vec<C64>, Vec<usize>) {
    let (ox, oy, oz) = (dims.n_fe - m + 1, dims.n_pe - m + 1, dims.n_z - m + 1);
    let cols = m * m * m * shots * echoes;
    let nv = dims.len();
    let mut sum = vec![C64::new(0.0, 0.0); nv * shots * echoes];
    let mut count = vec![0usize; nv * shots * echoes];
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let r = x + ox * (y + oy * z);
                for ch in 0..shots * echoes {
                    for dz in 0..m {
                        for dy in 0..m {
                            for dx in 0..m {
                                let c = ch * m * m * m + dx + m * (dy + m * dz);
                                let i = ch * nv + dims.index(x + dx, y + dy, z + dz);
                                sum[i] += h[r * cols + c];
                                count[i] += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (sum, count)
}
