//! Grid-to-grid resampling with a separable Catmull-Rom cubic kernel or
//! nearest-neighbor lookup. Used for isotropic resampling of CT volumes and
//! labels and for resizing samples to the network resolution.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Cubic,
    Nearest,
}

/// Catmull-Rom weights for the four taps `floor(p)-1 ..= floor(p)+2`.
#[inline]
pub fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Output grid with the given dims and spacing whose center coincides with `src`'s.
fn concentric(src: &Grid, dims: [usize; 3], spacing: [f64; 3]) -> Result<Grid> {
    let origin = core::array::from_fn(|a| {
        src.origin[a]
            + ((src.dims[a] as f64 - 1.0) * src.spacing[a] - (dims[a] as f64 - 1.0) * spacing[a]) * 0.5
    });
    Grid::new(dims, spacing, origin)
}

/// Target grid for an isotropic spacing: extents preserved to within one voxel.
pub fn isotropic_grid(src: &Grid, spacing: f64) -> Result<Grid> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::invalid("resample_isotropic", "target spacing must be positive"));
    }
    let mut dims = [0; 3];
    let mut sp = [spacing; 3];
    for a in 0..3 {
        if src.spacing[a] == spacing {
            dims[a] = src.dims[a];
            sp[a] = src.spacing[a];
        } else {
            dims[a] = libm::round(src.dims[a] as f64 * src.spacing[a] / spacing).max(1.0) as usize;
        }
    }
    concentric(src, dims, sp)
}

/// Target grid covering the same physical extent with new dims.
pub fn resized_grid(src: &Grid, dims: [usize; 3]) -> Result<Grid> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid("resize", "dims must be positive"));
    }
    let spacing = core::array::from_fn(|a| {
        if dims[a] == src.dims[a] {
            src.spacing[a]
        } else {
            src.dims[a] as f64 * src.spacing[a] / dims[a] as f64
        }
    });
    concentric(src, dims, spacing)
}

/// Samples `data` (laid out on `src`) at every voxel of `dst`.
///
/// Taps falling outside the source grid are clamped to the border.
pub fn resample_grid(data: &[f32], src: &Grid, dst: &Grid, interp: Interp) -> Vec<f32> {
    // Source index along each axis: offset + j * ratio.
    let offset: [f64; 3] = core::array::from_fn(|a| (dst.origin[a] - src.origin[a]) / src.spacing[a]);
    let ratio: [f64; 3] = core::array::from_fn(|a| dst.spacing[a] / src.spacing[a]);
    let pos = |a: usize, j: usize| offset[a] + j as f64 * ratio[a];
    match interp {
        Interp::Nearest => {
            let map: [Vec<usize>; 3] = core::array::from_fn(|a| {
                (0..dst.dims[a])
                    .map(|j| {
                        let p = libm::floor(pos(a, j) + 0.5);
                        p.clamp(0.0, src.dims[a] as f64 - 1.0) as usize
                    })
                    .collect()
            });
            let mut out = Vec::with_capacity(dst.len());
            for &z in &map[2] {
                for &y in &map[1] {
                    for &x in &map[0] {
                        out.push(data[src.index(x, y, z)]);
                    }
                }
            }
            out
        }
        Interp::Cubic => {
            let taps: [Vec<([usize; 4], [f64; 4])>; 3] = core::array::from_fn(|a| {
                let n = src.dims[a] as i64;
                (0..dst.dims[a])
                    .map(|j| {
                        let p = pos(a, j);
                        let f = libm::floor(p);
                        let w = catmull_rom(p - f);
                        let idx = core::array::from_fn(|k| (f as i64 - 1 + k as i64).clamp(0, n - 1) as usize);
                        (idx, w)
                    })
                    .collect()
            });
            let [sx, sy, sz] = src.dims;
            let [dx, dy, dz] = dst.dims;
            // x pass: [sz][sy][dx]
            let mut bx = vec![0.0f64; sz * sy * dx];
            for row in 0..sz * sy {
                let src_row = &data[row * sx..(row + 1) * sx];
                for (x, (idx, w)) in taps[0].iter().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        acc += w[k] * src_row[idx[k]] as f64;
                    }
                    bx[row * dx + x] = acc;
                }
            }
            // y pass: [sz][dy][dx]
            let mut by = vec![0.0f64; sz * dy * dx];
            for z in 0..sz {
                for (y, (idx, w)) in taps[1].iter().enumerate() {
                    let dst_row = &mut by[(z * dy + y) * dx..(z * dy + y + 1) * dx];
                    for k in 0..4 {
                        let src_row = &bx[(z * sy + idx[k]) * dx..(z * sy + idx[k] + 1) * dx];
                        for (o, &s) in dst_row.iter_mut().zip(src_row) {
                            *o += w[k] * s;
                        }
                    }
                }
            }
            // z pass
            let plane = dy * dx;
            let mut out = vec![0.0f64; dz * plane];
            for (z, (idx, w)) in taps[2].iter().enumerate() {
                let dst_plane = &mut out[z * plane..(z + 1) * plane];
                for k in 0..4 {
                    let src_plane = &by[idx[k] * plane..(idx[k] + 1) * plane];
                    for (o, &s) in dst_plane.iter_mut().zip(src_plane) {
                        *o += w[k] * s;
                    }
                }
            }
            out.into_iter().map(|v| v as f32).collect()
        }
    }
}

pub fn resample_isotropic(vol: &Volume, spacing: f64, interp: Interp) -> Result<Volume> {
    let dst = isotropic_grid(&vol.grid, spacing)?;
    Volume::new(dst, resample_grid(&vol.data, &vol.grid, &dst, interp))
}

/// Nearest-neighbor isotropic resampling of a label volume.
pub fn resample_mask_isotropic(mask: &Mask, spacing: f64) -> Result<Mask> {
    let dst = isotropic_grid(&mask.grid, spacing)?;
    Ok(Mask {
        grid: dst,
        data: nearest_labels(&mask.data, &mask.grid, &dst),
    })
}

pub fn resize_volume(vol: &Volume, dims: [usize; 3], interp: Interp) -> Result<Volume> {
    let dst = resized_grid(&vol.grid, dims)?;
    Volume::new(dst, resample_grid(&vol.data, &vol.grid, &dst, interp))
}

pub fn resize_mask(mask: &Mask, dims: [usize; 3]) -> Result<Mask> {
    let dst = resized_grid(&mask.grid, dims)?;
    Ok(Mask {
        grid: dst,
        data: nearest_labels(&mask.data, &mask.grid, &dst),
    })
}

fn nearest_labels(data: &[u8], src: &Grid, dst: &Grid) -> Vec<u8> {
    let as_f: Vec<f32> = data.iter().map(|&v| v as f32).collect();
    resample_grid(&as_f, src, dst, Interp::Nearest)
        .into_iter()
        .map(|v| v as u8)
        .collect()
}
