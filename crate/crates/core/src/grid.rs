//! Regular 3D grids with physical spacing: CT-like volumes and binary masks.
//!
//! Voxels are stored z-major: `index = (z * ny + y) * nx + x`. Axis x runs
//! left-right, y anterior-posterior and z superior-inferior. The world
//! position of voxel `(x, y, z)` is `origin + index * spacing` (mm).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("grid", format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("grid", format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("grid", format!("origin must be finite, got {origin:?}")));
        }
        Ok(Grid { dims, spacing, origin })
    }

    /// Grid whose geometric center sits at the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = core::array::from_fn(|a| -((dims[a] as f64) - 1.0) * 0.5 * spacing[a]);
        Self::new(dims, spacing, origin)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    #[inline]
    pub fn world(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel index of a world point.
    #[inline]
    pub fn to_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical size of the grid's voxel footprint, `dims * spacing`.
    pub fn extent(&self) -> [f64; 3] {
        core::array::from_fn(|a| self.dims[a] as f64 * self.spacing[a])
    }

    /// World position of the geometric center.
    pub fn center(&self) -> [f64; 3] {
        core::array::from_fn(|a| self.origin[a] + (self.dims[a] as f64 - 1.0) * 0.5 * self.spacing[a])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!(
                "{what}: dims {:?} spacing {:?} origin {:?} vs dims {:?} spacing {:?} origin {:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )));
        }
        Ok(())
    }
}

/// Scalar volume (CT-like intensities).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(
                "volume",
                format!("grid {:?} needs {} voxels, got {}", grid.dims, grid.len(), data.len()),
            ));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        Volume {
            data: vec![value; grid.len()],
            grid,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Trilinear sample at a continuous voxel index; neighbors outside the
    /// grid are clamped to the border.
    #[inline]
    pub fn sample_clamped(&self, idx: [f64; 3]) -> f64 {
        trilinear(&self.data, self.grid.dims, idx, Border::Clamp)
    }

    /// Trilinear sample treating everything outside the grid as zero.
    #[inline]
    pub fn sample_zero(&self, idx: [f64; 3]) -> f64 {
        trilinear(&self.data, self.grid.dims, idx, Border::Zero)
    }
}

/// Binary label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub grid: Grid,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(
                "mask",
                format!("grid {:?} needs {} voxels, got {}", grid.dims, grid.len(), data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid("mask", format!("label {v} is not binary")));
        }
        Ok(Mask { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        Mask {
            data: vec![0; grid.len()],
            grid,
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Physical volume of the labeled region in mm³.
    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.grid.voxel_volume()
    }

    /// Spacing-weighted centroid of labeled voxels in world mm.
    pub fn centroid_mm(&self) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0 {
                let [x, y, z] = self.grid.coords(i);
                let w = self.grid.world(x, y, z);
                for a in 0..3 {
                    acc[a] += w[a];
                }
                n += 1;
            }
        }
        (n > 0).then(|| acc.map(|a| a / n as f64))
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// `true` when every labeled voxel of `self` is labeled in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a == 0 || b != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Border {
    Clamp,
    Zero,
}

#[inline]
pub(crate) fn trilinear(data: &[f32], dims: [usize; 3], idx: [f64; 3], border: Border) -> f64 {
    let [nx, ny, nz] = dims;
    let fetch = |x: i64, y: i64, z: i64| -> f64 {
        match border {
            Border::Clamp => {
                let x = x.clamp(0, nx as i64 - 1) as usize;
                let y = y.clamp(0, ny as i64 - 1) as usize;
                let z = z.clamp(0, nz as i64 - 1) as usize;
                data[(z * ny + y) * nx + x] as f64
            }
            Border::Zero => {
                if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                    0.0
                } else {
                    data[(z as usize * ny + y as usize) * nx + x as usize] as f64
                }
            }
        }
    };
    let fx = libm::floor(idx[0]);
    let fy = libm::floor(idx[1]);
    let fz = libm::floor(idx[2]);
    let (tx, ty, tz) = (idx[0] - fx, idx[1] - fy, idx[2] - fz);
    let (x0, y0, z0) = (fx as i64, fy as i64, fz as i64);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(fetch(x0, y0, z0), fetch(x0 + 1, y0, z0), tx);
    let c10 = lerp(fetch(x0, y0 + 1, z0), fetch(x0 + 1, y0 + 1, z0), tx);
    let c01 = lerp(fetch(x0, y0, z0 + 1), fetch(x0 + 1, y0, z0 + 1), tx);
    let c11 = lerp(fetch(x0, y0 + 1, z0 + 1), fetch(x0 + 1, y0 + 1, z0 + 1), tx);
    lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
}
