//! Displacement fields, the PCA motion model and backward warping.
//!
//! A [`DisplacementField`] is defined on the *output* grid: the warped value
//! at world point `p` is read from the source image at `p + u(p)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{trilinear, Border, Grid, Mask, Volume};
use crate::par::for_each_chunk;

/// Number of principal components of the motion model.
pub const MOTION_COMPONENTS: usize = 3;
/// Widening of the observed coefficient range when sampling new states.
pub const DEFAULT_EXTRAPOLATION: f64 = 1.2;

/// Per-voxel displacement in mm, three interleaved components (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl DisplacementField {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * grid.len() {
            return Err(Error::invalid(
                "displacement_field",
                format!("grid {:?} needs {} values, got {}", grid.dims, 3 * grid.len(), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("displacement_field", "non-finite displacement"));
        }
        Ok(DisplacementField { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        DisplacementField {
            data: vec![0.0; 3 * grid.len()],
            grid,
        }
    }

    #[inline]
    pub fn at(&self, index: usize) -> [f32; 3] {
        [self.data[3 * index], self.data[3 * index + 1], self.data[3 * index + 2]]
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .chunks_exact(3)
            .map(|v| libm::sqrt(v.iter().map(|&c| (c as f64) * (c as f64)).sum()))
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Continuous source index sampled for output voxel `i`.
#[inline]
fn source_index(grid: &Grid, dvf: &DisplacementField, i: usize) -> [f64; 3] {
    let [x, y, z] = grid.coords(i);
    let u = dvf.at(i);
    [
        x as f64 + u[0] as f64 / grid.spacing[0],
        y as f64 + u[1] as f64 / grid.spacing[1],
        z as f64 + u[2] as f64 / grid.spacing[2],
    ]
}

/// Backward warp with trilinear interpolation; out-of-grid reads take the border value.
pub fn warp_volume(vol: &Volume, dvf: &DisplacementField) -> Result<Volume> {
    vol.grid.ensure_same(&dvf.grid, "warp_volume")?;
    let grid = vol.grid;
    let plane = grid.dims[0] * grid.dims[1];
    let mut out = vec![0.0f32; grid.len()];
    for_each_chunk(&mut out, plane, |z, slab| {
        for (j, o) in slab.iter_mut().enumerate() {
            let idx = source_index(&grid, dvf, z * plane + j);
            *o = trilinear(&vol.data, grid.dims, idx, Border::Clamp) as f32;
        }
    });
    Volume::new(grid, out)
}

/// Backward warp with nearest-neighbor lookup; the result stays binary.
pub fn warp_mask(mask: &Mask, dvf: &DisplacementField) -> Result<Mask> {
    mask.grid.ensure_same(&dvf.grid, "warp_mask")?;
    let grid = mask.grid;
    let plane = grid.dims[0] * grid.dims[1];
    let mut out = vec![0u8; grid.len()];
    for_each_chunk(&mut out, plane, |z, slab| {
        for (j, o) in slab.iter_mut().enumerate() {
            let idx = source_index(&grid, dvf, z * plane + j);
            let r: [usize; 3] = core::array::from_fn(|a| {
                libm::floor(idx[a] + 0.5).clamp(0.0, grid.dims[a] as f64 - 1.0) as usize
            });
            *o = mask.data[grid.index(r[0], r[1], r[2])];
        }
    });
    Ok(Mask { grid, data: out })
}

/// Mean field plus `k` orthonormal principal displacement modes.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaMotionModel {
    pub mean: DisplacementField,
    pub components: Vec<DisplacementField>,
    /// Eigenvalues of the centered sample Gram matrix (sums of squares, not
    /// variances), descending.
    pub eigenvalues: Vec<f64>,
    /// Per-component `[min, max]` of the training projections.
    pub coeff_bounds: Vec<[f64; 2]>,
}

/// Fits the rank-`k` PCA model by the snapshot (Gram matrix) method.
pub fn fit_pca(dvfs: &[DisplacementField], k: usize) -> Result<PcaMotionModel> {
    let n = dvfs.len();
    if k == 0 || n < k + 1 {
        return Err(Error::invalid(
            "fit_pca",
            format!("need at least k+1 = {} fields, got {n}", k + 1),
        ));
    }
    let grid = dvfs[0].grid;
    for (i, f) in dvfs.iter().enumerate() {
        grid.ensure_same(&f.grid, &format!("fit_pca field {i}"))?;
    }
    let d = dvfs[0].data.len();
    let mut mean = vec![0.0f64; d];
    for f in dvfs {
        for (m, &v) in mean.iter_mut().zip(&f.data) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = dvfs
        .iter()
        .map(|f| f.data.iter().zip(&mean).map(|(&v, &m)| v as f64 - m).collect())
        .collect();
    let gram = DMatrix::from_fn(n, n, |i, j| dot(&centered[i], &centered[j]));
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > 1e-10 * top && eig.eigenvalues[i] > 0.0)
        .count();
    if k > rank {
        return Err(Error::RankDeficient { requested: k, rank });
    }
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &col in order.iter().take(k) {
        let lambda = eig.eigenvalues[col];
        let scale = 1.0 / libm::sqrt(lambda);
        let mut comp = vec![0.0f64; d];
        for (s, c) in centered.iter().enumerate() {
            let w = eig.eigenvectors[(s, col)] * scale;
            for (o, &v) in comp.iter_mut().zip(c) {
                *o += w * v;
            }
        }
        components.push(DisplacementField {
            grid,
            data: comp.iter().map(|&v| v as f32).collect(),
        });
        eigenvalues.push(lambda);
    }
    let mut model = PcaMotionModel {
        mean: DisplacementField {
            grid,
            data: mean.iter().map(|&v| v as f32).collect(),
        },
        components,
        eigenvalues,
        coeff_bounds: vec![[f64::INFINITY, f64::NEG_INFINITY]; k],
    };
    for f in dvfs {
        let c = model.project(f)?;
        for (b, &v) in model.coeff_bounds.iter_mut().zip(&c) {
            b[0] = b[0].min(v);
            b[1] = b[1].max(v);
        }
    }
    Ok(model)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PcaMotionModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn grid(&self) -> Grid {
        self.mean.grid
    }

    /// Coefficients of `field - mean` along each component.
    pub fn project(&self, field: &DisplacementField) -> Result<Vec<f64>> {
        self.mean.grid.ensure_same(&field.grid, "project")?;
        Ok(self
            .components
            .iter()
            .map(|c| {
                field
                    .data
                    .iter()
                    .zip(&self.mean.data)
                    .zip(&c.data)
                    .map(|((&f, &m), &v)| (f as f64 - m as f64) * v as f64)
                    .sum()
            })
            .collect())
    }

    /// `mean + sum_i coeffs[i] * components[i]`.
    pub fn synthesize(&self, coeffs: &[f64]) -> Result<DisplacementField> {
        if coeffs.len() != self.k() {
            return Err(Error::invalid(
                "synthesize_dvf",
                format!("expected {} coefficients, got {}", self.k(), coeffs.len()),
            ));
        }
        let data = (0..self.mean.data.len())
            .map(|i| {
                let mut v = self.mean.data[i] as f64;
                for (c, comp) in coeffs.iter().zip(&self.components) {
                    v += c * comp.data[i] as f64;
                }
                v as f32
            })
            .collect();
        Ok(DisplacementField {
            grid: self.mean.grid,
            data,
        })
    }

    /// Coefficient ranges widened symmetrically about their midpoints.
    pub fn sampling_bounds(&self, extrapolation: f64) -> Vec<[f64; 2]> {
        self.coeff_bounds
            .iter()
            .map(|&[lo, hi]| {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo) * extrapolation;
                [mid - half, mid + half]
            })
            .collect()
    }

    /// Independent uniform draws over the widened bounds.
    pub fn sample_coeffs_with<R: Rng>(&self, rng: &mut R, extrapolation: f64) -> Vec<f64> {
        self.sampling_bounds(extrapolation)
            .iter()
            .map(|&[lo, hi]| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect()
    }

    pub fn sample_coeffs(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_coeffs_with(&mut rng, DEFAULT_EXTRAPOLATION)
    }
}
