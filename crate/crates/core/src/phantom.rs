//! Deterministic thorax-like 4D phantom with analytic breathing motion.
//!
//! The anatomy is a union of simple primitives (elliptic body cylinder, two
//! lung ellipsoids, spine, rib bands, a spherical tumor and a few seeded
//! vessel blobs). Motion is the sum of three smooth shear-like modes, so the
//! phase fields span a rank-3 space:
//!
//! * superior–inferior drift plus a mild radial compression, both scaled by
//!   `sin(pi * i / (P - 1))`,
//! * an anterior–posterior hysteresis term scaled by `sin(2 pi i / (P - 1))`,
//! * a left–right sway scaled by `sin(3 pi i / (P - 1))`.
//!
//! All modes fade to zero between 65% and 100% of the body radius.

use alloc::vec::Vec;

use num_traits::Euclid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Volume};
use crate::motion::{warp_mask, warp_volume, DisplacementField};
use crate::par::for_each_chunk;

pub const PHASE_COUNT: usize = 10;

pub const BODY_INTENSITY: f32 = 0.3;
pub const LUNG_INTENSITY: f32 = 0.05;
pub const BONE_INTENSITY: f32 = 0.9;
pub const TUMOR_INTENSITY: f32 = 0.45;
pub const VESSEL_INTENSITY: f32 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Semi-axes (x, y) of the elliptic body cylinder, mm.
    pub body_axes: [f64; 2],
    /// Center of the right lung; the left lung mirrors it in x.
    pub lung_center: [f64; 3],
    pub lung_axes: [f64; 3],
    /// Spine cylinder center (x, y) and radius, mm.
    pub spine_center: [f64; 2],
    pub spine_radius: f64,
    /// Ribs: elliptic shell between these fractions of the body radius.
    pub rib_shell: [f64; 2],
    pub rib_period: f64,
    pub rib_thickness: f64,
    pub tumor_center: [f64; 3],
    pub tumor_radius: f64,
    pub vessel_count: usize,
    /// Peak superior–inferior displacement, mm.
    pub breathing_amplitude: f64,
    /// Peak radial compression (dimensionless strain).
    pub compression: f64,
    pub hysteresis_amplitude: f64,
    pub lateral_amplitude: f64,
    pub phase_count: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            body_axes: [30.0, 22.0],
            lung_center: [12.0, -2.0, 4.0],
            lung_axes: [9.0, 12.0, 18.0],
            spine_center: [0.0, -15.0],
            spine_radius: 4.5,
            rib_shell: [0.86, 0.94],
            rib_period: 8.0,
            rib_thickness: 2.5,
            tumor_center: [12.0, -2.0, 8.0],
            tumor_radius: 6.0,
            vessel_count: 6,
            breathing_amplitude: 10.0,
            compression: 0.003,
            hysteresis_amplitude: 2.0,
            lateral_amplitude: 1.5,
            phase_count: PHASE_COUNT,
            seed: 7,
        }
    }
}

/// Reference volume, tumor label, per-phase images and the fields that produce them.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub reference: Volume,
    pub reference_mask: Mask,
    pub lung_mask: Mask,
    pub phases: Vec<(Volume, Mask)>,
    pub dvfs: Vec<DisplacementField>,
}

struct Blob {
    center: [f64; 3],
    radius: f64,
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::centered(self.dims, self.spacing)
    }

    fn validate(&self) -> Result<()> {
        if self.phase_count != PHASE_COUNT {
            return Err(Error::invalid(
                "phantom",
                alloc::format!("phase_count must be {PHASE_COUNT}, got {}", self.phase_count),
            ));
        }
        let positive = self.body_axes.iter().chain(&self.lung_axes).all(|&a| a > 0.0)
            && self.tumor_radius > 0.0
            && self.spine_radius >= 0.0
            && self.rib_period > 0.0;
        if !positive {
            return Err(Error::invalid("phantom", "primitive sizes must be positive"));
        }
        if !(self.breathing_amplitude >= 0.0 && self.compression >= 0.0) {
            return Err(Error::invalid("phantom", "motion amplitudes must be non-negative"));
        }
        Ok(())
    }

    fn in_lung(&self, p: [f64; 3]) -> bool {
        let c = self.lung_center;
        let a = self.lung_axes;
        [c[0], -c[0]].iter().any(|&cx| {
            let d = [(p[0] - cx) / a[0], (p[1] - c[1]) / a[1], (p[2] - c[2]) / a[2]];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0
        })
    }

    fn in_tumor(&self, p: [f64; 3]) -> bool {
        dist2(p, self.tumor_center) <= self.tumor_radius * self.tumor_radius
    }

    fn body_radius(&self, x: f64, y: f64) -> f64 {
        let (u, v) = (x / self.body_axes[0], y / self.body_axes[1]);
        libm::sqrt(u * u + v * v)
    }

    fn tissue(&self, p: [f64; 3], vessels: &[Blob]) -> f32 {
        let [x, y, z] = p;
        let r = self.body_radius(x, y);
        if r > 1.0 {
            return 0.0;
        }
        let spine = libm::hypot(x - self.spine_center[0], y - self.spine_center[1]) <= self.spine_radius;
        let phase = Euclid::rem_euclid(&(z - self.grid_min_z()), &self.rib_period);
        let rib = r >= self.rib_shell[0]
            && r <= self.rib_shell[1]
            && (phase - 0.5 * self.rib_period).abs() <= 0.5 * self.rib_thickness;
        if spine || rib {
            return BONE_INTENSITY;
        }
        if self.in_tumor(p) {
            return TUMOR_INTENSITY;
        }
        if self.in_lung(p) {
            if vessels.iter().any(|v| dist2(p, v.center) <= v.radius * v.radius) {
                return VESSEL_INTENSITY;
            }
            return LUNG_INTENSITY;
        }
        BODY_INTENSITY
    }

    fn grid_min_z(&self) -> f64 {
        -((self.dims[2] as f64) - 1.0) * 0.5 * self.spacing[2]
    }

    /// Seeded vessel blobs inside the lungs, kept clear of the tumor.
    fn vessels(&self) -> Vec<Blob> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = Vec::with_capacity(self.vessel_count);
        let mut attempts = 0;
        while out.len() < self.vessel_count && attempts < 1000 {
            attempts += 1;
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let u: [f64; 3] = core::array::from_fn(|_| rng.random_range(-0.7..0.7));
            let c = self.lung_center;
            let center = [
                side * c[0] + u[0] * self.lung_axes[0],
                c[1] + u[1] * self.lung_axes[1],
                c[2] + u[2] * self.lung_axes[2],
            ];
            let radius = rng.random_range(1.5..2.5);
            let clear = self.tumor_radius + radius + 3.0;
            if dist2(center, self.tumor_center) > clear * clear && self.in_lung(center) {
                out.push(Blob { center, radius });
            }
        }
        out
    }

    /// Mode amplitudes of phase `i`.
    pub fn phase_weights(&self, i: usize) -> [f64; 3] {
        let t = core::f64::consts::PI * i as f64 / (self.phase_count as f64 - 1.0);
        [libm::sin(t), libm::sin(2.0 * t), libm::sin(3.0 * t)]
    }

    /// Analytic displacement (pull convention) at world point `p`.
    pub fn displacement(&self, p: [f64; 3], weights: [f64; 3]) -> [f64; 3] {
        let [x, y, _] = p;
        let [a, b, c] = weights;
        let w = fade(self.body_radius(x, y));
        let wx = fade((x / self.body_axes[0]).abs());
        let wy = fade((y / self.body_axes[1]).abs());
        let k = self.compression * a * w;
        [
            k * x + self.lateral_amplitude * c * wy,
            k * y + self.hysteresis_amplitude * b * wx,
            self.breathing_amplitude * a * w,
        ]
    }

    fn phase_dvf(&self, grid: &Grid, i: usize) -> DisplacementField {
        let weights = self.phase_weights(i);
        let plane = grid.dims[0] * grid.dims[1];
        let mut data = alloc::vec![0.0f32; 3 * grid.len()];
        for_each_chunk(&mut data, 3 * plane, |z, slab| {
            for j in 0..plane {
                let [x, y, _] = grid.coords(z * plane + j);
                let u = self.displacement(grid.world(x, y, z), weights);
                for a in 0..3 {
                    slab[3 * j + a] = u[a] as f32;
                }
            }
        });
        DisplacementField { grid: *grid, data }
    }
}

/// 1 inside 65% of the normalized radius, smoothly 0 at and beyond 100%.
fn fade(r: f64) -> f64 {
    const INNER: f64 = 0.65;
    if r <= INNER {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        let t = (r - INNER) / (1.0 - INNER);
        1.0 - t * t * (3.0 - 2.0 * t)
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = spec.grid()?;
    let vessels = spec.vessels();
    let plane = grid.dims[0] * grid.dims[1];
    let mut vol = alloc::vec![0.0f32; grid.len()];
    let mut tumor = alloc::vec![0u8; grid.len()];
    let mut lung = alloc::vec![0u8; grid.len()];
    for_each_chunk(&mut vol, plane, |z, slab| {
        for (j, v) in slab.iter_mut().enumerate() {
            let [x, y, _] = grid.coords(z * plane + j);
            *v = spec.tissue(grid.world(x, y, z), &vessels);
        }
    });
    for i in 0..grid.len() {
        let [x, y, z] = grid.coords(i);
        let p = grid.world(x, y, z);
        tumor[i] = spec.in_tumor(p) as u8;
        lung[i] = spec.in_lung(p) as u8;
    }
    let reference = Volume::new(grid, vol)?;
    let reference_mask = Mask::new(grid, tumor)?;
    let lung_mask = Mask::new(grid, lung)?;

    let mut phases = Vec::with_capacity(spec.phase_count);
    let mut dvfs = Vec::with_capacity(spec.phase_count);
    for i in 0..spec.phase_count {
        let dvf = spec.phase_dvf(&grid, i);
        let v = warp_volume(&reference, &dvf)?;
        let m = warp_mask(&reference_mask, &dvf)?;
        let l = warp_mask(&lung_mask, &dvf)?;
        if m.count() == 0 || !m.is_subset_of(&l) {
            return Err(Error::TumorOutsideLung { phase: i });
        }
        phases.push((v, m));
        dvfs.push(dvf);
    }
    Ok(Phantom {
        reference,
        reference_mask,
        lung_mask,
        phases,
        dvfs,
    })
}
