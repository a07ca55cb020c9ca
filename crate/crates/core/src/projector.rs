//! Digitally reconstructed radiographs by ray marching, plus the
//! normalization and noise steps applied to projections.
//!
//! The gantry rotates about the z (superior–inferior) axis. At angle θ the
//! central ray travels along `(cos θ, sin θ, 0)`, so 0° is lateral and 90°
//! anterior–posterior. The detector u axis is `(-sin θ, cos θ, 0)` and its v
//! axis is z; pixel `(j, k)` sits at `u = (j - (nu-1)/2) du`,
//! `v = (k - (nv-1)/2) dv`.
//!
//! The volume's support is its voxel footprint: rays are clipped to the
//! box spanned by the outer voxel faces, and inside it intensities are
//! trilinear with border clamping.

use alloc::vec::Vec;

use num_traits::Euclid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid, Volume};
use crate::par::for_each_chunk;

pub const DEFAULT_SAD: f64 = 1000.0;
pub const DEFAULT_SDD: f64 = 1500.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beam {
    Parallel,
    /// Source-to-axis and source-to-detector distances, mm.
    Cone { sad: f64, sdd: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub angle_deg: f64,
    pub beam: Beam,
    /// Detector pixels (u, v).
    pub pixels: [usize; 2],
    /// Detector pixel pitch (u, v), mm.
    pub pitch: [f64; 2],
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if !self.angle_deg.is_finite() {
            return Err(Error::invalid("geometry", "angle must be finite"));
        }
        if self.pixels.iter().any(|&n| n == 0) || self.pitch.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::invalid("geometry", "detector pixels and pitch must be positive"));
        }
        if let Beam::Cone { sad, sdd } = self.beam {
            if !(sad > 0.0 && sdd > sad && sdd.is_finite()) {
                return Err(Error::invalid(
                    "geometry",
                    alloc::format!("cone beam needs 0 < SAD < SDD, got SAD {sad} SDD {sdd}"),
                ));
            }
        }
        Ok(())
    }

    /// Angle wrapped into [0, 360).
    pub fn normalized_angle(&self) -> f64 {
        Euclid::rem_euclid(&self.angle_deg, &360.0)
    }

    fn frame(&self) -> Frame {
        let t = self.angle_deg.to_radians();
        let (s, c) = (libm::sin(t), libm::cos(t));
        Frame {
            dir: [c, s, 0.0],
            u: [-s, c, 0.0],
        }
    }

    fn pixel_uv(&self, j: usize, k: usize) -> (f64, f64) {
        (
            (j as f64 - (self.pixels[0] as f64 - 1.0) * 0.5) * self.pitch[0],
            (k as f64 - (self.pixels[1] as f64 - 1.0) * 0.5) * self.pitch[1],
        )
    }

    /// Detector coordinates of a world point, if it lies in front of the source.
    fn project_point(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let f = self.frame();
        let along = dot(p, f.dir);
        let u = dot(p, f.u);
        match self.beam {
            Beam::Parallel => Some((u, p[2])),
            Beam::Cone { sad, sdd } => {
                let depth = sad + along;
                (depth > 0.0).then(|| (u * sdd / depth, p[2] * sdd / depth))
            }
        }
    }

    /// Rejects geometries whose detector misses part of the volume's footprint.
    pub fn check_coverage(&self, grid: &Grid) -> Result<()> {
        self.validate()?;
        let (lo, hi) = footprint(grid);
        let half = [
            0.5 * self.pixels[0] as f64 * self.pitch[0],
            0.5 * self.pixels[1] as f64 * self.pitch[1],
        ];
        for corner in 0..8 {
            let p = core::array::from_fn(|a| if corner >> a & 1 == 0 { lo[a] } else { hi[a] });
            let Some((u, v)) = self.project_point(p) else {
                return Err(Error::invalid("render_drr", "volume extends behind the source"));
            };
            let tol = 1e-9 * (1.0 + half[0].max(half[1]));
            if u.abs() > half[0] + tol || v.abs() > half[1] + tol {
                return Err(Error::invalid(
                    "render_drr",
                    alloc::format!(
                        "detector {:?} px at {:?} mm does not cover the projected volume corner ({u:.2}, {v:.2}) mm",
                        self.pixels, self.pitch
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Square-pixel detector that covers `grid` at every gantry angle.
    pub fn covering(grid: &Grid, angle_deg: f64, beam: Beam, pixels: [usize; 2]) -> Result<Geometry> {
        let (lo, hi) = footprint(grid);
        let r = (0..4)
            .map(|c| {
                let x = if c & 1 == 0 { lo[0] } else { hi[0] };
                let y = if c & 2 == 0 { lo[1] } else { hi[1] };
                libm::hypot(x, y)
            })
            .fold(0.0, f64::max);
        let zmax = lo[2].abs().max(hi[2].abs());
        let mag = match beam {
            Beam::Parallel => 1.0,
            Beam::Cone { sad, sdd } => {
                if sad <= r {
                    return Err(Error::invalid("geometry", "source lies inside the volume"));
                }
                sdd / (sad - r)
            }
        };
        let pitch = [2.0 * r * mag / pixels[0] as f64, 2.0 * zmax * mag / pixels[1] as f64];
        let geom = Geometry {
            angle_deg,
            beam,
            pixels,
            pitch: [pitch[0] * (1.0 + 1e-9), pitch[1] * (1.0 + 1e-9)],
        };
        geom.validate()?;
        Ok(geom)
    }
}

struct Frame {
    dir: [f64; 3],
    u: [f64; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// World-space box spanned by the outer voxel faces.
fn footprint(grid: &Grid) -> ([f64; 3], [f64; 3]) {
    let lo = core::array::from_fn(|a| grid.origin[a] - 0.5 * grid.spacing[a]);
    let hi = core::array::from_fn(|a| grid.origin[a] + (grid.dims[a] as f64 - 0.5) * grid.spacing[a]);
    (lo, hi)
}

/// 2D image; row-major with v as the slow axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub geometry: Geometry,
    pub pixels: Vec<f32>,
}

impl Projection {
    pub fn new(geometry: Geometry, pixels: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        let n = geometry.pixels[0] * geometry.pixels[1];
        if pixels.len() != n {
            return Err(Error::invalid(
                "projection",
                alloc::format!("detector {:?} needs {n} pixels, got {}", geometry.pixels, pixels.len()),
            ));
        }
        Ok(Projection { geometry, pixels })
    }

    pub fn width(&self) -> usize {
        self.geometry.pixels[0]
    }

    pub fn height(&self) -> usize {
        self.geometry.pixels[1]
    }

    #[inline]
    pub fn at(&self, j: usize, k: usize) -> f32 {
        self.pixels[k * self.width() + j]
    }
}

/// Ray entry/exit parameters against an axis-aligned box (slab method).
fn clip_ray(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
        } else {
            let ta = (lo[a] - origin[a]) / dir[a];
            let tb = (hi[a] - origin[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    (t1 > t0).then_some((t0, t1))
}

/// Default marching step as a fraction of the smallest voxel spacing.
pub const STEP_FRACTION: f64 = 0.125;

/// Line integral (intensity × mm) through `vol` for every detector pixel.
pub fn render_drr(vol: &Volume, geom: &Geometry) -> Result<Projection> {
    let step = STEP_FRACTION * vol.grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    render_drr_with_step(vol, geom, step)
}

/// As [`render_drr`] with an explicit upper bound on the marching step (mm).
pub fn render_drr_with_step(vol: &Volume, geom: &Geometry, max_step: f64) -> Result<Projection> {
    if !(max_step > 0.0) {
        return Err(Error::invalid("render_drr", "step must be positive"));
    }
    geom.check_coverage(&vol.grid)?;
    let frame = geom.frame();
    let (lo, hi) = footprint(&vol.grid);
    let [nu, nv] = geom.pixels;
    let mut out = alloc::vec![0.0f32; nu * nv];
    for_each_chunk(&mut out, nu, |k, row| {
        for (j, px) in row.iter_mut().enumerate() {
            let (u, v) = geom.pixel_uv(j, k);
            let (origin, dir) = match geom.beam {
                Beam::Parallel => {
                    let o = core::array::from_fn(|a| u * frame.u[a] + if a == 2 { v } else { 0.0 });
                    (o, frame.dir)
                }
                Beam::Cone { sad, sdd } => {
                    let src: [f64; 3] = core::array::from_fn(|a| -sad * frame.dir[a]);
                    let det: [f64; 3] = core::array::from_fn(|a| {
                        (sdd - sad) * frame.dir[a] + u * frame.u[a] + if a == 2 { v } else { 0.0 }
                    });
                    let d: [f64; 3] = core::array::from_fn(|a| det[a] - src[a]);
                    let n = libm::sqrt(dot(d, d));
                    (src, d.map(|c| c / n))
                }
            };
            *px = march(vol, origin, dir, lo, hi, max_step) as f32;
        }
    });
    Projection::new(*geom, out)
}

fn march(vol: &Volume, origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3], max_step: f64) -> f64 {
    let Some((t0, t1)) = clip_ray(origin, dir, lo, hi) else {
        return 0.0;
    };
    let len = t1 - t0;
    let n = libm::ceil(len / max_step).max(1.0) as usize;
    let h = len / n as f64;
    let mut acc = 0.0;
    for m in 0..n {
        let t = t0 + (m as f64 + 0.5) * h;
        let p: [f64; 3] = core::array::from_fn(|a| origin[a] + t * dir[a]);
        acc += vol.sample_clamped(vol.grid.to_index(p));
    }
    acc * h
}

/// Affine map of `[min, max]` onto `[0, 1]`; constant data maps to zeros.
pub fn normalize_unit_slice(data: &mut [f32]) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let span = hi as f64 - lo as f64;
    for v in data.iter_mut() {
        *v = (((*v as f64) - lo as f64) / span) as f32;
    }
}

pub fn normalize_projection(mut proj: Projection) -> Projection {
    normalize_unit_slice(&mut proj.pixels);
    proj
}

pub fn normalize_volume(mut vol: Volume) -> Volume {
    normalize_unit_slice(&mut vol.data);
    vol
}

/// Adds i.i.d. N(0, sigma_ratio²) noise (unit intensity range) and clamps to [0, 1].
pub fn add_gaussian_noise(proj: &Projection, sigma_ratio: f64, seed: u64) -> Result<Projection> {
    if !(sigma_ratio >= 0.0) || !sigma_ratio.is_finite() {
        return Err(Error::invalid("add_gaussian_noise", "sigma ratio must be non-negative"));
    }
    if sigma_ratio == 0.0 {
        return Ok(proj.clone());
    }
    let normal = Normal::new(0.0, sigma_ratio).map_err(|e| Error::invalid("add_gaussian_noise", alloc::format!("{e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = proj
        .pixels
        .iter()
        .map(|&p| (p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Projection::new(proj.geometry, pixels)
}
