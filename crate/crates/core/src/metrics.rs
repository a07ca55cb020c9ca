//! Reconstruction and segmentation metrics and the per-split evaluation suite.
//!
//! Intensity metrics assume volumes normalized to [0, 1]; PSNR uses a fixed
//! peak of 1.0 and reports `f64::INFINITY` for identical volumes. COMD is
//! `None` when either mask is empty.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Volume};
use crate::network::ModelState;
use crate::par::map_range;
use crate::sample::{Sample, SampleSource};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn pairs<'a>(pred: &'a Volume, target: &'a Volume, op: &str) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    pred.grid.ensure_same(&target.grid, op)?;
    Ok(pred.data.iter().zip(&target.data).map(|(&a, &b)| (a as f64, b as f64)))
}

pub fn mae(pred: &Volume, target: &Volume) -> Result<f64> {
    let s: f64 = pairs(pred, target, "mae")?.map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.data.len() as f64)
}

pub fn mse(pred: &Volume, target: &Volume) -> Result<f64> {
    let s: f64 = pairs(pred, target, "mse")?.map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.data.len() as f64)
}

pub fn rmse(pred: &Volume, target: &Volume) -> Result<f64> {
    Ok(libm::sqrt(mse(pred, target)?))
}

/// `10 log10(1 / mse)`; infinite when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(1.0 / mse)
    }
}

pub fn psnr(pred: &Volume, target: &Volume) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?))
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = core::array::from_fn(|i| {
        let d = i as f64 - c;
        libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering along one axis of a `dims` block.
fn filter_axis(data: &[f64], dims: [usize; 3], axis: usize, w: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = w.len();
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - k;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let base = (z * dims[1] + y) * dims[0] + x;
                let mut acc = 0.0;
                for (t, &wt) in w.iter().enumerate() {
                    acc += wt * data[base + t * stride];
                }
                out.push(acc);
            }
        }
    }
    (out, out_dims)
}

fn gaussian_filter(data: &[f64], dims: [usize; 3], w: &[f64]) -> Vec<f64> {
    let (a, d) = filter_axis(data, dims, 0, w);
    let (b, d) = filter_axis(&a, d, 1, w);
    filter_axis(&b, d, 2, w).0
}

/// Volumetric SSIM with an 11³ Gaussian window (σ = 1.5), averaged over
/// all window positions fully inside the volume.
pub fn ssim(pred: &Volume, target: &Volume) -> Result<f64> {
    pred.grid.ensure_same(&target.grid, "ssim")?;
    let dims = pred.grid.dims;
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::invalid(
            "ssim",
            alloc::format!("volume {dims:?} is smaller than the {SSIM_WINDOW}^3 window"),
        ));
    }
    let w = gaussian_window();
    let x: Vec<f64> = pred.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.data.iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = gaussian_filter(&x, dims, &w);
    let my = gaussian_filter(&y, dims, &w);
    let mxx = gaussian_filter(&prod(&x, &x), dims, &w);
    let myy = gaussian_filter(&prod(&y, &y), dims, &w);
    let mxy = gaussian_filter(&prod(&x, &y), dims, &w);
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
            / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(acc / mx.len() as f64)
}

/// `2|A∩B| / (|A|+|B|)`, 1.0 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.grid.ensure_same(&b.grid, "dice")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.data.iter().zip(&b.data) {
        na += (p != 0) as usize;
        nb += (q != 0) as usize;
        inter += (p != 0 && q != 0) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Centroid distance in mm; `None` when either mask is empty.
pub fn comd(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    a.grid.ensure_same(&b.grid, "comd")?;
    Ok(match (a.centroid_mm(), b.centroid_mm()) {
        (Some(p), Some(q)) => Some(libm::sqrt((0..3).map(|i| (p[i] - q[i]) * (p[i] - q[i])).sum())),
        _ => None,
    })
}

/// Tumor wherever channel 0 strictly exceeds channel 1.
pub fn binarize_seg(probs: &Tensor<f32>, grid: Grid) -> Result<Mask> {
    let n = grid.len();
    if probs.shape().first() != Some(&2) || probs.numel() != 2 * n {
        return Err(Error::invalid(
            "binarize_seg",
            alloc::format!("expected [2, {:?}] probabilities, got {:?}", grid.dims, probs.shape()),
        ));
    }
    let d = probs.data();
    Mask::new(grid, (0..n).map(|i| (d[i] > d[n + i]) as u8).collect())
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample_id: String,
    pub tag: String,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// `None` when the model has no segmentation output.
    pub dice: Option<f64>,
    /// `None` without segmentation output or when a mask is empty.
    pub comd_mm: Option<f64>,
}

/// Mean and sample standard deviation over the defined values of one column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stat> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            libm::sqrt(v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
        } else {
            0.0
        };
        Some(Stat {
            mean,
            std,
            count: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mae: Option<Stat>,
    pub mse: Option<Stat>,
    pub rmse: Option<Stat>,
    pub psnr_db: Option<Stat>,
    pub ssim: Option<Stat>,
    pub dice: Option<Stat>,
    pub comd_mm: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub tag: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn aggregate(&self) -> Aggregate {
        let col = |f: &dyn Fn(&EvalRow) -> Option<f64>| Stat::of(self.rows.iter().filter_map(f));
        Aggregate {
            mae: col(&|r| Some(r.mae)),
            mse: col(&|r| Some(r.mse)),
            rmse: col(&|r| Some(r.rmse)),
            psnr_db: col(&|r| Some(r.psnr_db)),
            ssim: col(&|r| Some(r.ssim)),
            dice: col(&|r| r.dice),
            comd_mm: col(&|r| r.comd_mm),
        }
    }
}

/// Anything that maps a sample's projection to a volume and optional mask.
pub trait Predictor {
    fn predict(&self, sample: &Sample) -> Result<(Volume, Option<Mask>)>;
}

impl Predictor for ModelState<f32> {
    fn predict(&self, sample: &Sample) -> Result<(Volume, Option<Mask>)> {
        let grid = sample.volume.grid;
        let out = ModelState::predict(self, &sample.projection.pixels)?;
        let vol = Volume::new(grid, out.recon.into_data())?;
        let mask = out.seg.map(|s| binarize_seg(&s, grid)).transpose()?;
        Ok((vol, mask))
    }
}

/// All metrics for one sample.
pub fn evaluate_sample<P: Predictor + ?Sized>(model: &P, sample: &Sample, tag: &str) -> Result<EvalRow> {
    let (vol, mask) = model.predict(sample)?;
    let m = mse(&vol, &sample.volume)?;
    let (dice_v, comd_v) = match &mask {
        Some(mk) => (Some(dice(mk, &sample.mask)?), comd(mk, &sample.mask)?),
        None => (None, None),
    };
    Ok(EvalRow {
        sample_id: sample.id.clone(),
        tag: tag.into(),
        mae: mae(&vol, &sample.volume)?,
        mse: m,
        rmse: libm::sqrt(m),
        psnr_db: psnr_from_mse(m),
        ssim: ssim(&vol, &sample.volume)?,
        dice: dice_v,
        comd_mm: comd_v,
    })
}

/// Evaluates every sample of `source`, in index order.
pub fn evaluate_suite<P, S>(model: &P, source: &S, tag: &str) -> Result<EvalReport>
where
    P: Predictor + Sync + ?Sized,
    S: SampleSource + Sync + ?Sized,
{
    if source.is_empty() {
        return Err(Error::Source("cannot evaluate an empty split".into()));
    }
    let rows = map_range(source.len(), |i| evaluate_sample(model, &source.sample(i)?, tag));
    Ok(EvalReport {
        tag: tag.into(),
        rows: rows.into_iter().collect::<Result<Vec<_>>>()?,
    })
}
