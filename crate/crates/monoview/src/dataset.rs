//! Phantom → motion model → (projection, volume, mask) corpus on disk.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, ensure, Context};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use monoview_core::motion::{fit_pca, warp_mask, warp_volume, DisplacementField, PcaMotionModel};
use monoview_core::phantom::{generate_phantom, Phantom, PHASE_COUNT};
use monoview_core::projector::{normalize_projection, render_drr, Beam, Geometry, Projection};
use monoview_core::resample::{
    isotropic_grid, resample_grid, resample_isotropic, resample_mask_isotropic, resize_mask, resize_volume,
    resized_grid, Interp,
};
use monoview_core::sample::{Sample, SampleSource};
use monoview_core::{Grid, Mask, Volume};

use crate::config::{AngleMode, RunConfig};
use crate::formats;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_META_FILE: &str = "manifest.meta";
pub const SAMPLES_DIR: &str = "samples";

/// Split sizes at full scale; smaller corpora use the same ratio.
pub const SPLIT_RATIO: [usize; 3] = [880, 100, 100];

// Decorrelates the split shuffle from the per-sample streams.
const SPLIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => bail!("split: expected train|val|test, got `{other}`"),
        }
    }
}

/// `[train, val, test]` sizes for `n` samples.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let total: usize = SPLIT_RATIO.iter().sum();
    let part = |r: usize| ((n * r) as f64 / total as f64).round() as usize;
    let train = part(SPLIT_RATIO[0]).min(n);
    let val = part(SPLIT_RATIO[1]).min(n - train);
    [train, val, n - train - val]
}

/// Seeded assignment of sample indices to splits.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
    let [train, val, _] = split_sizes(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Everything per-sample generation reads.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub n_samples: usize,
    pub input_size: usize,
    pub output_size: usize,
    pub detector_pixels: usize,
    pub extrapolation: f64,
    pub angle: AngleMode,
    pub beam: Beam,
    pub seed: u64,
}

impl DatasetParams {
    pub fn from_config(cfg: &RunConfig) -> anyhow::Result<Self> {
        Ok(DatasetParams {
            n_samples: cfg.dataset.n_samples,
            input_size: cfg.dataset.input_size,
            output_size: cfg.dataset.output_size,
            detector_pixels: cfg.dataset.detector_pixels,
            extrapolation: cfg.dataset.extrapolation,
            angle: cfg.angle_mode()?,
            beam: cfg.geometry.beam()?,
            seed: cfg.seed,
        })
    }
}

/// The resampled phantom and the motion model fitted to it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub phantom: Phantom,
    pub model: PcaMotionModel,
}

fn resample_dvf(dvf: &DisplacementField, dst: &Grid) -> anyhow::Result<DisplacementField> {
    let n = dvf.grid.len();
    let parts: Vec<Vec<f32>> = (0..3)
        .map(|c| {
            let comp: Vec<f32> = (0..n).map(|i| dvf.data[3 * i + c]).collect();
            resample_grid(&comp, &dvf.grid, dst, Interp::Cubic)
        })
        .collect();
    let data = (0..dst.len()).flat_map(|i| [parts[0][i], parts[1][i], parts[2][i]]).collect();
    Ok(DisplacementField::new(*dst, data)?)
}

/// Resamples every volume (cubic), mask (nearest) and field (cubic) to `spacing`.
///
/// A phantom already at that spacing comes back unchanged.
pub fn make_isotropic(p: &Phantom, spacing: f64) -> anyhow::Result<Phantom> {
    let dst = isotropic_grid(&p.reference.grid, spacing)?;
    let vol = |v: &Volume| resample_isotropic(v, spacing, Interp::Cubic);
    let mask = |m: &Mask| resample_mask_isotropic(m, spacing);
    Ok(Phantom {
        reference: vol(&p.reference)?,
        reference_mask: mask(&p.reference_mask)?,
        lung_mask: mask(&p.lung_mask)?,
        phases: p
            .phases
            .iter()
            .map(|(v, m)| Ok((vol(v)?, mask(m)?)))
            .collect::<anyhow::Result<_>>()?,
        dvfs: p.dvfs.iter().map(|d| resample_dvf(d, &dst)).collect::<anyhow::Result<_>>()?,
    })
}

/// Fits the motion model to the fields of phases 1.. (phase 0 is the
/// identity and carries no motion information).
pub fn fit_motion(phantom: &Phantom, components: usize) -> anyhow::Result<PcaMotionModel> {
    Ok(fit_pca(&phantom.dvfs[1..], components).context("fitting the motion model")?)
}

pub fn prepare_corpus(cfg: &RunConfig) -> anyhow::Result<Corpus> {
    let phantom = generate_phantom(&cfg.phantom.spec()).context("phantom")?;
    corpus_from_phantom(&phantom, cfg)
}

pub fn corpus_from_phantom(phantom: &Phantom, cfg: &RunConfig) -> anyhow::Result<Corpus> {
    let phantom = make_isotropic(phantom, cfg.dataset.resample_spacing_mm)?;
    let model = fit_motion(&phantom, cfg.dataset.pca_components)?;
    Ok(Corpus { phantom, model })
}

/// Resizes a projection to `size²` with the cubic kernel, keeping its extent.
pub fn resize_projection(proj: &Projection, size: usize) -> anyhow::Result<Projection> {
    let g = proj.geometry;
    let src = Grid::new([g.pixels[0], g.pixels[1], 1], [g.pitch[0], g.pitch[1], 1.0], [0.0; 3])?;
    let dst = resized_grid(&src, [size, size, 1])?;
    let pixels = resample_grid(&proj.pixels, &src, &dst, Interp::Cubic);
    let geometry = Geometry {
        pixels: [size, size],
        pitch: [dst.spacing[0], dst.spacing[1]],
        ..g
    };
    Ok(Projection::new(geometry, pixels)?)
}

/// Generates sample `index` from its own seed; independent of every other sample.
pub fn generate_sample(corpus: &Corpus, params: &DatasetParams, index: usize) -> anyhow::Result<Sample> {
    let id = sample_id(index);
    let inner = || -> anyhow::Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(index as u64));
        let coeffs = corpus.model.sample_coeffs_with(&mut rng, params.extrapolation);
        let angle_deg = match params.angle {
            AngleMode::Random => rng.random_range(0.0..360.0),
            AngleMode::Fixed(d) => d,
        };
        let dvf = corpus.model.synthesize(&coeffs)?;
        let vol = warp_volume(&corpus.phantom.reference, &dvf)?;
        let mask = warp_mask(&corpus.phantom.reference_mask, &dvf)?;
        let det = params.detector_pixels;
        let geom = Geometry::covering(&vol.grid, angle_deg, params.beam, [det, det])?;
        let drr = render_drr(&vol, &geom)?;
        let projection = normalize_projection(resize_projection(&drr, params.input_size)?);
        let s = params.output_size;
        let mut volume = resize_volume(&vol, [s; 3], Interp::Cubic)?;
        // Cubic overshoot at tissue edges; intensities already sit on the unit scale.
        volume.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let mask = resize_mask(&mask, [s; 3])?;
        let sample = Sample {
            id: id.clone(),
            angle_deg,
            coeffs,
            projection,
            volume,
            mask,
        };
        sample.validate()?;
        Ok(sample)
    };
    inner().with_context(|| format!("sample {id}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub angle_deg: f64,
    pub coeffs: Vec<f64>,
    /// Paths relative to the manifest directory.
    pub proj_path: String,
    pub vol_path: String,
    pub mask_path: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn record(&self, id: &str) -> anyhow::Result<&ManifestRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| anyhow!("sample `{id}` is not in the manifest at {}", self.root.display()))
    }

    /// sha256 of the manifest CSV bytes.
    pub fn file_hash(&self) -> anyhow::Result<String> {
        use sha2::{Digest, Sha256};
        let path = self.root.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn save(&self) -> anyhow::Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let k = self.records.first().map_or(3, |r| r.coeffs.len());
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        let mut header = vec!["id".to_string(), "split".into(), "angle_deg".into()];
        header.extend((1..=k).map(|c| format!("c{c}")));
        header.extend(["proj_path".into(), "vol_path".into(), "mask_path".into()]);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.id.clone(), r.split.to_string(), r.angle_deg.to_string()];
            row.extend(r.coeffs.iter().map(|c| c.to_string()));
            row.extend([r.proj_path.clone(), r.vol_path.clone(), r.mask_path.clone()]);
            w.write_record(&row)?;
        }
        w.flush()?;
        let meta = format!("config_hash={}\nseed={}\nn_samples={}\n", self.config_hash, self.seed, self.records.len());
        let meta_path = self.root.join(MANIFEST_META_FILE);
        std::fs::write(&meta_path, meta).with_context(|| format!("writing {}", meta_path.display()))?;
        Ok(())
    }

    /// Reads `manifest.csv` and `manifest.meta` from `root`.
    pub fn load(root: &Path) -> anyhow::Result<Self> {
        let meta_path = root.join(MANIFEST_META_FILE);
        let meta = std::fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
        let key = |k: &str| {
            meta.lines()
                .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
                .map(str::to_string)
                .ok_or_else(|| anyhow!("{}: missing `{k}`", meta_path.display()))
        };
        let config_hash = key("config_hash")?;
        let seed = key("seed")?.parse().with_context(|| format!("{}: seed", meta_path.display()))?;
        let path = root.join(MANIFEST_FILE);
        let mut rd = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
        let header = rd.headers()?.clone();
        let n = header.len();
        ensure!(
            n >= 7 && &header[0] == "id" && &header[1] == "split" && &header[2] == "angle_deg" && &header[n - 1] == "mask_path",
            "{}: unexpected header {:?}",
            path.display(),
            header
        );
        let k = n - 6;
        let mut records = Vec::new();
        for (line, row) in rd.records().enumerate() {
            let row = row?;
            let ctx = || format!("{} row {}", path.display(), line + 2);
            let num = |i: usize| row[i].parse::<f64>().with_context(ctx);
            records.push(ManifestRecord {
                id: row[0].to_string(),
                split: row[1].parse().with_context(ctx)?,
                angle_deg: num(2)?,
                coeffs: (0..k).map(|c| num(3 + c)).collect::<anyhow::Result<_>>()?,
                proj_path: row[3 + k].to_string(),
                vol_path: row[4 + k].to_string(),
                mask_path: row[5 + k].to_string(),
            });
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            config_hash,
            seed,
            records,
        })
    }
}

fn persist_sample(root: &Path, s: &Sample) -> anyhow::Result<[String; 3]> {
    let stem = |kind: &str| format!("{SAMPLES_DIR}/{}_{kind}", s.id);
    let paths = [stem("proj"), stem("vol"), stem("mask")];
    let inner = || -> anyhow::Result<()> {
        formats::save_projection(&root.join(&paths[0]), &s.projection)?;
        formats::save_volume(&root.join(&paths[1]), &s.volume)?;
        formats::save_mask(&root.join(&paths[2]), &s.mask)?;
        Ok(())
    };
    inner().with_context(|| format!("persisting sample {}", s.id))?;
    Ok(paths)
}

/// Generates, persists and splits `params.n_samples` samples under `root`.
pub fn build_dataset(corpus: &Corpus, params: &DatasetParams, config_hash: &str, root: &Path) -> anyhow::Result<Manifest> {
    ensure!(params.n_samples > 0, "n_samples must be positive");
    std::fs::create_dir_all(root.join(SAMPLES_DIR)).with_context(|| format!("creating {}", root.display()))?;
    let generated: Vec<(Sample, [String; 3])> = (0..params.n_samples)
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(corpus, params, i)?;
            let paths = persist_sample(root, &s)?;
            Ok((s, paths))
        })
        .collect::<anyhow::Result<_>>()?;
    let splits = assign_splits(params.n_samples, params.seed);
    let records = generated
        .into_iter()
        .zip(splits)
        .map(|((s, [p, v, m]), split)| ManifestRecord {
            id: s.id,
            split,
            angle_deg: s.angle_deg,
            coeffs: s.coeffs,
            proj_path: p,
            vol_path: v,
            mask_path: m,
        })
        .collect();
    let manifest = Manifest {
        root: root.to_path_buf(),
        config_hash: config_hash.to_string(),
        seed: params.seed,
        records,
    };
    manifest.save()?;
    Ok(manifest)
}

/// As [`build_dataset`] with every angle pinned to `angle_deg`.
pub fn build_fixed_angle_dataset(
    corpus: &Corpus,
    params: &DatasetParams,
    angle_deg: f64,
    config_hash: &str,
    root: &Path,
) -> anyhow::Result<Manifest> {
    let pinned = DatasetParams {
        angle: AngleMode::Fixed(angle_deg),
        ..params.clone()
    };
    build_dataset(corpus, &pinned, config_hash, root)
}

/// Loads and validates one sample listed in `manifest`.
pub fn load_sample(manifest: &Manifest, id: &str) -> anyhow::Result<Sample> {
    let r = manifest.record(id)?;
    let inner = || -> anyhow::Result<Sample> {
        let projection = formats::load_projection(&manifest.root.join(&r.proj_path))?;
        let volume = formats::load_volume(&manifest.root.join(&r.vol_path))?;
        let mask = formats::load_mask(&manifest.root.join(&r.mask_path))?;
        ensure!(
            volume.grid.dims == mask.grid.dims,
            "mask dims {:?} differ from volume dims {:?}",
            mask.grid.dims,
            volume.grid.dims
        );
        let s = Sample {
            id: r.id.clone(),
            angle_deg: r.angle_deg,
            coeffs: r.coeffs.clone(),
            projection,
            volume,
            mask,
        };
        s.validate()?;
        Ok(s)
    };
    inner().with_context(|| format!("loading sample {id}"))
}

/// All samples of one split, loaded into memory in manifest order.
pub fn load_split(manifest: &Manifest, split: Split) -> anyhow::Result<Vec<Sample>> {
    manifest.split(split).par_iter().map(|r| load_sample(manifest, &r.id)).collect()
}

/// Replaces every projection with a pinned-angle rendering of the same
/// anatomy; targets are untouched.
pub fn rerender_at_angle(corpus: &Corpus, params: &DatasetParams, samples: &[Sample], angle_deg: f64) -> anyhow::Result<Vec<Sample>> {
    let pinned = DatasetParams {
        angle: AngleMode::Fixed(angle_deg),
        ..params.clone()
    };
    samples
        .par_iter()
        .map(|s| {
            let index: usize = s
                .id
                .strip_prefix('s')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| anyhow!("sample id `{}` does not encode an index", s.id))?;
            generate_sample(corpus, &pinned, index)
        })
        .collect()
}

/// Projections perturbed with seeded Gaussian noise; targets untouched.
pub struct NoisySource<'a, S: ?Sized> {
    pub inner: &'a S,
    pub sigma: f64,
    pub seed: u64,
}

impl<S: SampleSource + ?Sized> SampleSource for NoisySource<'_, S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn sample(&self, index: usize) -> monoview_core::Result<Sample> {
        let mut s = self.inner.sample(index)?;
        s.projection = monoview_core::projector::add_gaussian_noise(&s.projection, self.sigma, self.seed.wrapping_add(index as u64))?;
        Ok(s)
    }
}

// ---- external 4D CT -----------------------------------------------------------

fn phase_stem(dir: &Path, i: usize, kind: &str) -> PathBuf {
    dir.join(format!("phase_{i:02}_{kind}"))
}

/// Writes a phantom in the layout [`load_external_4dct`] reads.
pub fn save_4dct(dir: &Path, p: &Phantom) -> anyhow::Result<()> {
    formats::save_volume(&dir.join("reference"), &p.reference)?;
    formats::save_mask(&dir.join("reference_mask"), &p.reference_mask)?;
    formats::save_mask(&dir.join("lung_mask"), &p.lung_mask)?;
    for (i, ((v, m), d)) in p.phases.iter().zip(&p.dvfs).enumerate() {
        formats::save_volume(&phase_stem(dir, i, "vol"), v)?;
        formats::save_mask(&phase_stem(dir, i, "mask"), m)?;
        formats::save_dvf(&phase_stem(dir, i, "dvf"), d)?;
    }
    Ok(())
}

/// Loads ten phases plus reference, with caller-supplied fields.
///
/// `lung_mask` is optional; without it the whole grid counts as lung.
pub fn load_external_4dct(dir: &Path) -> anyhow::Result<Phantom> {
    let exists = |stem: &Path| formats::item_paths(stem).0.exists();
    let reference = formats::load_volume(&dir.join("reference"))?;
    let grid = reference.grid;
    let check = |what: &str, g: &Grid| -> anyhow::Result<()> {
        ensure!(
            g.dims == grid.dims && g.spacing == grid.spacing,
            "{what}: dims {:?} spacing {:?} differ from reference dims {:?} spacing {:?}",
            g.dims,
            g.spacing,
            grid.dims,
            grid.spacing
        );
        Ok(())
    };
    let reference_mask = formats::load_mask(&dir.join("reference_mask"))?;
    check("reference_mask", &reference_mask.grid)?;
    let lung_mask = if exists(&dir.join("lung_mask")) {
        let m = formats::load_mask(&dir.join("lung_mask"))?;
        check("lung_mask", &m.grid)?;
        m
    } else {
        Mask::new(grid, vec![1; grid.len()])?
    };
    let mut phases = Vec::with_capacity(PHASE_COUNT);
    let mut dvfs = Vec::with_capacity(PHASE_COUNT);
    for i in 0..PHASE_COUNT {
        for kind in ["vol", "mask", "dvf"] {
            let stem = phase_stem(dir, i, kind);
            ensure!(
                exists(&stem),
                "expected {PHASE_COUNT} phases with vol/mask/dvf each; missing {}",
                formats::item_paths(&stem).0.display()
            );
        }
        let v = formats::load_volume(&phase_stem(dir, i, "vol"))?;
        let m = formats::load_mask(&phase_stem(dir, i, "mask"))?;
        let d = formats::load_dvf(&phase_stem(dir, i, "dvf"))?;
        check(&format!("phase {i} volume"), &v.grid)?;
        check(&format!("phase {i} mask"), &m.grid)?;
        check(&format!("phase {i} dvf"), &d.grid)?;
        ensure!(m.count() > 0, "phase {i} mask is empty");
        phases.push((v, m));
        dvfs.push(d);
    }
    Ok(Phantom {
        reference,
        reference_mask,
        lung_mask,
        phases,
        dvfs,
    })
}
