//! The experiment harness behind each subcommand.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context};

use monoview_core::metrics::{binarize_seg, evaluate_suite, EvalReport};
use monoview_core::network::{build, ModelState, NetworkConfig};
use monoview_core::resample::{isotropic_grid, resized_grid};
use monoview_core::sample::Sample;
use monoview_core::training::{train, EpochRecord, TrainHooks, TrainLog};
use monoview_core::{Grid, Mask, Volume};

use crate::config::{AngleMode, CheckpointHeader, RunConfig};
use crate::dataset::{self, DatasetParams, Manifest, NoisySource, Split};
use crate::formats;
use crate::report::{self, AblationRow};

pub const CHECKPOINT_FILE: &str = "model.rtsc";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "train_timing.csv";
pub const NOISE_TABLE_FILE: &str = "noise_sweep.csv";
pub const ABLATION_TABLE_FILE: &str = "ablation.csv";
pub const REPORT_FILE: &str = "report.md";
pub const SLICES_DIR: &str = "slices";

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn save_model(path: &Path, model: &ModelState<f32>) -> anyhow::Result<()> {
    let header = CheckpointHeader::from_config(&model.config).to_text();
    formats::save_checkpoint(path, &header, &model.params)?;
    Ok(())
}

/// Loads a checkpoint and checks its parameters against the network its
/// header describes; with `expected`, the header must also match it.
pub fn load_model(path: &Path, expected: Option<&NetworkConfig>) -> anyhow::Result<ModelState<f32>> {
    let (header, params) = formats::load_checkpoint(path)?;
    let config = CheckpointHeader::parse(&header).with_context(|| path.display().to_string())?;
    if let Some(want) = expected {
        ensure!(
            *want == config,
            "{}: checkpoint network {:?} does not match the configured network {:?}",
            path.display(),
            config,
            want
        );
    }
    let reference = build(&config, 0)?;
    ensure!(
        reference.params.names() == params.names(),
        "{}: parameter names do not match the network in its header",
        path.display()
    );
    for ((name, a), (_, b)) in reference.params.iter().zip(params.iter()) {
        ensure!(
            a.value.shape() == b.value.shape(),
            "{}: parameter `{name}` has shape {:?}, network needs {:?}",
            path.display(),
            b.value.shape(),
            a.value.shape()
        );
    }
    Ok(ModelState { config, params })
}

/// Phantom → motion model → samples on disk.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<Manifest> {
    cfg.write_resolved(out)?;
    let corpus = dataset::prepare_corpus(cfg)?;
    let params = DatasetParams::from_config(cfg)?;
    dataset::build_dataset(&corpus, &params, &cfg.hash(), out)
}

struct ClockHooks {
    start: Instant,
    verbose: bool,
    label: String,
}

impl TrainHooks for ClockHooks {
    fn now_seconds(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn on_epoch(&mut self, r: &EpochRecord) {
        if self.verbose {
            eprintln!(
                "{}epoch {:>4} lr {:.3e} train_mse {:.5} train_bce {:.5} val_total {:.5} ({:.1}s)",
                self.label, r.epoch, r.lr, r.train_mse, r.train_bce, r.val_total, r.seconds
            );
        }
    }
}

fn train_network(
    cfg: &RunConfig,
    network: &NetworkConfig,
    manifest: &Manifest,
    out: &Path,
    verbose: bool,
    label: &str,
) -> anyhow::Result<(ModelState<f32>, TrainLog)> {
    let train_set = dataset::load_split(manifest, Split::Train)?;
    let val_set = dataset::load_split(manifest, Split::Val)?;
    ensure!(!train_set.is_empty() && !val_set.is_empty(), "manifest has an empty train or val split");
    let model = build(network, cfg.seed)?;
    let mut hooks = ClockHooks {
        start: Instant::now(),
        verbose,
        label: label.into(),
    };
    let (best, log) = train(model, train_set.as_slice(), val_set.as_slice(), &cfg.train_config()?, &mut hooks)?;
    save_model(&out.join(CHECKPOINT_FILE), &best)?;
    write(&out.join(TRAIN_LOG_FILE), &report::train_log_csv(&log)?)?;
    write(&out.join(TIMING_FILE), &report::timing_csv(&log))?;
    Ok((best, log))
}

/// Trains on the train split, keeps the best-validation model.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, verbose: bool) -> anyhow::Result<(ModelState<f32>, TrainLog)> {
    cfg.write_resolved(out)?;
    let manifest = Manifest::load(data)?;
    train_network(cfg, &cfg.network_config()?, &manifest, out, verbose, "")
}

/// Test-time grid of reconstructed volumes under `cfg`.
pub fn output_grid(cfg: &RunConfig) -> anyhow::Result<Grid> {
    let iso = isotropic_grid(&cfg.phantom.spec().grid()?, cfg.dataset.resample_spacing_mm)?;
    Ok(resized_grid(&iso, [cfg.dataset.output_size; 3])?)
}

fn file_tag(tag: &str) -> String {
    tag.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn predict_masks(model: &ModelState<f32>, s: &Sample) -> anyhow::Result<(Volume, Option<Mask>)> {
    let out = model.predict(&s.projection.pixels)?;
    let vol = Volume::new(s.volume.grid, out.recon.into_data())?;
    let mask = out.seg.map(|p| binarize_seg(&p, s.volume.grid)).transpose()?;
    Ok((vol, mask))
}

fn dump_examples(cfg: &RunConfig, model: &ModelState<f32>, samples: &[Sample], tag: &str, out: &Path) -> anyhow::Result<()> {
    let dir = out.join(SLICES_DIR);
    for s in samples.iter().take(cfg.eval.slice_dumps) {
        let (vol, mask) = predict_masks(model, s)?;
        let stem = format!("{}_{}", file_tag(tag), s.id);
        report::dump_slices(&dir, &stem, &vol, &s.volume, mask.as_ref().map(|m| (m, &s.mask)))?;
    }
    Ok(())
}

/// Samples of `split` as stored (random angle) or re-rendered at a pinned angle.
pub fn eval_samples(cfg: &RunConfig, manifest: &Manifest, split: Split, angle: AngleMode) -> anyhow::Result<Vec<Sample>> {
    let samples = dataset::load_split(manifest, split)?;
    ensure!(!samples.is_empty(), "split {split} is empty");
    match angle {
        AngleMode::Random => Ok(samples),
        AngleMode::Fixed(deg) => {
            let corpus = dataset::prepare_corpus(cfg)?;
            let params = DatasetParams::from_config(cfg)?;
            dataset::rerender_at_angle(&corpus, &params, &samples, deg)
        }
    }
}

pub fn eval_file(split: Split, angle: AngleMode) -> String {
    format!("eval_{split}_{}.csv", file_tag(&angle.to_string()))
}

/// Metrics per sample of one split; CSV and slice images land in `out`.
pub fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    split: Split,
    angle: AngleMode,
    out: &Path,
) -> anyhow::Result<EvalReport> {
    cfg.write_resolved(out)?;
    let model = load_model(checkpoint, Some(&cfg.network_config()?))?;
    let manifest = Manifest::load(data)?;
    let samples = eval_samples(cfg, &manifest, split, angle)?;
    let tag = format!("{split}@{angle}");
    let report = evaluate_suite(&model, samples.as_slice(), &tag)?;
    report::write_eval_csv(&out.join(eval_file(split, angle)), &report)?;
    dump_examples(cfg, &model, &samples, &tag, out)?;
    Ok(report)
}

/// Test-split metrics under each configured projection noise level.
pub fn cmd_noise_sweep(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> anyhow::Result<Vec<(f64, EvalReport)>> {
    cfg.write_resolved(out)?;
    let model = load_model(checkpoint, Some(&cfg.network_config()?))?;
    let manifest = Manifest::load(data)?;
    let samples = dataset::load_split(&manifest, Split::Test)?;
    ensure!(!samples.is_empty(), "test split is empty");
    let mut rows = Vec::new();
    for &sigma in &cfg.noise.sigmas {
        let noisy = NoisySource {
            inner: samples.as_slice(),
            sigma,
            seed: cfg.seed,
        };
        let tag = format!("sigma={sigma}");
        let report = evaluate_suite(&model, &noisy, &tag)?;
        report::write_eval_csv(&out.join(format!("noise_{}.csv", file_tag(&sigma.to_string()))), &report)?;
        rows.push((sigma, report));
    }
    write(&out.join(NOISE_TABLE_FILE), &report::noise_table_csv(&rows)?)?;
    Ok(rows)
}

pub const ABLATION_NAMES: [&str; 4] = ["baseline", "+seg", "+seg+aec", "+seg+aec+ure"];

/// Trains and tests the four module configurations on one manifest.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path, verbose: bool) -> anyhow::Result<Vec<AblationRow>> {
    cfg.write_resolved(out)?;
    let manifest = Manifest::load(data)?;
    let test = dataset::load_split(&manifest, Split::Test)?;
    ensure!(!test.is_empty(), "test split is empty");
    let base = cfg.network_config()?;
    let mut rows = Vec::new();
    for (row, name) in ABLATION_NAMES.iter().enumerate() {
        let network = base.ablation(row);
        network.validate()?;
        let dir = out.join(format!("row{row}"));
        let (model, _) = train_network(cfg, &network, &manifest, &dir, verbose, &format!("[{name}] "))?;
        let report = evaluate_suite(&model, test.as_slice(), name)?;
        report::write_eval_csv(&dir.join(eval_file(Split::Test, AngleMode::Random)), &report)?;
        rows.push(AblationRow {
            name: name.to_string(),
            seg: network.enable_seg_branch,
            aec: network.enable_aec,
            ure: network.enable_ure,
            manifest_hash: Manifest::load(data)?.file_hash()?,
            report,
        });
    }
    write(&out.join(ABLATION_TABLE_FILE), &report::ablation_table_csv(&rows)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferReport {
    pub volume_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub centroid_mm: Option<[f64; 3]>,
    /// Timed passes in milliseconds, warm-up excluded.
    pub latencies_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q / 100.0 * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Reconstructs one projection `reps` times; the first pass is a warm-up.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, projection: &Path, reps: usize, out: &Path) -> anyhow::Result<InferReport> {
    ensure!(reps >= 2, "--reps must be at least 2 (one warm-up plus timed passes), got {reps}");
    cfg.write_resolved(out)?;
    let model = load_model(checkpoint, None)?;
    let proj = formats::load_projection(projection)?;
    let s = model.config.input_size;
    if proj.geometry.pixels != [s, s] {
        bail!(
            "{}: projection is {}x{}, checkpoint expects {s}x{s}",
            projection.display(),
            proj.geometry.pixels[0],
            proj.geometry.pixels[1]
        );
    }
    let mut grid = output_grid(cfg)?;
    if grid.dims != [s; 3] {
        grid = resized_grid(&grid, [s; 3])?;
    }
    let mut latencies = Vec::with_capacity(reps - 1);
    let mut last = None;
    for rep in 0..reps {
        let t0 = Instant::now();
        let pred = model.predict(&proj.pixels)?;
        let mask = pred.seg.as_ref().map(|p| binarize_seg(p, grid)).transpose()?;
        let centroid = mask.as_ref().and_then(Mask::centroid_mm);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        if rep > 0 {
            latencies.push(ms);
        }
        last = Some((pred, mask, centroid));
    }
    let (pred, mask, centroid) = last.expect("reps >= 2");
    let volume = Volume::new(grid, pred.recon.into_data())?;
    let volume_path = formats::save_volume(&out.join("recon"), &volume)?;
    let mask_path = mask.as_ref().map(|m| formats::save_mask(&out.join("tumor_mask"), m)).transpose()?;
    let mut sorted = latencies.clone();
    sorted.sort_by(f64::total_cmp);
    let report = InferReport {
        volume_path,
        mask_path,
        centroid_mm: centroid,
        median_ms: median(&sorted),
        p95_ms: percentile(&sorted, 95.0),
        latencies_ms: latencies,
    };
    let mut text = format!(
        "timed_passes={}\nmedian_ms={}\np95_ms={}\n",
        report.latencies_ms.len(),
        report.median_ms,
        report.p95_ms
    );
    match report.centroid_mm {
        Some(c) => text.push_str(&format!("centroid_mm={},{},{}\n", c[0], c[1], c[2])),
        None => text.push_str("centroid_mm=undefined\n"),
    }
    write(&out.join("latency.txt"), &text)?;
    Ok(report)
}

/// Collects the tables found in `out` into one markdown file.
pub fn cmd_report(out: &Path) -> anyhow::Result<PathBuf> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(out)
        .with_context(|| format!("reading {}", out.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    entries.sort();
    ensure!(!entries.is_empty(), "{}: no result tables to report", out.display());
    let mut md = String::from("# Results\n");
    for path in entries {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let body = if name.starts_with("eval_") || name.starts_with("noise_") && name != NOISE_TABLE_FILE {
            // Per-sample files: header plus the aggregate footer only.
            let mut lines = text.lines();
            let header = lines.next().unwrap_or_default();
            let footer: Vec<&str> = lines.filter(|l| l.starts_with("mean,") || l.starts_with("std,")).collect();
            format!("{header}\n{}\n", footer.join("\n"))
        } else {
            text
        };
        md.push_str(&format!("\n## {name}\n\n{}", report::csv_to_markdown(&body)?));
    }
    let path = out.join(REPORT_FILE);
    write(&path, &md)?;
    Ok(path)
}
