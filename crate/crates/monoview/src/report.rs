//! CSV tables, markdown summaries and slice images.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;

use monoview_core::metrics::{Aggregate, EvalReport, EvalRow, Stat};
use monoview_core::training::TrainLog;
use monoview_core::{Mask, Volume};

use crate::formats;

pub const EVAL_HEADER: [&str; 9] = ["sample_id", "tag", "mae", "mse", "rmse", "psnr_db", "ssim", "dice", "comd_mm"];

/// Gray levels of the tumor overlay.
pub const OVERLAY_FN: u8 = 64;
pub const OVERLAY_FP: u8 = 160;
pub const OVERLAY_TP: u8 = 255;

fn num(v: f64) -> String {
    v.to_string()
}

/// Segmentation cells: empty without a segmentation branch, `undefined`
/// when the model segments but the value has no meaning (empty mask).
fn seg_cells(row: &EvalRow) -> [String; 2] {
    match row.dice {
        None => [String::new(), String::new()],
        Some(d) => [num(d), row.comd_mm.map_or_else(|| "undefined".into(), num)],
    }
}

fn stat_cell(s: Option<Stat>, f: fn(&Stat) -> f64) -> String {
    s.map(|s| num(f(&s))).unwrap_or_default()
}

fn footer_row(label: &str, tag: &str, a: &Aggregate, f: fn(&Stat) -> f64) -> Vec<String> {
    vec![
        label.into(),
        tag.into(),
        stat_cell(a.mae, f),
        stat_cell(a.mse, f),
        stat_cell(a.rmse, f),
        stat_cell(a.psnr_db, f),
        stat_cell(a.ssim, f),
        stat_cell(a.dice, f),
        stat_cell(a.comd_mm, f),
    ]
}

/// Per-sample rows, then `mean` and `std` footer rows under the same header.
pub fn eval_csv(report: &EvalReport) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVAL_HEADER)?;
    for r in &report.rows {
        let [d, c] = seg_cells(r);
        w.write_record([
            r.sample_id.clone(),
            r.tag.clone(),
            num(r.mae),
            num(r.mse),
            num(r.rmse),
            num(r.psnr_db),
            num(r.ssim),
            d,
            c,
        ])?;
    }
    let agg = report.aggregate();
    w.write_record(footer_row("mean", &report.tag, &agg, |s| s.mean))?;
    w.write_record(footer_row("std", &report.tag, &agg, |s| s.std))?;
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    std::fs::write(path, eval_csv(report)?).with_context(|| format!("writing {}", path.display()))
}

const SUMMARY_METRICS: [&str; 7] = ["mae", "mse", "rmse", "psnr_db", "ssim", "dice", "comd_mm"];

fn summary_cells(a: &Aggregate, with_seg: bool) -> Vec<String> {
    let stats = [a.mae, a.mse, a.rmse, a.psnr_db, a.ssim, a.dice, a.comd_mm];
    let mut out = Vec::new();
    for (i, s) in stats.iter().enumerate() {
        let seg = i >= 5;
        if seg && !with_seg {
            out.extend([String::new(), String::new()]);
        } else {
            out.push(stat_cell(*s, |s| s.mean));
            out.push(stat_cell(*s, |s| s.std));
        }
    }
    out
}

fn summary_header(lead: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    for m in SUMMARY_METRICS {
        h.push(format!("{m}_mean"));
        h.push(format!("{m}_std"));
    }
    h
}

/// One row per noise level.
pub fn noise_table_csv(rows: &[(f64, EvalReport)]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(summary_header(&["sigma"]))?;
    for (sigma, report) in rows {
        let with_seg = report.rows.iter().any(|r| r.dice.is_some());
        let mut row = vec![num(*sigma)];
        row.extend(summary_cells(&report.aggregate(), with_seg));
        w.write_record(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// One ablation row: its name, the module flags and the test report.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub seg: bool,
    pub aec: bool,
    pub ure: bool,
    pub manifest_hash: String,
    pub report: EvalReport,
}

pub fn ablation_table_csv(rows: &[AblationRow]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(summary_header(&["config", "seg", "aec", "ure", "manifest_sha256"]))?;
    for r in rows {
        let mark = |b: bool| if b { "x" } else { "" }.to_string();
        let mut row = vec![r.name.clone(), mark(r.seg), mark(r.aec), mark(r.ure), r.manifest_hash.clone()];
        row.extend(summary_cells(&r.report.aggregate(), r.seg));
        w.write_record(row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Deterministic columns only; wall-clock time goes to a separate file.
pub fn train_log_csv(log: &TrainLog) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "lr", "train_mse", "train_bce", "train_total", "val_total", "best"])?;
    for r in &log.records {
        w.write_record([
            r.epoch.to_string(),
            num(r.lr),
            num(r.train_mse),
            num(r.train_bce),
            num(r.train_total),
            num(r.val_total),
            (r.epoch == log.best_epoch).to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn timing_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,seconds\n");
    for r in &log.records {
        writeln!(s, "{},{}", r.epoch, r.seconds).unwrap();
    }
    s
}

/// Renders CSV text as a markdown table.
pub fn csv_to_markdown(text: &str) -> anyhow::Result<String> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut out = String::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let cells: Vec<&str> = row.iter().collect();
        writeln!(out, "| {} |", cells.join(" | ")).unwrap();
        if i == 0 {
            writeln!(out, "|{}", "---|".repeat(cells.len())).unwrap();
        }
    }
    Ok(out)
}

/// Central axial (z) slice, x fastest.
pub fn central_slice(vol: &Volume) -> (usize, usize, Vec<f32>) {
    let [nx, ny, nz] = vol.grid.dims;
    let z = nz / 2;
    (nx, ny, vol.data[z * nx * ny..(z + 1) * nx * ny].to_vec())
}

/// Central slice of `pred` against `truth`: FN, FP, TP as three gray levels.
pub fn overlay_slice(pred: &Mask, truth: &Mask) -> (usize, usize, Vec<u8>) {
    let [nx, ny, nz] = truth.grid.dims;
    let z = nz / 2;
    let r = z * nx * ny..(z + 1) * nx * ny;
    let px = pred.data[r.clone()]
        .iter()
        .zip(&truth.data[r])
        .map(|(&p, &t)| match (p, t) {
            (1, 1) => OVERLAY_TP,
            (1, 0) => OVERLAY_FP,
            (0, 1) => OVERLAY_FN,
            _ => 0,
        })
        .collect();
    (nx, ny, px)
}

/// Writes `<stem>_pred.pgm`, `<stem>_target.pgm` and, with a mask, `<stem>_overlay.pgm`.
pub fn dump_slices(dir: &Path, stem: &str, pred: &Volume, target: &Volume, masks: Option<(&Mask, &Mask)>) -> anyhow::Result<()> {
    let (w, h, p) = central_slice(pred);
    formats::save_pgm(&dir.join(format!("{stem}_pred.pgm")), w, h, &formats::to_gray(&p))?;
    let (w, h, t) = central_slice(target);
    formats::save_pgm(&dir.join(format!("{stem}_target.pgm")), w, h, &formats::to_gray(&t))?;
    if let Some((pm, tm)) = masks {
        let (w, h, o) = overlay_slice(pm, tm);
        formats::save_pgm(&dir.join(format!("{stem}_overlay.pgm")), w, h, &o)?;
    }
    Ok(())
}
