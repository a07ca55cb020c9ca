#![allow(dead_code)]

use monoview::RunConfig;

/// A run small enough to synthesize, train and evaluate in seconds:
/// 32³ phantom at 2 mm, 16² inputs, 16³ targets, two-level network.
pub fn tiny_config(n_samples: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.phantom.dims = [32; 3];
    cfg.phantom.spacing_mm = [2.0; 3];
    cfg.dataset.n_samples = n_samples;
    cfg.dataset.resample_spacing_mm = 2.0;
    cfg.dataset.input_size = 16;
    cfg.dataset.output_size = 16;
    cfg.dataset.detector_pixels = 32;
    cfg.network.levels = 2;
    cfg.network.base_channels = 8;
    cfg.train.epochs = 2;
    cfg.train.decay_start = 1;
    cfg.eval.slice_dumps = 1;
    cfg.validate().unwrap();
    cfg
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
