//! Overfits the desk network on a handful of samples and reports training-set
//! metrics. Usage: overfit [n_samples] [epochs] [lr]

use std::time::Instant;

use monoview::dataset::{self, DatasetParams};
use monoview::RunConfig;
use monoview_core::metrics::evaluate_suite;
use monoview_core::network::build;
use monoview_core::training::{train, EpochRecord, TrainHooks};

struct Print(Instant);

impl TrainHooks for Print {
    fn now_seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }

    fn on_epoch(&mut self, r: &EpochRecord) {
        eprintln!(
            "epoch {:>3} lr {:.2e} mse {:.6} bce {:.5} val {:.5} t={:.0}s",
            r.epoch, r.lr, r.train_mse, r.train_bce, r.val_total, self.now_seconds()
        );
    }
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map_or(Ok(16), |s| s.parse())?;
    let epochs: usize = args.get(2).map_or(Ok(200), |s| s.parse())?;
    let lr: f64 = args.get(3).map_or(Ok(5e-3), |s| s.parse())?;

    let mut cfg = RunConfig::desk();
    cfg.network.base_channels = 8;
    cfg.train.epochs = epochs;
    cfg.train.decay_start = epochs / 2;
    cfg.train.lr = lr;
    let corpus = dataset::prepare_corpus(&cfg)?;
    let params = DatasetParams::from_config(&cfg)?;
    let samples = (0..n)
        .map(|i| dataset::generate_sample(&corpus, &params, i))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let model = build(&cfg.network_config()?, cfg.seed)?;
    let start = Instant::now();
    let (best, log) = train(model, samples.as_slice(), samples.as_slice(), &cfg.train_config()?, &mut Print(start))?;
    let report = evaluate_suite(&best, samples.as_slice(), "train")?;
    let agg = report.aggregate();
    println!(
        "best epoch {} steps {} time {:.0}s mse {:?} dice {:?} comd {:?}",
        log.best_epoch,
        epochs * n,
        start.elapsed().as_secs_f64(),
        agg.mse.map(|s| s.mean),
        agg.dice.map(|s| s.mean),
        agg.comd_mm.map(|s| s.mean)
    );
    Ok(())
}
