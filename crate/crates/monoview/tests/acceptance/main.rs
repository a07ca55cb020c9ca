//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Usage: `cargo test -p monoview --test acceptance [-- N ...]` where the
//! optional numbers select criteria.

#[path = "../common/mod.rs"]
mod common;
mod oracles;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{tiny_config, tree_bytes};
use monoview::commands::{cmd_ablate, cmd_eval, cmd_infer, cmd_noise_sweep, cmd_synth, cmd_train, ABLATION_NAMES, CHECKPOINT_FILE};
use monoview::config::AngleMode;
use monoview::dataset::{self, generate_sample, load_sample, prepare_corpus, split_sizes, DatasetParams, Manifest, Split};
use monoview::report::{ablation_table_csv, noise_table_csv};
use monoview::RunConfig;
use monoview_core::metrics::{comd, dice, evaluate_suite, mae, mse, psnr, rmse, ssim};
use monoview_core::motion::{fit_pca, warp_mask, warp_volume, DisplacementField};
use monoview_core::network::{build, calibrate_skips, encode, forward, ModelState, NetworkConfig};
use monoview_core::phantom::{generate_phantom, PhantomSpec};
use monoview_core::projector::{render_drr, render_drr_with_step, Beam, Geometry, STEP_FRACTION};
use monoview_core::training::{bce_loss, mse_loss, record_loss, total_loss, train, NoHooks, TrainConfig};
use monoview_core::{Grid, Mask, ParamStore, Tape, Tensor, Var, Volume};
use oracles::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const CRITERIA: [(u32, &str, fn() -> Outcome); 11] = [
    (1, "operator correctness", operators),
    (2, "end-to-end differentiability", end_to_end),
    (3, "uncertainty map fidelity", uncertainty_map),
    (4, "loss fidelity", losses),
    (5, "architecture arithmetic", architecture),
    (6, "projector", projector),
    (7, "motion model", motion),
    (8, "dataset protocol", dataset_protocol),
    (9, "metric oracles", metric_oracles),
    (10, "overfit smoke experiment", overfit),
    (11, "harness shape", harness_shape),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, title, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (verdict, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {title:<30} {verdict} [{secs:.2}s] {detail}");
        if outcome.is_err() {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- 1 -------------------------------------------------------------------------------

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;
type OracleFn = Box<dyn Fn(&[Tensor<f64>]) -> Vec<f64>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    op: OpFn,
    oracle: OracleFn,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static,
    oracle: impl Fn(&[Tensor<f64>]) -> Vec<f64> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        op: Box::new(op),
        oracle: Box::new(oracle),
    }
}

fn zip_with(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

/// Every differentiable operator on randomly drawn small shapes.
fn op_cases(r: &mut ChaCha8Rng, trial: usize) -> Vec<OpCase> {
    let mut out = Vec::new();
    let mut dim = |lo: usize, hi: usize| r.random_range(lo..=hi);
    let (ci, co) = (dim(1, 3), dim(1, 3));
    let (h, w) = (dim(4, 7), dim(4, 7));
    let (k2, s2) = ([1, 3][dim(0, 1)], dim(1, 2));
    let p2 = dim(0, k2 / 2);
    let (d3, h3, w3) = (dim(3, 5), dim(3, 5), dim(3, 5));
    let (k3, s3) = ([1, 3][dim(0, 1)], dim(1, 2));
    let p3 = dim(0, k3 / 2);
    let (td, th, tw) = (dim(1, 3), dim(1, 3), dim(1, 3));
    let (c, a, b) = (dim(2, 4), dim(2, 4), dim(1, 4));
    let (m, kk, n) = (dim(1, 5), dim(1, 5), dim(1, 5));
    let (c2, depth, sel) = (dim(1, 3), dim(1, 4), dim(0, c - 1));
    let mut r = oracles::rng(1000 + trial as u64);
    let r = &mut r;

    out.push(case(
        "conv2d",
        vec![tensor(r, &[ci, h, w]), tensor(r, &[co, ci, k2, k2])],
        move |tp, v| tp.conv2d(v[0], v[1], s2, p2).unwrap(),
        move |t| conv(t[0].data(), ci, [1, h, w], t[1].data(), co, [1, k2, k2], [1, s2, s2], [0, p2, p2]).0,
    ));
    out.push(case(
        "conv3d",
        vec![tensor(r, &[ci, d3, h3, w3]), tensor(r, &[co, ci, k3, k3, k3])],
        move |tp, v| tp.conv3d(v[0], v[1], s3, p3).unwrap(),
        move |t| conv(t[0].data(), ci, [d3, h3, w3], t[1].data(), co, [k3; 3], [s3; 3], [p3; 3]).0,
    ));
    out.push(case(
        "conv_transpose3d",
        vec![tensor(r, &[ci, td, th, tw]), tensor(r, &[ci, co, 4, 4, 4])],
        |tp, v| tp.conv_transpose3d(v[0], v[1], 2, 1, 0).unwrap(),
        move |t| conv_transpose(t[0].data(), ci, [td, th, tw], t[1].data(), co, 4, 2, 1),
    ));
    out.push(case(
        "instance_norm",
        vec![tensor(r, &[c, a, b + 1]), tensor(r, &[c]), tensor(r, &[c])],
        |tp, v| tp.instance_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        |t| instance_norm(&t[0], t[1].data(), t[2].data(), 1e-5),
    ));
    out.push(case(
        "channel_bias",
        vec![tensor(r, &[c, a, b]), tensor(r, &[c])],
        |tp, v| tp.channel_bias(v[0], v[1]).unwrap(),
        |t| {
            let n = t[0].numel() / t[1].numel();
            t[0].data().iter().enumerate().map(|(i, x)| x + t[1].data()[i / n]).collect()
        },
    ));
    out.push(case(
        "leaky_relu",
        vec![tensor(r, &[c, a, b])],
        |tp, v| tp.leaky_relu(v[0], 0.2),
        |t| t[0].data().iter().map(|&x| if x > 0.0 { x } else { 0.2 * x }).collect(),
    ));
    out.push(case(
        "sigmoid",
        vec![tensor_in(r, &[c, a, b], -4.0, 4.0)],
        |tp, v| tp.sigmoid(v[0]),
        |t| t[0].data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
    ));
    out.push(case(
        "softmax_channel",
        vec![tensor_in(r, &[c, a, b], -3.0, 3.0)],
        |tp, v| tp.softmax_channel(v[0]).unwrap(),
        move |t| softmax_axis0(t[0].data(), c),
    ));
    out.push(case(
        "softmax_rows",
        vec![tensor_in(r, &[m, n + 1], -3.0, 3.0)],
        |tp, v| tp.softmax_rows(v[0]).unwrap(),
        move |t| t[0].data().chunks(n + 1).flat_map(|row| softmax_axis0(row, n + 1)).collect(),
    ));
    let pair = vec![tensor(r, &[c, a, b]), tensor(r, &[c, a, b])];
    out.push(case("add", pair.clone(), |tp, v| tp.add(v[0], v[1]).unwrap(), |t| zip_with(&t[0], &t[1], |x, y| x + y)));
    out.push(case("sub", pair.clone(), |tp, v| tp.sub(v[0], v[1]).unwrap(), |t| zip_with(&t[0], &t[1], |x, y| x - y)));
    out.push(case("mul", pair, |tp, v| tp.mul(v[0], v[1]).unwrap(), |t| zip_with(&t[0], &t[1], |x, y| x * y)));
    let s: f64 = r.random_range(-2.0..2.0);
    out.push(case(
        "scale",
        vec![tensor(r, &[c, a, b])],
        move |tp, v| tp.scale(v[0], s),
        move |t| t[0].data().iter().map(|x| x * s).collect(),
    ));
    out.push(case(
        "scale_by",
        vec![tensor(r, &[c, a, b]), tensor(r, &[1])],
        |tp, v| tp.scale_by(v[0], v[1]).unwrap(),
        |t| t[0].data().iter().map(|x| x * t[1].data()[0]).collect(),
    ));
    out.push(case(
        "square",
        vec![tensor(r, &[c, a, b])],
        |tp, v| tp.square(v[0]),
        |t| t[0].data().iter().map(|x| x * x).collect(),
    ));
    out.push(case(
        "matmul",
        vec![tensor(r, &[m, kk]), tensor(r, &[kk, n])],
        |tp, v| tp.matmul(v[0], v[1]).unwrap(),
        move |t| matmul(t[0].data(), t[1].data(), m, kk, n),
    ));
    out.push(case(
        "transpose",
        vec![tensor(r, &[m, n])],
        |tp, v| tp.transpose(v[0]).unwrap(),
        move |t| (0..n).flat_map(|j| (0..m).map(move |i| (i, j))).map(|(i, j)| t[0].data()[i * n + j]).collect(),
    ));
    out.push(case(
        "reshape",
        vec![tensor(r, &[c, a, b])],
        move |tp, v| tp.reshape(v[0], &[c * a, b]).unwrap(),
        |t| t[0].data().to_vec(),
    ));
    out.push(case(
        "concat",
        vec![tensor(r, &[c, a, b]), tensor(r, &[c2, a, b])],
        |tp, v| tp.concat(&[v[0], v[1]]).unwrap(),
        |t| t[0].data().iter().chain(t[1].data()).copied().collect(),
    ));
    out.push(case(
        "repeat_depth",
        vec![tensor(r, &[c, a, b])],
        move |tp, v| tp.repeat_depth(v[0], depth).unwrap(),
        move |t| {
            let plane = a * b;
            let mut o = Vec::new();
            for ch in 0..c {
                for _ in 0..depth {
                    o.extend_from_slice(&t[0].data()[ch * plane..(ch + 1) * plane]);
                }
            }
            o
        },
    ));
    out.push(case(
        "mul_broadcast",
        vec![tensor(r, &[c, a, b]), tensor(r, &[1, a, b])],
        |tp, v| tp.mul_broadcast(v[0], v[1]).unwrap(),
        move |t| t[0].data().iter().enumerate().map(|(i, x)| x * t[1].data()[i % (a * b)]).collect(),
    ));
    out.push(case(
        "select_channel",
        vec![tensor(r, &[c, a, b])],
        move |tp, v| tp.select_channel(v[0], sel).unwrap(),
        move |t| t[0].data()[sel * a * b..(sel + 1) * a * b].to_vec(),
    ));
    // Confident channel drawn from (0.55, 0.95) and the other from
    // (0.05, 0.45): away from the clamp and from the max() kink.
    let hi = tensor_in(r, &[1, a, b], 0.55, 0.95);
    let lo = tensor_in(r, &[1, a, b], 0.05, 0.45);
    let inputs = if trial % 2 == 0 { vec![hi, lo] } else { vec![lo, hi] };
    out.push(case(
        "uncertainty_map",
        inputs,
        |tp, v| tp.uncertainty_map(v[0], v[1]).unwrap(),
        |t| zip_with(&t[0], &t[1], uncertainty),
    ));
    out.push(case("sum", vec![tensor(r, &[c, a, b])], |tp, v| tp.sum(v[0]), |t| vec![t[0].data().iter().sum()]));
    out.push(case(
        "mean",
        vec![tensor(r, &[c, a, b])],
        |tp, v| tp.mean(v[0]),
        |t| vec![t[0].data().iter().sum::<f64>() / t[0].numel() as f64],
    ));
    let labels = Tensor::new(&[1, a, b], uniform(r, a * b, 0.0, 1.0).iter().map(|&u| (u > 0.5) as u8 as f64).collect()).unwrap();
    let y = labels.clone();
    out.push(case(
        "bce",
        vec![tensor_in(r, &[1, a, b], 0.05, 0.95)],
        move |tp, v| tp.bce(v[0], &labels).unwrap(),
        move |t| vec![bce(t[0].data(), y.data())],
    ));
    out
}

/// Adjoint identities: <C x, y> = <x, T y> for the up-sampler against the
/// even-kernel oracle convolution, and for odd kernels against the tape's
/// own strided convolution.
fn adjoint_errors(r: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    let (cin, cout, n) = (r.random_range(1..=3), r.random_range(1..=3), 2 * r.random_range(1..=3));
    let xv = tensor(r, &[cin, n, n, n]);
    let wv = tensor(r, &[cout, cin, 4, 4, 4]);
    let (cx, o) = conv(xv.data(), cin, [n; 3], wv.data(), cout, [4; 3], [2; 3], [1; 3]);
    let yv = tensor(r, &[cout, o[0], o[1], o[2]]);
    let mut tape = Tape::<f64>::new();
    let y = tape.constant(yv.clone());
    let w = tape.constant(wv);
    let ty = tape.conv_transpose3d(y, w, 2, 1, 0).unwrap();
    worst = worst.max(rel(dot(&cx, yv.data()), dot(xv.data(), tape.value(ty).data())));

    for (k, s, p) in [(3, 2, 1), (3, 1, 1), (5, 2, 2)] {
        let n = r.random_range(3..=6);
        let xv = tensor(r, &[cin, n, n, n]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xv.clone());
        let w = tape.constant(tensor(r, &[cout, cin, k, k, k]));
        let cx = tape.conv3d(x, w, s, p).unwrap();
        let yv = tensor(r, &tape.shape(cx).to_vec());
        let y = tape.constant(yv.clone());
        let ty = tape.conv_transpose3d(y, w, s, p, (n + 2 * p - k) % s).unwrap();
        worst = worst.max(rel(dot(tape.value(cx).data(), yv.data()), dot(xv.data(), tape.value(ty).data())));
    }
    worst
}

fn operators() -> Outcome {
    let start = Instant::now();
    let (mut fwd, mut grad, mut adj): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut failures = Vec::new();
    let mut count = 0;
    let trials = 3;
    for trial in 0..trials {
        let mut r = rng(trial as u64);
        for c in op_cases(&mut r, trial) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = c.inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = (c.op)(&mut tape, &vars);
            let f = max_rel(tape.value(out).data(), &(c.oracle)(&c.inputs));
            let g = grad_check(&c.inputs, 31 * trial as u64 + count as u64, &c.op);
            if f > 1e-6 || g > 1e-4 {
                failures.push(format!("{} (trial {trial}): forward {f:.2e} grad {g:.2e}", c.name));
            }
            fwd = fwd.max(f);
            grad = grad.max(g);
            count += 1;
        }
        adj = adj.max(adjoint_errors(&mut r));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    ensure!(adj < 1e-5, "adjoint identity off by {adj:.2e}");
    ensure!(secs < 120.0, "suite took {secs:.0}s");
    Ok(format!(
        "{count} operator cases over {trials} shape draws; worst forward {fwd:.1e} (<1e-6), adjoint {adj:.1e} (<1e-5), gradient {grad:.1e} (<1e-4); {secs:.2}s (<120s)"
    ))
}

// ---- 2 -------------------------------------------------------------------------------

fn f64_model(cfg: &NetworkConfig, seed: u64) -> ModelState<f64> {
    let m = build(cfg, seed).unwrap();
    ModelState {
        config: m.config,
        params: m.params.cast(),
    }
}

fn end_to_end() -> Outcome {
    let net = NetworkConfig::desk();
    let s = net.input_size;
    let cfg = TrainConfig::desk();
    let mut model = f64_model(&net, 21);
    // Open the attention gates so that path carries gradient too.
    for j in 0..net.levels {
        if let Some(p) = model.params.get_mut(&format!("aec.{j}.gamma")) {
            p.value.data_mut()[0] = 0.3;
        }
    }
    let mut r = rng(5);
    let vol = s * s * s;
    let t = monoview_core::training::SampleTensors {
        projection: Tensor::new(&[1, s, s], uniform(&mut r, s * s, 0.0, 1.0)).unwrap(),
        volume: Tensor::new(&[1, s, s, s], uniform(&mut r, vol, 0.0, 1.0)).unwrap(),
        mask: Tensor::new(&[1, s, s, s], uniform(&mut r, vol, 0.0, 1.0).iter().map(|&u| (u > 0.8) as u8 as f64).collect()).unwrap(),
    };
    let loss_at = |m: &ModelState<f64>| {
        let mut tape = Tape::new();
        record_loss(&mut tape, m, &t, &cfg).unwrap().1.total
    };
    let mut tape = Tape::new();
    let (loss, _) = record_loss(&mut tape, &model, &t, &cfg).map_err(err)?;
    tape.backward(loss.total).map_err(err)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&tape);
    drop(tape);
    let analytic: ParamStore<f64> = model.params.clone();

    // Central differences at h = 1e-6: larger steps cross leaky-ReLU kinks
    // somewhere in the ~10^6 activations, and the loss (a sum over 32^3
    // voxels) carries ~5e-9 of round-off, so each coordinate is held to
    // |a - n| <= 1e-3 |n| + 1e-8.
    let (h, floor) = (1e-6, 1e-8);
    let names = model.params.names().to_vec();
    let (mut coords, mut floored, mut worst) = (0, 0, 0.0f64);
    let mut bad = Vec::new();
    for name in &names {
        let n = model.params.get(name).unwrap().value.numel();
        let picks: Vec<usize> = if n <= 2 { (0..n).collect() } else { (0..2).map(|_| r.random_range(0..n)).collect() };
        let grad = analytic.get(name).unwrap().grad.clone().unwrap_or_else(|| vec![0.0; n]);
        for &i in &picks {
            let orig = model.params.get(name).unwrap().value.data()[i];
            model.params.get_mut(name).unwrap().value.data_mut()[i] = orig + h;
            let lp = loss_at(&model);
            model.params.get_mut(name).unwrap().value.data_mut()[i] = orig - h;
            let lm = loss_at(&model);
            model.params.get_mut(name).unwrap().value.data_mut()[i] = orig;
            let (a, num) = (grad[i], (lp - lm) / (2.0 * h));
            let diff = (a - num).abs();
            coords += 1;
            if diff > 1e-3 * num.abs() + floor {
                bad.push(format!("{name}[{i}]: {a:e} vs {num:e}"));
            } else if diff > 1e-3 * num.abs() {
                floored += 1;
            } else if num.abs() > 0.0 {
                worst = worst.max(diff / num.abs());
            }
        }
    }
    ensure!(bad.is_empty(), "{} of {coords} coordinates off: {}", bad.len(), bad.join("; "));
    Ok(format!(
        "desk network ({s}^2 input, {} levels, base {}) in f64: {coords} coordinates across {} tensors within 1e-3 rel + 1e-8 abs; worst rel {worst:.1e} among the {} inside pure rel, {floored} inside only via the floor",
        net.levels,
        net.base_channels,
        names.len(),
        coords - floored
    ))
}

// ---- 3 -------------------------------------------------------------------------------

fn uncertainty_map() -> Outcome {
    let eval = |m: &[f64]| -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[m.len()], m.to_vec()).unwrap());
        let b = tape.constant(Tensor::new(&[m.len()], m.iter().map(|v| 1.0 - v).collect()).unwrap());
        let u = tape.uncertainty_map(a, b).unwrap();
        tape.value(u).data().to_vec()
    };
    let fixed = eval(&[0.5, 0.8]);
    ensure!(fixed[0] == 0.0, "U(0.5) = {}", fixed[0]);
    let want = 1.0 - (-3f64).exp();
    ensure!((fixed[1] - want).abs() < 1e-9, "U(0.8) = {} vs {want}", fixed[1]);

    let hi = 1.0 - 1e-6;
    let grid: Vec<f64> = (1..=1000).map(|i| 0.5 + (hi - 0.5) * i as f64 / 1001.0).collect();
    let u = eval(&grid);
    ensure!(u.iter().all(|v| (0.0..1.0).contains(v)), "value outside [0, 1)");
    let ties: Vec<usize> = (1..u.len()).filter(|&i| u[i] <= u[i - 1]).collect();
    ensure!(
        ties.is_empty(),
        "range ok, U(0.5)=0, U(0.8) ok; but {} of 999 neighbouring pairs are not strictly increasing, first at m={:.6}: \
         1-exp(1-m/(1-m)) is within 2^-53 of 1 there and 64-bit floats below 1 cannot separate the points",
        ties.len(),
        grid[ties[0]]
    );
    Ok("U(0.5)=0, U(0.8) within 1e-9, range in [0,1), strictly increasing on 1000 points".into())
}

// ---- 4 -------------------------------------------------------------------------------

fn losses() -> Outcome {
    let mut r = rng(4);
    let shape = [1, 4, 5, 3];
    let target = tensor_in(&mut r, &shape, 0.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let pred = tape.constant(Tensor::new(&shape, target.data().iter().map(|v| v + 0.1).collect()).unwrap());
    let l = mse_loss(&mut tape, pred, &target).map_err(err)?;
    let m = tape.value(l).data()[0];
    ensure!((m - 0.01).abs() < 1e-9, "mse of a 0.1 offset = {m}");

    let half = tape.constant(Tensor::full(&shape, 0.5));
    let labels = Tensor::new(&shape, uniform(&mut r, 60, 0.0, 1.0).iter().map(|&u| (u > 0.5) as u8 as f64).collect()).unwrap();
    let b = bce_loss(&mut tape, half, &labels).map_err(err)?;
    let bv = tape.value(b).data()[0];
    ensure!((bv - std::f64::consts::LN_2).abs() < 1e-9, "bce at 0.5 = {bv}");

    for seed in 0..5 {
        let mut r = rng(40 + seed);
        let recon = tape.constant(tensor_in(&mut r, &shape, 0.0, 1.0));
        let seg = tape.constant(tensor_in(&mut r, &shape, 0.01, 0.99));
        let lv = total_loss(&mut tape, recon, &target, Some(seg), &labels, 1.0, 1.0).map_err(err)?;
        let (m, b) = (tape.value(lv.mse).data()[0], tape.value(lv.bce.unwrap()).data()[0]);
        let total = tape.value(lv.total).data()[0];
        ensure!(total == m + b, "total {total} != {m} + {b}");
    }
    Ok(format!("mse {m:.12} (0.01), bce {bv:.12} (ln 2), joint loss equals component sum exactly on 5 draws"))
}

// ---- 5 -------------------------------------------------------------------------------

fn architecture() -> Outcome {
    let cfg = NetworkConfig::paper();
    cfg.validate().map_err(err)?;
    let s = cfg.input_size;
    ensure!(s == 128, "paper config input {s}");
    let model = build(&cfg, 1).map_err(err)?;
    let image = Tensor::new(&[1, s, s], uniform(&mut rng(3), s * s, 0.0, 1.0).iter().map(|&v| v as f32).collect()).unwrap();

    let (recon_shape, seg_shape, worst_sum) = {
        let mut tape = Tape::<f32>::new();
        let out = forward(&mut tape, &model, &image).map_err(err)?;
        let seg = out.seg.ok_or("no segmentation output")?;
        let sv = tape.value(seg).data();
        let n = s * s * s;
        let worst = (0..n).map(|i| (sv[i] as f64 + sv[n + i] as f64 - 1.0).abs()).fold(0.0, f64::max);
        (tape.shape(out.recon).to_vec(), tape.shape(seg).to_vec(), worst)
    };
    ensure!(recon_shape == [1, s * s * s] || recon_shape == [1, s, s, s], "recon shape {recon_shape:?}");
    ensure!(seg_shape == [2, s * s * s] || seg_shape == [2, s, s, s], "seg shape {seg_shape:?}");
    ensure!(worst_sum <= 1e-6, "softmax sums off by {worst_sum:.2e}");

    // Calibrated skips are replicated planes: every depth slice identical.
    let mut depth_checked = 0;
    {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.clone());
        let pyr = encode(&mut tape, &model, x).map_err(err)?;
        let skips = calibrate_skips(&mut tape, &model, &pyr).map_err(err)?;
        ensure!(skips.len() == cfg.levels, "{} calibrated skips", skips.len());
        for (j, &sk) in skips.iter().enumerate() {
            let sh = tape.shape(sk).to_vec();
            let (c, d, plane) = (sh[0], sh[1], sh[2] * sh[3]);
            let v = tape.value(sk).data();
            for ch in 0..c {
                let first = &v[ch * d * plane..ch * d * plane + plane];
                for z in 1..d {
                    let at = (ch * d + z) * plane;
                    ensure!(&v[at..at + plane] == first, "skip {j} channel {ch} differs at depth {z}");
                }
            }
            depth_checked += 1;
        }
    }

    let mut rows = Vec::new();
    for row in 0..4 {
        let rc = cfg.ablation(row);
        let m = build(&rc, 2).map_err(err)?;
        let mut tape = Tape::<f32>::new();
        let out = forward(&mut tape, &m, &image).map_err(err)?;
        ensure!(out.seg.is_some() == rc.enable_seg_branch, "row {row} segmentation output presence");
        ensure!(tape.value(out.recon).data().iter().all(|v| v.is_finite()), "row {row} non-finite output");
        rows.push(format!("{}/{}/{}", rc.enable_seg_branch as u8, rc.enable_aec as u8, rc.enable_ure as u8));
    }
    Ok(format!(
        "128 config (base {}): (1,{s},{s}) -> recon {recon_shape:?}, seg {seg_shape:?}; softmax sum err {worst_sum:.1e}; {depth_checked} calibrated skips depth-constant; ablation rows seg/aec/ure {} all forward",
        cfg.base_channels,
        rows.join(", ")
    ))
}

// ---- 6 -------------------------------------------------------------------------------

fn projector() -> Outcome {
    // 64 mm unit-density cube in an 80 mm volume of 1 mm voxels.
    let grid = Grid::centered([80, 80, 80], [1.0; 3]).map_err(err)?;
    let data = (0..grid.len())
        .map(|i| grid.coords(i).iter().all(|&v| (8..72).contains(&v)) as u8 as f32)
        .collect();
    let cube = Volume::new(grid, data).map_err(err)?;
    let mut path_err: f64 = 0.0;
    for angle in [0.0, 90.0, 180.0, 270.0] {
        let g = Geometry {
            angle_deg: angle,
            beam: Beam::Parallel,
            pixels: [120, 120],
            pitch: [1.0; 2],
        };
        let p = render_drr(&cube, &g).map_err(err)?;
        for k in 0..120 {
            for j in 0..120 {
                let (u, v) = (j as f64 - 59.5, k as f64 - 59.5);
                if u.abs() < 28.0 && v.abs() < 28.0 {
                    path_err = path_err.max((p.at(j, k) as f64 - 64.0).abs() / 64.0);
                }
            }
        }
    }
    ensure!(path_err < 0.005, "cube path length off by {:.3}%", 100.0 * path_err);

    let spec = PhantomSpec {
        dims: [48, 48, 48],
        spacing: [1.4; 3],
        ..PhantomSpec::default()
    };
    let vol = generate_phantom(&spec).map_err(err)?.reference;
    let mut mirror: f64 = 0.0;
    for angle in [0.0, 37.0, 90.0, 211.5] {
        let g = Geometry::covering(&vol.grid, angle, Beam::Parallel, [64, 48]).map_err(err)?;
        let a = render_drr(&vol, &g).map_err(err)?;
        let b = render_drr(&vol, &Geometry { angle_deg: angle + 180.0, ..g }).map_err(err)?;
        for k in 0..48 {
            for j in 0..64 {
                mirror = mirror.max((a.at(j, k) as f64 - b.at(63 - j, k) as f64).abs());
            }
        }
    }
    ensure!(mirror < 1e-4, "opposite views differ by {mirror:.2e}");

    let mut halving: f64 = 0.0;
    for (angle, beam) in [(0.0, Beam::Parallel), (63.0, Beam::Parallel), (120.0, Beam::Cone { sad: 1000.0, sdd: 1500.0 })] {
        let g = Geometry::covering(&vol.grid, angle, beam, [48, 48]).map_err(err)?;
        let coarse = render_drr(&vol, &g).map_err(err)?;
        let fine = render_drr_with_step(&vol, &g, 0.5 * STEP_FRACTION * 1.4).map_err(err)?;
        let peak = fine.pixels.iter().cloned().fold(0.0f32, f32::max) as f64;
        for (&a, &b) in coarse.pixels.iter().zip(&fine.pixels) {
            // Rays grazing the footprint are measured against 1% of the peak.
            halving = halving.max(((a - b) as f64).abs() / (b as f64).max(0.01 * peak));
        }
    }
    ensure!(halving < 0.002, "step halving changes pixels by {:.3}%", 100.0 * halving);
    Ok(format!(
        "cube path length err {:.3}% (<0.5%), 180deg mirror {mirror:.1e} (<1e-4), step halving {:.3}% (<0.2%)",
        100.0 * path_err,
        100.0 * halving
    ))
}

// ---- 7 -------------------------------------------------------------------------------

/// Rank-3 residual of the fitted model, the oracle's tail eigenvalue sum
/// and the oracle's total centered energy.
fn rank3_residual(fields: &[DisplacementField]) -> Result<(f64, f64, f64), String> {
    let model = fit_pca(fields, 3).map_err(err)?;
    let got: f64 = fields
        .iter()
        .map(|f| {
            let r = model.synthesize(&model.project(f).unwrap()).unwrap();
            f.data.iter().zip(&r.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>()
        })
        .sum();
    let spectrum = gram_spectrum(fields);
    ensure!(model.synthesize(&[0.0; 3]).map_err(err)? == model.mean, "zero coefficients do not give the mean");
    Ok((got, spectrum[3..].iter().sum(), spectrum.iter().sum()))
}

fn motion() -> Outcome {
    let g = Grid::centered([5, 4, 3], [1.0, 1.5, 2.0]).map_err(err)?;
    let mut r = rng(7);
    let fields: Vec<DisplacementField> = (0..9)
        .map(|_| DisplacementField::new(g, uniform(&mut r, 3 * g.len(), -3.0, 3.0).iter().map(|&v| v as f32).collect()).unwrap())
        .collect();
    let (got, want, _) = rank3_residual(&fields)?;
    let e = rel(got, want);
    ensure!(e < 1e-4, "rank-3 residual {got} vs oracle {want}");

    // The phantom's breathing fields are nearly rank 3, so their tail is at
    // the f32 noise floor; compare against the total energy instead.
    let spec = PhantomSpec {
        dims: [24, 24, 24],
        spacing: [2.5; 3],
        ..PhantomSpec::default()
    };
    let phantom = generate_phantom(&spec).map_err(err)?;
    let phantom_fields: Vec<DisplacementField> = phantom.dvfs.iter().skip(phantom.dvfs.len() - 9).cloned().collect();
    let (pg, pw, total) = rank3_residual(&phantom_fields)?;
    let pe = (pg - pw).abs() / total;
    ensure!(pe < 1e-4, "phantom rank-3 residual {pg} vs oracle {pw} (total {total})");

    let vol = phantom.reference.clone();
    let zero = DisplacementField::zeros(vol.grid);
    ensure!(warp_volume(&vol, &zero).map_err(err)? == vol, "zero-field volume warp changed voxels");
    ensure!(warp_mask(&phantom.reference_mask, &zero).map_err(err)? == phantom.reference_mask, "zero-field mask warp changed voxels");
    ensure!(warp_mask(&phantom.lung_mask, &zero).map_err(err)? == phantom.lung_mask, "zero-field lung warp changed voxels");
    Ok(format!(
        "rank-3 residual vs Jacobi oracle rel {e:.1e} (<1e-4) on 9 random small-grid fields; phantom fields {pe:.1e} of total energy; zero coefficients = mean; zero-DVF warps bit-exact"
    ))
}

// ---- 8 -------------------------------------------------------------------------------

fn dataset_protocol() -> Outcome {
    let n = 1080;
    let cfg = tiny_config(n);
    ensure!(split_sizes(n) == [880, 100, 100], "split sizes {:?}", split_sizes(n));
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    let ma = cmd_synth(&cfg, a.path()).map_err(err)?;
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| ma.split(s).len());
    ensure!(ma.records.len() == n && counts == [880, 100, 100], "{} samples split {counts:?}", ma.records.len());
    let mut ids: Vec<&str> = ma.records.iter().map(|r| r.id.as_str()).collect();
    ids.sort();
    ids.dedup();
    ensure!(ids.len() == n, "duplicate sample ids");

    let mb = cmd_synth(&cfg, b.path()).map_err(err)?;
    ensure!(ma.records == mb.records, "manifests differ");
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    ensure!(ta == tb, "regenerated trees differ");
    let bytes: usize = ta.iter().map(|(_, d)| d.len()).sum();

    let corpus = prepare_corpus(&cfg).map_err(err)?;
    let params = DatasetParams::from_config(&cfg).map_err(err)?;
    let picks = [1079, 0, 613, 1, 540];
    let out_of_order: Vec<_> = picks.iter().map(|&i| generate_sample(&corpus, &params, i)).collect::<Result<_, _>>().map_err(err)?;
    let manifest = Manifest::load(a.path()).map_err(err)?;
    for (&i, s) in picks.iter().zip(&out_of_order) {
        let stored = load_sample(&manifest, &dataset::sample_id(i)).map_err(err)?;
        ensure!(*s == stored, "sample {i} differs when generated alone");
    }
    Ok(format!(
        "{n} samples split 880/100/100; two regenerations byte-identical ({} files, {:.1} MB); {} samples regenerated out of order match",
        ta.len(),
        bytes as f64 / 1e6,
        picks.len()
    ))
}

// ---- 9 -------------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut comd_worst: f64 = 0.0;
    for seed in 0..4u64 {
        let mut r = rng(90 + seed);
        let dims = [r.random_range(11..=15), r.random_range(11..=14), r.random_range(11..=13)];
        let g = Grid::new(dims, [1.0, 1.25, 2.0], [-7.0, 3.5, 12.0]).map_err(err)?;
        let vol = |r: &mut ChaCha8Rng| Volume::new(g, (0..g.len()).map(|_| r.random::<f32>()).collect()).unwrap();
        let (a, b) = (vol(&mut r), vol(&mut r));
        let (rm, rs) = intensity(&a, &b);
        let pairs = [
            (mae(&a, &b).map_err(err)?, rm),
            (mse(&a, &b).map_err(err)?, rs),
            (rmse(&a, &b).map_err(err)?, rs.sqrt()),
            (psnr(&a, &b).map_err(err)?, 10.0 * (1.0 / rs).log10()),
            (ssim(&a, &b).map_err(err)?, oracles::ssim(&a, &b)),
        ];
        let p: f64 = r.random_range(0.05..0.5);
        let mask = |r: &mut ChaCha8Rng| Mask::new(g, (0..g.len()).map(|_| r.random_bool(p) as u8).collect()).unwrap();
        let (ma, mb) = (mask(&mut r), mask(&mut r));
        let d = dice(&ma, &mb).map_err(err)?;
        for (i, (got, want)) in pairs.iter().chain([(d, oracles::dice(&ma, &mb))].iter()).enumerate() {
            let e = rel(*got, *want);
            ensure!(e < 1e-6, "metric {i} (seed {seed}): {got} vs {want}");
            worst = worst.max(e);
        }
        let c = comd(&ma, &mb).map_err(err)?.ok_or("comd undefined on non-empty masks")?;
        let want = centroid_distance(&ma, &mb).unwrap();
        ensure!((c - want).abs() < 1e-9, "comd {c} vs {want}");
        comd_worst = comd_worst.max((c - want).abs());
    }

    let g = Grid::new([8, 8, 8], [1.5, 2.0, 2.5], [0.0; 3]).map_err(err)?;
    let block = |off: usize| {
        Mask::new(g, (0..g.len()).map(|i| {
            let [x, y, z] = g.coords(i);
            ((off..off + 3).contains(&x) && (2..5).contains(&y) && (2..5).contains(&z)) as u8
        }).collect()).unwrap()
    };
    let (m0, m3) = (block(0), block(3));
    let empty = Mask::empty(g);
    ensure!(dice(&m0, &m0).map_err(err)? == 1.0, "dice(A, A) != 1");
    ensure!(dice(&m0, &m3).map_err(err)? == 0.0, "dice of disjoint masks != 0");
    ensure!(comd(&m0, &m0).map_err(err)? == Some(0.0), "comd(A, A) != 0");
    ensure!(comd(&m0, &m3).map_err(err)? == Some(4.5), "comd of a 3-voxel x shift != 4.5 mm");
    ensure!(comd(&m0, &empty).map_err(err)?.is_none(), "comd with an empty mask is defined");
    Ok(format!(
        "mae/mse/rmse/psnr/ssim/dice worst rel {worst:.1e} (<1e-6), comd abs {comd_worst:.1e} (<1e-9) on 4 random draws; trivial dice/comd cases exact"
    ))
}

// ---- 10 ------------------------------------------------------------------------------

fn overfit() -> Outcome {
    let n = 16;
    let epochs = 200;
    let mut cfg = RunConfig::desk();
    cfg.network.base_channels = 8;
    cfg.train.epochs = epochs;
    cfg.train.decay_start = epochs / 2;
    cfg.train.lr = 5e-3;
    cfg.validate().map_err(err)?;
    let corpus = prepare_corpus(&cfg).map_err(err)?;
    let params = DatasetParams::from_config(&cfg).map_err(err)?;
    let samples = (0..n).map(|i| generate_sample(&corpus, &params, i)).collect::<anyhow::Result<Vec<_>>>().map_err(err)?;
    let voxel = samples[0].volume.grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);

    let start = Instant::now();
    let model = build(&cfg.network_config().map_err(err)?, cfg.seed).map_err(err)?;
    let (best, log) = train(model, samples.as_slice(), samples.as_slice(), &cfg.train_config().map_err(err)?, &mut NoHooks).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let agg = evaluate_suite(&best, samples.as_slice(), "train").map_err(err)?.aggregate();
    let mse = agg.mse.ok_or("no mse")?.mean;
    let dice = agg.dice.ok_or("no dice")?.mean;
    let comd = agg.comd_mm.ok_or("no comd")?.mean;
    let steps = epochs * n;
    let detail = format!(
        "{} volumes, base 8, {n} samples, {steps} steps: train MSE {mse:.2e} (<1e-3), DICE {dice:.3} (>0.90), COMD {comd:.3} mm (<{voxel} mm), best epoch {}, {secs:.0}s (<1800s)",
        cfg.dataset.output_size,
        log.best_epoch
    );
    ensure!(steps >= 300 && mse < 1e-3 && dice > 0.9 && comd < voxel && secs < 1800.0, "{detail}");
    Ok(detail)
}

// ---- 11 ------------------------------------------------------------------------------

fn harness_shape() -> Outcome {
    let cfg = tiny_config(12);
    let dir = tempfile::tempdir().map_err(err)?;
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    cmd_synth(&cfg, &data).map_err(err)?;
    cmd_train(&cfg, &data, &run, false).map_err(err)?;
    let ckpt = run.join(CHECKPOINT_FILE);

    let plain = cmd_eval(&cfg, &data, &ckpt, Split::Test, AngleMode::Random, &run).map_err(err)?;
    let sweep = cmd_noise_sweep(&cfg, &data, &ckpt, &run).map_err(err)?;
    let sigmas: Vec<f64> = sweep.iter().map(|(s, _)| *s).collect();
    ensure!(sigmas == [0.0, 0.01, 0.02, 0.05], "noise levels {sigmas:?}");
    let strip = |rows: &[monoview_core::metrics::EvalRow]| {
        rows.iter().cloned().map(|mut r| {
            r.tag.clear();
            r
        }).collect::<Vec<_>>()
    };
    ensure!(strip(&sweep[0].1.rows) == strip(&plain.rows), "sigma-0 row differs from plain evaluation");
    let table = noise_table_csv(&sweep).map_err(err)?;
    ensure!(table.lines().count() == 5, "noise table has {} lines", table.lines().count());

    let rows = cmd_ablate(&cfg, &data, &run.join("ablate"), false).map_err(err)?;
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    ensure!(names == ABLATION_NAMES, "ablation rows {names:?}");
    let csv = ablation_table_csv(&rows).map_err(err)?;
    let lines: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    ensure!(lines.len() == 5, "ablation table has {} lines", lines.len());
    let dice_col = lines[0].iter().position(|&h| h == "dice_mean").ok_or("no dice column")?;
    let seg_cols = dice_col..lines[0].len();
    ensure!(lines[1][seg_cols.clone()].iter().all(|c| c.is_empty()), "baseline row has segmentation values");
    ensure!(lines[2..].iter().all(|l| l[seg_cols.clone()].iter().all(|c| !c.is_empty())), "segmentation rows lack values");

    let manifest = Manifest::load(&data).map_err(err)?;
    let proj = data.join(&manifest.split(Split::Test)[0].proj_path);
    let inf = cmd_infer(&cfg, &ckpt, &proj, 6, &run).map_err(err)?;
    ensure!(inf.latencies_ms.len() == 5 && inf.median_ms > 0.0, "latency report {:?}", inf.latencies_ms);
    Ok(format!(
        "noise sweep sigmas {sigmas:?} with sigma-0 = plain eval; ablation rows {names:?}, baseline seg columns empty; infer latency median {:.1} ms, p95 {:.1} ms over 5 passes (reported, not gated)",
        inf.median_ms, inf.p95_ms
    ))
}
