//! Independent 64-bit reference implementations used by the criteria.

use monoview_core::motion::DisplacementField;
use monoview_core::{Mask, Tape, Tensor, Var, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(r, n, -1.0, 1.0)).unwrap()
}

pub fn tensor_in(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(r, n, lo, hi)).unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Largest absolute difference relative to the largest reference magnitude.
pub fn max_rel(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tape gradient of `sum(f(inputs) * W)` for a fixed random `W` against
/// central differences; worst norm-relative error over all inputs.
pub fn grad_check<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        tensor(&mut rng(seed ^ 0x5eed), &shape)
    };
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        dot(tape.value(out).data(), weights.data())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("leaf gradient").to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, g) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *g = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        worst = worst.max(vec_rel_err(&analytic, &numeric));
    }
    worst
}

// ---- convolutions --------------------------------------------------------------

/// Nested-loop 3D cross-correlation; 2D inputs use depth 1.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &[f64],
    cin: usize,
    dims: [usize; 3],
    w: &[f64],
    cout: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 3]) {
    let o: [usize; 3] = core::array::from_fn(|a| (dims[a] + 2 * pad[a] - k[a]) / stride[a] + 1);
    let mut out = vec![0.0; cout * o[0] * o[1] * o[2]];
    for co in 0..cout {
        for od in 0..o[0] {
            for oh in 0..o[1] {
                for ow in 0..o[2] {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for kd in 0..k[0] {
                            for kh in 0..k[1] {
                                for kw in 0..k[2] {
                                    let id = (od * stride[0] + kd) as isize - pad[0] as isize;
                                    let ih = (oh * stride[1] + kh) as isize - pad[1] as isize;
                                    let iw = (ow * stride[2] + kw) as isize - pad[2] as isize;
                                    if id < 0 || ih < 0 || iw < 0 {
                                        continue;
                                    }
                                    let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                                    if id >= dims[0] || ih >= dims[1] || iw >= dims[2] {
                                        continue;
                                    }
                                    let xi = ((ci * dims[0] + id) * dims[1] + ih) * dims[2] + iw;
                                    let wi = (((co * cin + ci) * k[0] + kd) * k[1] + kh) * k[2] + kw;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[((co * o[0] + od) * o[1] + oh) * o[2] + ow] = acc;
                }
            }
        }
    }
    (out, o)
}

/// Scatter form of the transposed convolution with `w[C_in, C_out, k, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose(x: &[f64], cin: usize, dims: [usize; 3], w: &[f64], cout: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
    let o: [usize; 3] = core::array::from_fn(|a| (dims[a] - 1) * s + k - 2 * p);
    let mut out = vec![0.0; cout * o[0] * o[1] * o[2]];
    for ci in 0..cin {
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for wv in 0..dims[2] {
                    let xv = x[((ci * dims[0] + d) * dims[1] + h) * dims[2] + wv];
                    for co in 0..cout {
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let od = (d * s + kd) as isize - p as isize;
                                    let oh = (h * s + kh) as isize - p as isize;
                                    let ow = (wv * s + kw) as isize - p as isize;
                                    if od < 0 || oh < 0 || ow < 0 {
                                        continue;
                                    }
                                    let (od, oh, ow) = (od as usize, oh as usize, ow as usize);
                                    if od >= o[0] || oh >= o[1] || ow >= o[2] {
                                        continue;
                                    }
                                    let wi = (((ci * cout + co) * k + kd) * k + kh) * k + kw;
                                    out[((co * o[0] + od) * o[1] + oh) * o[2] + ow] += xv * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

// ---- elementwise and channel formulas --------------------------------------------

pub fn instance_norm(x: &Tensor<f64>, g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let c = x.shape()[0];
    let n = x.numel() / c;
    let mut out = Vec::with_capacity(x.numel());
    for (ch, xc) in x.data().chunks(n).enumerate() {
        let mean = xc.iter().sum::<f64>() / n as f64;
        let var = xc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        out.extend(xc.iter().map(|v| g[ch] * (v - mean) / (var + eps).sqrt() + b[ch]));
    }
    out
}

/// Softmax over axis 0 at each trailing position, computed from log-sum-exp.
pub fn softmax_axis0(x: &[f64], c: usize) -> Vec<f64> {
    let n = x.len() / c;
    let mut out = vec![0.0; x.len()];
    for l in 0..n {
        let m = (0..c).map(|ch| x[ch * n + l]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..c).map(|ch| (x[ch * n + l] - m).exp()).sum::<f64>().ln();
        for ch in 0..c {
            out[ch * n + l] = (x[ch * n + l] - lse).exp();
        }
    }
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

/// Confidence-weighting map `1 - exp(1 - m / (1 - m))` of the larger channel.
pub fn uncertainty(m1: f64, m2: f64) -> f64 {
    let m = m1.max(m2);
    1.0 - (1.0 - m / (1.0 - m)).exp()
}

pub fn bce(p: &[f64], y: &[f64]) -> f64 {
    let s: f64 = p.iter().zip(y).map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln()).sum();
    -s / p.len() as f64
}

// ---- motion model --------------------------------------------------------------------

/// Cyclic Jacobi eigensolver; eigenvectors are the columns of the result.
pub fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Descending eigenvalues of the centered Gram matrix of the fields; the
/// best rank-k residual (squared) is the sum of those past k.
pub fn gram_spectrum(fields: &[DisplacementField]) -> Vec<f64> {
    let n = fields.len();
    let d = fields[0].data.len();
    let mean: Vec<f64> = (0..d)
        .map(|i| fields.iter().map(|f| f.data[i] as f64).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| f.data.iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
        .collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            gram[i * n + j] = dot(&centered[i], &centered[j]);
        }
    }
    let (mut vals, _) = jacobi_eigen(gram, n);
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

// ---- metrics ------------------------------------------------------------------------------

/// (mae, mse) in 64-bit accumulation.
pub fn intensity(a: &Volume, b: &Volume) -> (f64, f64) {
    let n = a.data.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = x as f64 - y as f64;
        abs += d.abs();
        sq += d * d;
    }
    (abs / n, sq / n)
}

/// Direct (non-separable) 11³ Gaussian-window SSIM over every valid position.
pub fn ssim(a: &Volume, b: &Volume) -> f64 {
    let [nx, ny, nz] = a.grid.dims;
    let k = 11;
    let sigma: f64 = 1.5;
    let g1: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g1.iter().sum::<f64>().powi(3);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for z0 in 0..=nz - k {
        for y0 in 0..=ny - k {
            for x0 in 0..=nx - k {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dz in 0..k {
                    for dy in 0..k {
                        for dx in 0..k {
                            let w = g1[dx] * g1[dy] * g1[dz] / total;
                            let x = a.at(x0 + dx, y0 + dy, z0 + dz) as f64;
                            let y = b.at(x0 + dx, y0 + dy, z0 + dz) as f64;
                            mx += w * x;
                            my += w * y;
                            mxx += w * x * x;
                            myy += w * y * y;
                            mxy += w * x * y;
                        }
                    }
                }
                let (vx, vy, cxy) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

pub fn dice(a: &Mask, b: &Mask) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(&x, &y)| x == 1 && y == 1).count() as f64;
    let total = (a.data.iter().filter(|&&v| v == 1).count() + b.data.iter().filter(|&&v| v == 1).count()) as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

pub fn centroid(m: &Mask) -> Option<[f64; 3]> {
    let g = m.grid;
    let mut s = [0.0; 3];
    let mut n = 0.0;
    for z in 0..g.dims[2] {
        for y in 0..g.dims[1] {
            for x in 0..g.dims[0] {
                if m.data[g.index(x, y, z)] == 1 {
                    let p = g.world(x, y, z);
                    for a in 0..3 {
                        s[a] += p[a];
                    }
                    n += 1.0;
                }
            }
        }
    }
    (n > 0.0).then(|| s.map(|v| v / n))
}

pub fn centroid_distance(a: &Mask, b: &Mask) -> Option<f64> {
    let (ca, cb) = (centroid(a)?, centroid(b)?);
    Some((0..3).map(|i| (ca[i] - cb[i]).powi(2)).sum::<f64>().sqrt())
}
