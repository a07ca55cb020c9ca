//! Dual-branch single-projection network.
//!
//! A 2D residual encoder turns the projection into a feature pyramid; the
//! bottleneck is lifted to 3D and two 3D decoders (reconstruction and
//! segmentation) up-sample it back to the input resolution. Skip features
//! from the encoder pass through attention calibrators that compress their
//! channels, apply channel self-attention and replicate them along depth.
//! The segmentation output is optionally refined by an uncertainty-weighted
//! local convolution.
//!
//! Every function here records onto a [`Tape`], so the same code serves
//! training (`f32`) and 64-bit gradient checks.

mod config;

pub use config::{BottleneckMode, NetworkConfig};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Network configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Recon,
    Seg,
}

impl Branch {
    fn key(self) -> &'static str {
        match self {
            Branch::Recon => "recon",
            Branch::Seg => "seg",
        }
    }
}

/// Encoder outputs: `levels[l]` is the level-`l+1` map `[C, S/2^(l+1), S/2^(l+1)]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub input: Var,
    pub levels: Vec<Var>,
    pub bottleneck: Var,
}

/// Decoder output: last feature map and the head output.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    pub features: Var,
    pub output: Var,
}

/// Everything [`forward`] produces.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// `[1,S,S,S]` in [0, 1].
    pub recon: Var,
    /// Final `[2,S,S,S]` probabilities, channel 0 = tumor.
    pub seg: Option<Var>,
    /// Probabilities before refinement (equal to `seg` when refinement is off).
    pub seg_initial: Option<Var>,
}

// ---- construction -------------------------------------------------------

fn name_hash(name: &str) -> u64 {
    // FNV-1a: per-parameter streams keep shared weights identical across
    // configurations that add or remove other submodules.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    seed: u64,
}

impl Builder<'_> {
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
        self.store.insert(name, Tensor::new(shape, data)?)?;
        Ok(())
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value))?;
        Ok(())
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.constant(&format!("{prefix}.g"), &[c], 1.0)?;
        self.constant(&format!("{prefix}.b"), &[c], 0.0)
    }
}

/// Builds a model with seeded fan-in-scaled uniform weights, unit norm
/// scales and zero shifts/biases.
pub fn build(config: &NetworkConfig, seed: u64) -> Result<ModelState<f32>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        seed,
    };
    let s = config.input_size;
    let mut cin = 1;
    for l in 1..=config.levels {
        let c = config.encoder_channels(l);
        let p = format!("enc.{l}");
        b.uniform(&format!("{p}.conv1.w"), &[c, cin, 3, 3], cin * 9)?;
        let normed = config.norm_at(s >> l);
        if normed {
            b.norm(&format!("{p}.norm1"), c)?;
        }
        b.uniform(&format!("{p}.conv2.w"), &[c, c, 3, 3], c * 9)?;
        if normed {
            b.norm(&format!("{p}.norm2"), c)?;
        }
        b.uniform(&format!("{p}.skip.w"), &[c, cin, 1, 1], cin)?;
        cin = c;
    }
    if config.enable_aec {
        for j in 0..config.levels {
            let (c2, c3, size) = (config.aec_source_channels(j), config.decoder_channels(j + 1), config.decoder_size(j));
            let p = format!("aec.{j}");
            b.uniform(&format!("{p}.conv.w"), &[c3, c2, 3, 3], c2 * 9)?;
            if config.aec_norm && config.norm_at(size) {
                b.norm(&format!("{p}.norm"), c3)?;
            }
            b.constant(&format!("{p}.gamma"), &[1], config.attention_residual_init as f32)?;
        }
    }
    let mut branches = alloc::vec![Branch::Recon];
    if config.enable_seg_branch {
        branches.push(Branch::Seg);
    }
    for br in &branches {
        for j in 0..config.levels {
            let (ci, co) = (config.decoder_channels(j), config.decoder_channels(j + 1));
            let p = format!("dec.{}.{j}", br.key());
            b.uniform(&format!("{p}.up.w"), &[ci, co, 4, 4, 4], ci * 8)?;
            b.norm(&format!("{p}.up.norm"), co)?;
            let cc = config.decoder_conv_inputs(j);
            b.uniform(&format!("{p}.conv.w"), &[co, cc, 3, 3, 3], cc * 27)?;
            b.norm(&format!("{p}.norm"), co)?;
        }
    }
    let cl = config.decoder_channels(config.levels);
    b.uniform("head.recon.w", &[1, cl, 1, 1, 1], cl)?;
    b.constant("head.recon.b", &[1], 0.0)?;
    if config.enable_seg_branch {
        b.uniform("head.seg.w", &[2, cl, 1, 1, 1], cl)?;
        b.constant("head.seg.b", &[2], 0.0)?;
    }
    if config.enable_ure {
        b.uniform("ure.conv.w", &[cl, cl, 3, 3, 3], cl * 27)?;
        b.constant("ure.conv.b", &[cl], 0.0)?;
        b.uniform("ure.head.w", &[2, cl, 1, 1, 1], cl)?;
        b.constant("ure.head.b", &[2], 0.0)?;
    }
    Ok(ModelState {
        config: config.clone(),
        params: store,
    })
}

/// Names of the parameters belonging to the segmentation branch, its head
/// and the refinement module.
pub fn is_seg_param(name: &str) -> bool {
    name.starts_with("dec.seg.") || name.starts_with("head.seg.") || name.starts_with("ure.")
}

// ---- forward pieces -------------------------------------------------------

fn p<T: Scalar>(tape: &mut Tape<T>, model: &ModelState<T>, name: &str) -> Result<Var> {
    tape.param(&model.params, name)
}

fn has<T: Scalar>(model: &ModelState<T>, name: &str) -> bool {
    model.params.index_of(name).is_some()
}

/// Instance norm with the named scale/shift when present, otherwise identity.
fn norm<T: Scalar>(tape: &mut Tape<T>, model: &ModelState<T>, x: Var, prefix: &str) -> Result<Var> {
    let g = format!("{prefix}.g");
    if !has(model, &g) {
        return Ok(x);
    }
    let gv = p(tape, model, &g)?;
    let bv = p(tape, model, &format!("{prefix}.b"))?;
    tape.instance_norm(x, gv, bv, NORM_EPS)
}

fn residual_block<T: Scalar>(tape: &mut Tape<T>, model: &ModelState<T>, x: Var, l: usize) -> Result<Var> {
    let pre = format!("enc.{l}");
    let w1 = p(tape, model, &format!("{pre}.conv1.w"))?;
    let h = tape.conv2d(x, w1, 2, 1)?;
    let h = norm(tape, model, h, &format!("{pre}.norm1"))?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let w2 = p(tape, model, &format!("{pre}.conv2.w"))?;
    let h = tape.conv2d(h, w2, 1, 1)?;
    let h = norm(tape, model, h, &format!("{pre}.norm2"))?;
    let ws = p(tape, model, &format!("{pre}.skip.w"))?;
    let skip = tape.conv2d(x, ws, 2, 0)?;
    let sum = tape.add(h, skip)?;
    Ok(tape.leaky_relu(sum, LEAKY_SLOPE))
}

/// Runs the 2D encoder on a `[1,S,S]` projection.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, model: &ModelState<T>, projection: Var) -> Result<FeaturePyramid> {
    let s = model.config.input_size;
    if tape.shape(projection) != [1, s, s] {
        return Err(Error::shape("encode", tape.shape(projection), &[1, s, s]));
    }
    let mut levels = Vec::with_capacity(model.config.levels);
    let mut x = projection;
    for l in 1..=model.config.levels {
        x = residual_block(tape, model, x, l)?;
        levels.push(x);
    }
    Ok(FeaturePyramid {
        input: projection,
        levels,
        bottleneck: x,
    })
}

/// Channel-to-depth reshape `[C,h,w] -> [C/h, h, h, w]`: channel `c·h + d`
/// becomes depth slice `d` of channel `c`.
pub fn bottleneck_2d_to_3d<T: Scalar>(tape: &mut Tape<T>, feature: Var) -> Result<Var> {
    let s = tape.shape(feature).to_vec();
    if s.len() != 3 || s[1] != s[2] || s[0] % s[1] != 0 {
        return Err(Error::invalid(
            "bottleneck_2d_to_3d",
            format!("needs [C,h,h] with C divisible by h, got {s:?}"),
        ));
    }
    tape.reshape(feature, &[s[0] / s[1], s[1], s[1], s[2]])
}

/// Lifts the bottleneck according to the configured mode.
pub fn lift_bottleneck<T: Scalar>(tape: &mut Tape<T>, config: &NetworkConfig, feature: Var) -> Result<Var> {
    match config.bottleneck {
        BottleneckMode::Reshape => bottleneck_2d_to_3d(tape, feature),
        BottleneckMode::Replicate => {
            let h = tape.shape(feature)[1];
            tape.repeat_depth(feature, h)
        }
    }
}

/// Channel self-attention with a learnable residual gate:
/// `gamma · softmax_rows(X Xᵀ) X + X` on `X = feature.reshape(C, H·W)`.
pub fn channel_attention<T: Scalar>(tape: &mut Tape<T>, feature: Var, gamma: Var) -> Result<Var> {
    let s = tape.shape(feature).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("channel_attention", format!("expects [C,H,W], got {s:?}")));
    }
    let x = tape.reshape(feature, &[s[0], s[1] * s[2]])?;
    let xt = tape.transpose(x)?;
    let affinity = tape.matmul(x, xt)?;
    let a = tape.softmax_rows(affinity)?;
    let attended = tape.matmul(a, x)?;
    let gated = tape.scale_by(attended, gamma)?;
    let out = tape.add(gated, x)?;
    tape.reshape(out, &s)
}

/// Calibrator `j` (decoder block `j`): compress, attend, replicate along depth.
pub fn aec_calibrate<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelState<T>,
    j: usize,
    feature: Var,
    depth: usize,
) -> Result<Var> {
    let s = tape.shape(feature).to_vec();
    if s.len() != 3 || s[1] != s[2] || depth != s[1] {
        return Err(Error::invalid(
            "aec_calibrate",
            format!("target must be cubic: feature {s:?}, depth {depth}"),
        ));
    }
    let pre = format!("aec.{j}");
    let w = p(tape, model, &format!("{pre}.conv.w"))?;
    let mut x = tape.conv2d(feature, w, 1, 1)?;
    if model.config.aec_norm {
        x = norm(tape, model, x, &format!("{pre}.norm"))?;
        x = tape.leaky_relu(x, LEAKY_SLOPE);
    }
    let gamma = p(tape, model, &format!("{pre}.gamma"))?;
    let attended = channel_attention(tape, x, gamma)?;
    tape.repeat_depth(attended, depth)
}

/// Calibrated skips for every decoder block (empty when disabled).
pub fn calibrate_skips<T: Scalar>(tape: &mut Tape<T>, model: &ModelState<T>, pyr: &FeaturePyramid) -> Result<Vec<Var>> {
    let cfg = &model.config;
    if !cfg.enable_aec {
        return Ok(Vec::new());
    }
    (0..cfg.levels)
        .map(|j| {
            let src = cfg.aec_source_level(j);
            let feature = if src == 0 { pyr.input } else { pyr.levels[src - 1] };
            aec_calibrate(tape, model, j, feature, cfg.decoder_size(j))
        })
        .collect()
}

/// One decoder branch from the lifted bottleneck to its head.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelState<T>,
    lifted: Var,
    skips: &[Var],
    branch: Branch,
) -> Result<Decoded> {
    let cfg = &model.config;
    if branch == Branch::Seg && !cfg.enable_seg_branch {
        return Err(Error::Config("segmentation branch is disabled".into()));
    }
    if cfg.enable_aec && skips.len() != cfg.levels {
        return Err(Error::invalid(
            "decode",
            format!("expected {} calibrated skips, got {}", cfg.levels, skips.len()),
        ));
    }
    let mut x = lifted;
    for j in 0..cfg.levels {
        let pre = format!("dec.{}.{j}", branch.key());
        let w = p(tape, model, &format!("{pre}.up.w"))?;
        x = tape.conv_transpose3d(x, w, 2, 1, 0)?;
        x = norm(tape, model, x, &format!("{pre}.up.norm"))?;
        x = tape.leaky_relu(x, LEAKY_SLOPE);
        if cfg.enable_aec {
            x = tape.concat(&[x, skips[j]])?;
        }
        let w = p(tape, model, &format!("{pre}.conv.w"))?;
        x = tape.conv3d(x, w, 1, 1)?;
        x = norm(tape, model, x, &format!("{pre}.norm"))?;
        x = tape.leaky_relu(x, LEAKY_SLOPE);
    }
    let head = format!("head.{}", branch.key());
    let logits = point_head(tape, model, x, &head)?;
    let output = match branch {
        Branch::Recon => tape.sigmoid(logits),
        Branch::Seg => tape.softmax_channel(logits)?,
    };
    Ok(Decoded { features: x, output })
}

/// 1×1×1 convolution plus bias.
fn point_head<T: Scalar>(tape: &mut Tape<T>, model: &ModelState<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = p(tape, model, &format!("{prefix}.w"))?;
    let b = p(tape, model, &format!("{prefix}.b"))?;
    let y = tape.conv3d(x, w, 1, 0)?;
    tape.channel_bias(y, b)
}

/// Refines segmentation probabilities by an uncertainty-weighted local
/// convolution with a residual path and a separate 2-channel head.
pub fn ure_refine<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelState<T>,
    features: Var,
    probs: Var,
) -> Result<Var> {
    let m1 = tape.select_channel(probs, 0)?;
    let m2 = tape.select_channel(probs, 1)?;
    let u = tape.uncertainty_map(m1, m2)?;
    let weighted = tape.mul_broadcast(features, u)?;
    let w = p(tape, model, "ure.conv.w")?;
    let b = p(tape, model, "ure.conv.b")?;
    let conv = tape.conv3d(weighted, w, 1, 1)?;
    let conv = tape.channel_bias(conv, b)?;
    let refined = tape.add(conv, features)?;
    let logits = point_head(tape, model, refined, "ure.head")?;
    tape.softmax_channel(logits)
}

/// Full forward pass on a `[1,S,S]` projection tensor.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, model: &ModelState<T>, projection: &Tensor<T>) -> Result<Outputs> {
    let x = tape.constant(projection.clone());
    forward_var(tape, model, x)
}

pub fn forward_var<T: Scalar>(tape: &mut Tape<T>, model: &ModelState<T>, x: Var) -> Result<Outputs> {
    let cfg = &model.config;
    let pyr = encode(tape, model, x)?;
    let lifted = lift_bottleneck(tape, cfg, pyr.bottleneck)?;
    let skips = calibrate_skips(tape, model, &pyr)?;
    let recon = decode(tape, model, lifted, &skips, Branch::Recon)?.output;
    if !cfg.enable_seg_branch {
        return Ok(Outputs {
            recon,
            seg: None,
            seg_initial: None,
        });
    }
    let seg = decode(tape, model, lifted, &skips, Branch::Seg)?;
    let fin = if cfg.enable_ure {
        ure_refine(tape, model, seg.features, seg.output)?
    } else {
        seg.output
    };
    Ok(Outputs {
        recon,
        seg: Some(fin),
        seg_initial: Some(seg.output),
    })
}

/// Plain values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub recon: Tensor<f32>,
    pub seg: Option<Tensor<f32>>,
}

/// Volumes are stored z-major (`[z][y][x]`); the network works on
/// `[D][H][W] = [x][z][y]`, so that `H, W` line up with the detector rows
/// (world z) and columns (world y at 0°) and depth runs along the 0° beam.
/// Both layouts are per channel over `channels` cubes of edge `n`.
pub fn volume_to_network<T: Copy>(data: &[T], n: usize) -> Vec<T> {
    permute_cubes(data, n, |x, y, z| (x * n + z) * n + y, |x, y, z| (z * n + y) * n + x)
}

/// Inverse of [`volume_to_network`].
pub fn network_to_volume<T: Copy>(data: &[T], n: usize) -> Vec<T> {
    permute_cubes(data, n, |x, y, z| (z * n + y) * n + x, |x, y, z| (x * n + z) * n + y)
}

fn permute_cubes<T: Copy>(
    data: &[T],
    n: usize,
    dst: impl Fn(usize, usize, usize) -> usize,
    src: impl Fn(usize, usize, usize) -> usize,
) -> Vec<T> {
    let cube = n * n * n;
    assert!(cube > 0 && data.len() % cube == 0, "data is not a whole number of {n}^3 cubes");
    let mut out = data.to_vec();
    for (o, d) in out.chunks_exact_mut(cube).zip(data.chunks_exact(cube)) {
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    o[dst(x, y, z)] = d[src(x, y, z)];
                }
            }
        }
    }
    out
}

impl ModelState<f32> {
    /// Inference on a row-major `S×S` image; outputs are in volume (z-major) layout.
    pub fn predict(&self, image: &[f32]) -> Result<Prediction> {
        let s = self.config.input_size;
        let x = Tensor::new(&[1, s, s], image.to_vec())?;
        let mut tape = Tape::new();
        let out = forward(&mut tape, self, &x)?;
        let to_volume = |v: Var| {
            let t = tape.value(v);
            Tensor::new(t.shape(), network_to_volume(t.data(), s))
        };
        Ok(Prediction {
            recon: to_volume(out.recon)?,
            seg: out.seg.map(to_volume).transpose()?,
        })
    }
}

impl<T: Scalar> ModelState<T> {
    /// Parameter names sorted into the submodules they belong to.
    pub fn submodule_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .params
            .names()
            .iter()
            .map(|n| {
                let mut parts = n.split('.');
                let a = parts.next().unwrap_or_default();
                let b = parts.next().unwrap_or_default();
                format!("{a}.{b}")
            })
            .collect();
        out.dedup();
        out
    }
}
