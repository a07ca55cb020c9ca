use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{conv_backward_input, conv_backward_weight, conv_forward, ConvGeom};
use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    /// `geom` describes the strided convolution whose adjoint this is.
    ConvTranspose {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleByVar {
        x: Var,
        s: Var,
    },
    Square(Var),
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid(Var),
    SoftmaxChannel(Var),
    SoftmaxRows(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    RepeatDepth(Var),
    MulBroadcast {
        x: Var,
        m: Var,
    },
    SelectChannel {
        x: Var,
        channel: usize,
    },
    Uncertainty {
        m1: Var,
        m2: Var,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        target: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Upper clamp of the confidence value inside the uncertainty map.
pub const UNCERTAINTY_CLAMP_HI: f64 = 1.0 - 1e-6;
/// Probability clamp applied before the logarithms of the binary cross entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Records operations on [`Var`]s and replays them in reverse.
///
/// Gradients of leaves accumulate across repeated [`Tape::backward`] calls
/// until [`Tape::zero_grad`] is called.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: BTreeMap<usize, Vec<T>>,
    params: BTreeMap<usize, Var>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter as a differentiable leaf. Binding the same
    /// parameter twice returns the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::UnknownParameter(name.into()))?;
        if let Some(&v) = self.params.get(&idx) {
            return Ok(v);
        }
        let v = self.leaf(store.params()[idx].value.clone());
        self.nodes[v.0].param = Some(idx);
        self.params.insert(idx, v);
        Ok(v)
    }

    /// Gradients of every bound parameter, keyed by store index.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|(&idx, v)| self.leaf_grads.get(&v.0).map(|g| (idx, g.as_slice())))
    }

    // ---- convolutions -------------------------------------------------

    /// 2D cross-correlation: `x[C_in,H,W]`, `w[C_out,C_in,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geom = self.conv_geom("conv2d", &xs, &ws, [1, ws[2], ws[3]], stride, padding, true)?;
        self.conv_nd(x, w, geom)
    }

    /// 3D cross-correlation: `x[C_in,D,H,W]`, `w[C_out,C_in,k,k,k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape("conv3d", &xs, &ws));
        }
        let geom = self.conv_geom("conv3d", &xs, &ws, [ws[2], ws[3], ws[4]], stride, padding, false)?;
        self.conv_nd(x, w, geom)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_geom(
        &self,
        op: &'static str,
        xs: &[usize],
        ws: &[usize],
        kernel: [usize; 3],
        stride: usize,
        padding: usize,
        planar: bool,
    ) -> Result<ConvGeom> {
        if xs[0] != ws[1] {
            return Err(Error::shape(op, xs, ws));
        }
        if kernel[2] % 2 == 0 {
            return Err(Error::invalid(op, format!("kernel size {} must be odd", kernel[2])));
        }
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        let input = if planar { [1, xs[1], xs[2]] } else { [xs[1], xs[2], xs[3]] };
        let (stride3, pad3) = if planar {
            ([1, stride, stride], [0, padding, padding])
        } else {
            ([stride; 3], [padding; 3])
        };
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = ConvGeom::conv_extent(input[a], kernel[a], stride3[a], pad3[a])
                .ok_or_else(|| Error::shape(op, xs, ws))?;
        }
        Ok(ConvGeom {
            cin: ws[1],
            cout: ws[0],
            input,
            output,
            kernel,
            stride: stride3,
            pad: pad3,
        })
    }

    fn conv_nd(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let mut out = vec![T::zero(); geom.cout * geom.out_vol()];
        conv_forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        let planar = self.shape(x).len() == 3;
        let shape: Vec<usize> = if planar {
            vec![geom.cout, geom.output[1], geom.output[2]]
        } else {
            vec![geom.cout, geom.output[0], geom.output[1], geom.output[2]]
        };
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv { x, w, geom }, rg))
    }

    /// 3D transposed convolution: `x[C_in,D,H,W]`, `w[C_in,C_out,k,k,k]`.
    /// Each extent maps `n -> (n-1)*stride - 2*padding + k + output_padding`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || xs[0] != ws[0] {
            return Err(Error::shape("conv_transpose3d", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose3d", "stride must be positive"));
        }
        if output_padding >= stride {
            return Err(Error::invalid(
                "conv_transpose3d",
                format!("output_padding {output_padding} must be smaller than stride {stride}"),
            ));
        }
        let k = ws[2];
        let mut output = [0usize; 3];
        for a in 0..3 {
            let full = (xs[a + 1] - 1) * stride + k + output_padding;
            if full < 2 * padding + 1 {
                return Err(Error::invalid(
                    "conv_transpose3d",
                    format!("padding {padding} leaves an empty output for input {xs:?}"),
                ));
            }
            output[a] = full - 2 * padding;
        }
        // The adjoint convolution reads the transposed output and writes the transposed input.
        let geom = ConvGeom {
            cin: ws[1],
            cout: ws[0],
            input: output,
            output: [xs[1], xs[2], xs[3]],
            kernel: [k; 3],
            stride: [stride; 3],
            pad: [padding; 3],
        };
        let mut out = vec![T::zero(); geom.cin * geom.in_vol()];
        conv_backward_input(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        let shape = [ws[1], output[0], output[1], output[2]];
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConvTranspose { x, w, geom }, rg))
    }

    // ---- normalization and activations --------------------------------

    /// Per-channel standardization over all trailing axes followed by a
    /// learnable per-channel scale `gamma[C]` and shift `beta[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::invalid("instance_norm", "input needs a channel axis and spatial axes"));
        }
        let c = xs[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("instance_norm", &xs, self.shape(gamma)));
        }
        let n = self.value(x).numel() / c;
        let eps = T::from_f64(eps);
        let nt = T::from_f64(n as f64);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut means = vec![T::zero(); c];
        let mut inv = vec![T::zero(); c];
        for ch in 0..c {
            let xc = &xv[ch * n..(ch + 1) * n];
            let mean = xc.iter().fold(T::zero(), |a, &v| a + v) / nt;
            let var = xc.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nt;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(xc) {
                *o = gv[ch] * ((v - mean) * is) + bv[ch];
            }
            means[ch] = mean;
            inv[ch] = is;
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&xs, out)?,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv,
            },
            rg,
        ))
    }

    /// Adds `b[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if self.shape(b) != [xs[0]] {
            return Err(Error::shape("channel_bias", &xs, self.shape(b)));
        }
        let n = self.value(x).numel() / xs[0];
        let bv = self.value(b).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i / n])
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new(&xs, out)?, Op::ChannelBias { x, b }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::from_f64(slope);
        let value = self.map(x, |v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Softmax across axis 0 at every trailing location, with max subtraction.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[0] < 2 {
            return Err(Error::invalid("softmax_channel", format!("needs at least 2 channels, got {xs:?}")));
        }
        let c = xs[0];
        let n = self.value(x).numel() / c;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for l in 0..n {
            let mut m = xv[l];
            for ch in 1..c {
                m = m.max(xv[ch * n + l]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (xv[ch * n + l] - m).exp();
                out[ch * n + l] = e;
                s += e;
            }
            for ch in 0..c {
                out[ch * n + l] /= s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&xs, out)?, Op::SoftmaxChannel(x), rg))
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::invalid("softmax_rows", format!("expects a matrix, got {xs:?}")));
        }
        let cols = xs[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&xs, out)?, Op::SoftmaxRows(x), rg))
    }

    // ---- elementwise --------------------------------------------------

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| f(a)).collect(),
        }
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        Ok(Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let v = self.map(x, |a| a * s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let v = self.map(x, |a| a * sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(v, Op::ScaleByVar { x, s }, rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a * a);
        let rg = self.rg(x);
        self.push(v, Op::Square(x), rg)
    }

    // ---- linear algebra and data movement -----------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::shape("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::invalid("transpose", format!("expects a matrix, got {xs:?}")));
        }
        let out = transpose_raw(self.value(x).data(), xs[0], xs[1]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[xs[1], xs[0]], out)?, Op::Transpose(x), rg))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut channels = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            channels += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// `[C,H,W] -> [C,depth,H,W]` by stacking identical copies.
    pub fn repeat_depth(&mut self, x: Var, depth: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || depth == 0 {
            return Err(Error::invalid("repeat_depth", format!("expects [C,H,W], got {xs:?}")));
        }
        let plane = xs[1] * xs[2];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() * depth);
        for ch in 0..xs[0] {
            for _ in 0..depth {
                out.extend_from_slice(&xv[ch * plane..(ch + 1) * plane]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[xs[0], depth, xs[1], xs[2]], out)?, Op::RepeatDepth(x), rg))
    }

    /// `x[C,...] * m[1,...]` with `m` broadcast over channels.
    pub fn mul_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let (xs, ms) = (self.shape(x).to_vec(), self.shape(m).to_vec());
        if ms.is_empty() || ms[0] != 1 || xs[1..] != ms[1..] {
            return Err(Error::shape("mul_broadcast", &xs, &ms));
        }
        let n = self.value(m).numel();
        let mv = self.value(m).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mv[i % n])
            .collect();
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(Tensor::new(&xs, out)?, Op::MulBroadcast { x, m }, rg))
    }

    /// `x[C,...] -> x[channel:channel+1,...]`.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if channel >= xs[0] {
            return Err(Error::invalid("select_channel", format!("channel {channel} out of {xs:?}")));
        }
        let n = self.value(x).numel() / xs[0];
        let out = self.value(x).data()[channel * n..(channel + 1) * n].to_vec();
        let mut shape = xs.clone();
        shape[0] = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SelectChannel { x, channel }, rg))
    }

    /// Confidence map `1 - exp(1 - m/(1-m))` with `m = max(m1, m2)` clamped
    /// to `[0.5, 1 - 1e-6]`.
    pub fn uncertainty_map(&mut self, m1: Var, m2: Var) -> Result<Var> {
        let v = self.zip("uncertainty_map", m1, m2, |a, b| uncertainty(a.max(b)))?;
        let rg = self.rg(m1) || self.rg(m2);
        Ok(self.push(v, Op::Uncertainty { m1, m2 }, rg))
    }

    // ---- reductions and losses ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &b| a + b) / T::from_f64(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean binary cross entropy of probabilities `p` against labels in {0,1}.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        if self.value(p).numel() != target.numel() {
            return Err(Error::shape("bce", self.shape(p), target.shape()));
        }
        let lo = T::from_f64(BCE_CLAMP);
        let hi = T::one() - lo;
        let pv = self.value(p).data();
        let mut acc = T::zero();
        for (&pi, &yi) in pv.iter().zip(target.data()) {
            let q = pi.max(lo).min(hi);
            acc += -(yi * q.ln() + (T::one() - yi) * (T::one() - q).ln());
        }
        let loss = acc / T::from_f64(pv.len() as f64);
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse pass -------------------------------------------------

    /// Propagates `d loss / d leaf` into every differentiable leaf,
    /// adding to whatever previous passes left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            for (v, gi) in self.vjp(i, &g) {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        let want = |v: Var| self.rg(v);
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, geom } => {
                if want(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    conv_backward_input(geom, g, self.value(*w).data(), &mut gx);
                    res.push((*x, gx));
                }
                if want(*w) {
                    let mut gw = vec![T::zero(); self.value(*w).numel()];
                    conv_backward_weight(geom, g, self.value(*x).data(), &mut gw);
                    res.push((*w, gw));
                }
            }
            Op::ConvTranspose { x, w, geom } => {
                if want(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    conv_forward(geom, g, self.value(*w).data(), &mut gx);
                    res.push((*x, gx));
                }
                if want(*w) {
                    let mut gw = vec![T::zero(); self.value(*w).numel()];
                    conv_backward_weight(geom, self.value(*x).data(), g, &mut gw);
                    res.push((*w, gw));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let c = mean.len();
                let n = xv.len() / c;
                let nt = T::from_f64(n as f64);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for ch in 0..c {
                    let r = ch * n..(ch + 1) * n;
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for (&xi, &gi) in xv[r.clone()].iter().zip(&g[r.clone()]) {
                        let xh = (xi - mu) * is;
                        gg[ch] += gi * xh;
                        gb[ch] += gi;
                        let d = gi * gv[ch];
                        sum_d += d;
                        sum_dx += d * xh;
                    }
                    for ((o, &xi), &gi) in gx[r.clone()].iter_mut().zip(&xv[r.clone()]).zip(&g[r]) {
                        let xh = (xi - mu) * is;
                        let d = gi * gv[ch];
                        *o = is / nt * (nt * d - sum_d - xh * sum_dx);
                    }
                }
                if want(*x) {
                    res.push((*x, gx));
                }
                if want(*gamma) {
                    res.push((*gamma, gg));
                }
                if want(*beta) {
                    res.push((*beta, gb));
                }
            }
            Op::ChannelBias { x, b } => {
                if want(*x) {
                    res.push((*x, g.to_vec()));
                }
                if want(*b) {
                    let c = self.value(*b).numel();
                    let n = g.len() / c;
                    let gb = (0..c)
                        .map(|ch| g[ch * n..(ch + 1) * n].iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    res.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    res.push((*a, g.to_vec()));
                }
                if want(*b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    res.push((*a, g.to_vec()));
                }
                if want(*b) {
                    res.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if want(*a) {
                    res.push((*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect()));
                }
                if want(*b) {
                    res.push((*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect()));
                }
            }
            Op::Scale(x, s) => res.push((*x, g.iter().map(|&v| v * *s).collect())),
            Op::ScaleByVar { x, s } => {
                let sv = self.value(*s).data()[0];
                if want(*x) {
                    res.push((*x, g.iter().map(|&v| v * sv).collect()));
                }
                if want(*s) {
                    let xv = self.value(*x).data();
                    let d = g.iter().zip(xv).fold(T::zero(), |a, (&gi, &xi)| a + gi * xi);
                    res.push((*s, vec![d]));
                }
            }
            Op::Square(x) => {
                let two = T::from_f64(2.0);
                let xv = self.value(*x).data();
                res.push((*x, g.iter().zip(xv).map(|(&gi, &xi)| two * xi * gi).collect()));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                res.push((
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { gi * *slope })
                        .collect(),
                ));
            }
            Op::Sigmoid(x) => {
                res.push((
                    *x,
                    g.iter().zip(out).map(|(&gi, &y)| gi * y * (T::one() - y)).collect(),
                ));
            }
            Op::SoftmaxChannel(x) => {
                let c = node.value.shape()[0];
                let n = out.len() / c;
                let mut gx = vec![T::zero(); out.len()];
                for l in 0..n {
                    let mut dot = T::zero();
                    for ch in 0..c {
                        dot += g[ch * n + l] * out[ch * n + l];
                    }
                    for ch in 0..c {
                        gx[ch * n + l] = out[ch * n + l] * (g[ch * n + l] - dot);
                    }
                }
                res.push((*x, gx));
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.shape()[1];
                let mut gx = vec![T::zero(); out.len()];
                for ((yr, gr), xr) in out.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &gi)| a + y * gi);
                    for ((o, &y), &gi) in xr.iter_mut().zip(yr).zip(gr) {
                        *o = y * (gi - dot);
                    }
                }
                res.push((*x, gx));
            }
            Op::Matmul(a, b) => {
                let (as_, bs) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (as_[0], as_[1], bs[1]);
                if want(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    res.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if want(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    res.push((*b, matmul_raw(&at, g, k, m, n)));
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                res.push((*x, transpose_raw(g, s[0], s[1])));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if want(p) {
                        res.push((p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::RepeatDepth(x) => {
                let s = node.value.shape();
                let (c, d, plane) = (s[0], s[1], s[2] * s[3]);
                let mut gx = vec![T::zero(); c * plane];
                for ch in 0..c {
                    let dst = &mut gx[ch * plane..(ch + 1) * plane];
                    for z in 0..d {
                        let src = &g[(ch * d + z) * plane..(ch * d + z + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                res.push((*x, gx));
            }
            Op::MulBroadcast { x, m } => {
                let mv = self.value(*m).data();
                let n = mv.len();
                if want(*x) {
                    res.push((*x, g.iter().enumerate().map(|(i, &gi)| gi * mv[i % n]).collect()));
                }
                if want(*m) {
                    let xv = self.value(*x).data();
                    let mut gm = vec![T::zero(); n];
                    for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                        gm[i % n] += gi * xi;
                    }
                    res.push((*m, gm));
                }
            }
            Op::SelectChannel { x, channel } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                let n = g.len();
                gx[channel * n..(channel + 1) * n].copy_from_slice(g);
                res.push((*x, gx));
            }
            Op::Uncertainty { m1, m2 } => {
                let (av, bv) = (self.value(*m1).data(), self.value(*m2).data());
                let mut ga = vec![T::zero(); g.len()];
                let mut gb = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    let d = g[i] * uncertainty_slope(av[i].max(bv[i]));
                    if av[i] >= bv[i] {
                        ga[i] = d;
                    } else {
                        gb[i] = d;
                    }
                }
                if want(*m1) {
                    res.push((*m1, ga));
                }
                if want(*m2) {
                    res.push((*m2, gb));
                }
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0] / T::from_f64(n as f64); n]));
            }
            Op::Bce { p, target } => {
                let pv = self.value(*p).data();
                let lo = T::from_f64(BCE_CLAMP);
                let hi = T::one() - lo;
                let scale = g[0] / T::from_f64(pv.len() as f64);
                let gp = pv
                    .iter()
                    .zip(target)
                    .map(|(&pi, &yi)| {
                        if pi < lo || pi > hi {
                            T::zero()
                        } else {
                            scale * ((T::one() - yi) / (T::one() - pi) - yi / pi)
                        }
                    })
                    .collect();
                res.push((*p, gp));
            }
        }
        res
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn uncertainty<T: Scalar>(m: T) -> T {
    let m = m.max(T::from_f64(0.5)).min(T::from_f64(UNCERTAINTY_CLAMP_HI));
    // Near the clamp the exponential falls below half an ulp of 1; keep the
    // result on the largest representable value below 1 instead of rounding up.
    let top = T::one() - T::epsilon() / T::from_f64(2.0);
    (T::one() - (T::one() - m / (T::one() - m)).exp()).min(top)
}

/// Derivative of [`uncertainty`] with respect to `m`, zero where the clamp is active.
#[inline]
fn uncertainty_slope<T: Scalar>(m: T) -> T {
    if m < T::from_f64(0.5) || m > T::from_f64(UNCERTAINTY_CLAMP_HI) {
        return T::zero();
    }
    let one_m = T::one() - m;
    (T::one() - m / one_m).exp() / (one_m * one_m)
}

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
