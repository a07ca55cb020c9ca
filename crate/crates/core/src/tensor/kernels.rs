//! Convolution kernels over three spatial axes (im2col + GEMM).
//!
//! 2D convolutions run through the same code with a unit depth axis. The
//! transposed convolution is expressed through the adjoint of the strided
//! forward kernel, so both share one index map. Output depth planes are
//! processed in blocks so the column buffer stays bounded.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

/// Upper bound on column-buffer elements per block.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    pub fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extent of a strided cross-correlation, `None` when the padded
    /// input is smaller than the kernel.
    pub fn conv_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = n + 2 * pad;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    /// Output positions `o` for which `o * stride + k - pad` lands inside the input.
    #[inline]
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n_in, n_out) = (
            self.stride[axis],
            self.pad[axis],
            self.input[axis],
            self.output[axis],
        );
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if n_in + p > k {
            ((n_in - 1 + p - k) / s + 1).min(n_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k_vol()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    /// Output depth planes per column block.
    fn block_planes(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.output[0].max(1))
    }

    /// Calls `f(z0, z1)` for consecutive output-depth blocks.
    fn blocks(&self, mut f: impl FnMut(usize, usize)) {
        let step = self.block_planes();
        let mut z0 = 0;
        while z0 < self.output[0] {
            let z1 = (z0 + step).min(self.output[0]);
            f(z0, z1);
            z0 = z1;
        }
    }

    /// Visits every (column row, output row segment, input row segment) of
    /// output planes `z0..z1`: `f(row, col_offset, in_offset, x0, x1)` where
    /// columns `col_offset + x0..x1` pair with input offsets
    /// `in_offset + ox * stride_x`.
    fn walk(&self, z0: usize, z1: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let kvol = self.k_vol();
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let [sz, sy, _] = self.stride;
        let [pz, py, _] = self.pad;
        let in_vol = self.in_vol();
        for ci in 0..self.cin {
            for kz in 0..kd {
                let (vz0, vz1) = self.valid(0, kz);
                for ky in 0..kh {
                    let (vy0, vy1) = self.valid(1, ky);
                    for kx in 0..kw {
                        let (x0, x1) = self.valid(2, kx);
                        if x0 >= x1 {
                            continue;
                        }
                        let row = ci * kvol + (kz * kh + ky) * kw + kx;
                        for oz in vz0.max(z0)..vz1.min(z1) {
                            let iz = oz * sz + kz - pz;
                            for oy in vy0..vy1 {
                                let iy = oy * sy + ky - py;
                                let col = ((oz - z0) * oh + oy) * ow;
                                // Input index of output column 0 (may underflow for x0 > 0,
                                // so it is carried as `base + ox * sx - px`).
                                let base = ci * in_vol + (iz * ih + iy) * iw + kx;
                                f(row, col, base, x0, x1);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, input: &[T], z0: usize, z1: usize, col: &mut [T]) {
        let n = (z1 - z0) * self.plane();
        let (sx, px) = (self.stride[2], self.pad[2]);
        col[..self.rows() * n].fill(T::zero());
        self.walk(z0, z1, |row, c, base, x0, x1| {
            let dst = &mut col[row * n + c..row * n + c + x1];
            if sx == 1 {
                let start = base + x0 - px;
                dst[x0..].copy_from_slice(&input[start..start + (x1 - x0)]);
            } else {
                for ox in x0..x1 {
                    dst[ox] = input[base + ox * sx - px];
                }
            }
        });
    }

    fn col2im_add<T: Scalar>(&self, col: &[T], z0: usize, z1: usize, grad_in: &mut [T]) {
        let n = (z1 - z0) * self.plane();
        let (sx, px) = (self.stride[2], self.pad[2]);
        self.walk(z0, z1, |row, c, base, x0, x1| {
            let src = &col[row * n + c..row * n + c + x1];
            if sx == 1 {
                let start = base + x0 - px;
                for (g, v) in grad_in[start..start + (x1 - x0)].iter_mut().zip(&src[x0..]) {
                    *g += *v;
                }
            } else {
                for ox in x0..x1 {
                    grad_in[base + ox * sx - px] += src[ox];
                }
            }
        });
    }
}

/// `out[co, o] = sum_{ci,k} input[ci, o*s - p + k] * weight[co, ci, k]`.
pub(crate) fn conv_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], out: &mut [T]) {
    let (rows, plane, out_vol) = (g.rows(), g.plane(), g.out_vol());
    let mut col = vec![T::zero(); rows * g.block_planes() * plane];
    g.blocks(|z0, z1| {
        let n = (z1 - z0) * plane;
        g.im2col(input, z0, z1, &mut col);
        T::gemm(
            [g.cout, rows, n],
            (weight, [rows, 1]),
            (&col[..rows * n], [n, 1]),
            T::zero(),
            (&mut out[z0 * plane..], [out_vol, 1]),
        );
    });
}

/// Adjoint of [`conv_forward`] with respect to its input.
pub(crate) fn conv_backward_input<T: Scalar>(g: &ConvGeom, grad_out: &[T], weight: &[T], grad_in: &mut [T]) {
    let (rows, plane, out_vol) = (g.rows(), g.plane(), g.out_vol());
    grad_in.fill(T::zero());
    let mut col: Vec<T> = vec![T::zero(); rows * g.block_planes() * plane];
    g.blocks(|z0, z1| {
        let n = (z1 - z0) * plane;
        T::gemm(
            [rows, g.cout, n],
            (weight, [1, rows]),
            (&grad_out[z0 * plane..], [out_vol, 1]),
            T::zero(),
            (&mut col[..rows * n], [n, 1]),
        );
        g.col2im_add(&col, z0, z1, grad_in);
    });
}

/// Gradient of [`conv_forward`] with respect to the kernel.
pub(crate) fn conv_backward_weight<T: Scalar>(g: &ConvGeom, grad_out: &[T], input: &[T], grad_w: &mut [T]) {
    let (rows, plane, out_vol) = (g.rows(), g.plane(), g.out_vol());
    grad_w.fill(T::zero());
    let mut col = vec![T::zero(); rows * g.block_planes() * plane];
    g.blocks(|z0, z1| {
        let n = (z1 - z0) * plane;
        g.im2col(input, z0, z1, &mut col);
        T::gemm(
            [g.cout, n, rows],
            (&grad_out[z0 * plane..], [out_vol, 1]),
            (&col[..rows * n], [1, n]),
            T::one(),
            (grad_w, [rows, 1]),
        );
    });
}
