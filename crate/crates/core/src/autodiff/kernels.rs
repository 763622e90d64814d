//! Raw slice kernels shared by the forward and backward passes.

use crate::tensor::{numel, strides, Real};

/// Geometry of a 3D convolution over a `[C, T, H, W]` input. 2D convolution
/// is the `T = 1, kt = 1` special case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * padding[d];
            if kernel[d] == 0 || stride[d] == 0 || kernel[d] > padded {
                return None;
            }
            output[d] = (padded - kernel[d]) / stride[d] + 1;
        }
        Some(ConvGeom {
            channels,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    /// Rows of the unfolded matrix: `C * kt * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.input.iter().product::<usize>()
    }

    /// Visits `(col_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [it, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let [ot, oh, ow] = self.output;
        let out_len = self.out_len();
        let mut row = 0;
        for c in 0..self.channels {
            let cbase = c * it * ih * iw;
            for a in 0..kt {
                for b in 0..kh {
                    for d in 0..kw {
                        let rbase = row * out_len;
                        for zt in 0..ot {
                            let t = (zt * st + a) as isize - pt as isize;
                            if t < 0 || t >= it as isize {
                                continue;
                            }
                            let tbase = cbase + t as usize * ih * iw;
                            for zy in 0..oh {
                                let y = (zy * sh + b) as isize - ph as isize;
                                if y < 0 || y >= ih as isize {
                                    continue;
                                }
                                let ybase = tbase + y as usize * iw;
                                let obase = rbase + (zt * oh + zy) * ow;
                                for zx in 0..ow {
                                    let x = (zx * sw + d) as isize - pw as isize;
                                    if x < 0 || x >= iw as isize {
                                        continue;
                                    }
                                    f(obase + zx, ybase + x as usize);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Unfolds `input` into a `[patch_len, out_len]` matrix.
    pub fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let mut col = vec![T::zero(); self.patch_len() * self.out_len()];
        self.for_each_tap(|ci, xi| col[ci] = input[xi]);
        col
    }

    /// Folds a `[patch_len, out_len]` matrix back, accumulating into `target`.
    pub fn col2im<T: Real>(&self, col: &[T], target: &mut [T]) {
        self.for_each_tap(|ci, xi| target[xi] += col[ci]);
    }
}

/// Index of the input element feeding each output element under numpy-style
/// right-aligned broadcasting.
pub fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for (i, (&ext, &st)) in in_shape.iter().zip(&in_strides).enumerate() {
        if ext != 1 {
            eff[offset + i] = st;
        }
    }
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Broadcast result shape, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub fn softmax_forward<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                y[base + j * inner] /= total;
            }
        }
    }
    y
}

/// Returns `(normalized, reciprocal std per slice)`.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); outer * inner];
    let nf = T::lit(n as f64);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mean = (0..n).map(|j| x[base + j * inner]).sum::<T>() / nf;
            let var = (0..n)
                .map(|j| {
                    let d = x[base + j * inner] - mean;
                    d * d
                })
                .sum::<T>()
                / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[o * inner + i] = r;
            for j in 0..n {
                y[base + j * inner] = (x[base + j * inner] - mean) * r;
            }
        }
    }
    (y, rstd)
}

/// Output shape and source offset for each output element of a permutation.
pub fn permute_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let n = numel(&out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}
