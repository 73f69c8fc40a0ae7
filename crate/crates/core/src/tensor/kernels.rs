// Raw numeric kernels shared by the forward and backward rules.

/// `c = a·b + beta·c` for row-major `c` of shape `[m, n]`.
///
/// `a` is `[m, k]` and `b` is `[k, n]` described by explicit row/column
/// strides, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let max_a = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let max_b = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(max_a < a.len() && max_b < b.len());
    // SAFETY: bounds of every operand were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over NCHW input with an OIHW kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn spatial(&self) -> usize {
        self.oh * self.ow
    }

    /// Number of columns of the batched im2col matrix.
    pub fn cols(&self) -> usize {
        self.n * self.spatial()
    }
}

/// Batched im2col: output is `[C·kh·kw, N·OH·OW]`, column index `n·OH·OW + p`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let sp = g.spatial();
    let mut out = vec![0.0; g.patch() * ncols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let base = n * sp + oy * g.ow;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into an NCHW buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let sp = g.spatial();
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut out[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * sp + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Split a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Apply `f` to every 1-D lane along the split axis, passing lane indices.
pub(crate) fn for_each_lane(
    (outer, len, inner): (usize, usize, usize),
    mut f: impl FnMut(&mut dyn Iterator<Item = usize>),
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut it = (0..len).map(move |k| base + k * inner);
            f(&mut it);
        }
    }
}

/// Numerically stable softmax (or log-softmax) along a split axis.
pub(crate) fn softmax_lanes(x: &[f64], split: (usize, usize, usize), log: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut idx = Vec::with_capacity(split.1);
    for_each_lane(split, |lane| {
        idx.clear();
        idx.extend(lane);
        let max = idx.iter().map(|&j| x[j]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = idx.iter().map(|&j| (x[j] - max).exp()).sum();
        if log {
            let lse = max + sum.ln();
            for &j in &idx {
                out[j] = x[j] - lse;
            }
        } else {
            for &j in &idx {
                out[j] = (x[j] - max).exp() / sum;
            }
        }
    });
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposed_operand() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), 0.0, &mut c);
        let want = naive(2, 3, 4, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
        // a^T stored as [3,2]
        let at: Vec<f64> = (0..3).flat_map(|p| (0..2).map(move |i| (i, p))).map(|(i, p)| a[i * 3 + p]).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, (1, 2), &b, (4, 1), 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { n: 2, c: 2, h: 5, w: 4, kh: 3, kw: 3, stride: 2, pad: 1, oh: 3, ow: 2 };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|v| ((v * 7 % 11) as f64) - 5.0).collect();
        let y: Vec<f64> = (0..g.patch() * g.cols()).map(|v| ((v * 3 % 13) as f64) * 0.1).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
