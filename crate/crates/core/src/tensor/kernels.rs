//! Raw slice kernels shared by the forward and backward passes.

/// `c += a · b` with `a: [m, k]`, `b: [k, n]`.
///
/// Each output entry accumulates its products in ascending `k` order, the
/// same order as the textbook triple loop, so results match it bit for bit.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: [m, k]`, `b: [n, k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// `c += aᵀ · b` with `a: [k, m]`, `b: [k, n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    }
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Strides of `b` when broadcast against `a` (zero on singleton axes).
fn broadcast_strides(a_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; b_shape.len()];
    let mut acc = 1;
    for ax in (0..b_shape.len()).rev() {
        strides[ax] = if b_shape[ax] == 1 && a_shape[ax] != 1 {
            0
        } else {
            acc
        };
        acc *= b_shape[ax];
    }
    strides
}

/// Visits every element of `a_shape` together with the matching flat offset
/// into a singleton-broadcast `b_shape`.
fn for_each_broadcast(a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let strides = broadcast_strides(a_shape, b_shape);
    let last = a_shape[rank - 1];
    let last_stride = strides[rank - 1];
    let outer: usize = a_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut a_off = 0;
    for _ in 0..outer {
        let b_base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..last {
            f(a_off + j, b_base + j * last_stride);
        }
        a_off += last;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < a_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// True when `b` can be broadcast over `a` by repeating singleton axes.
pub fn broadcastable(a_shape: &[usize], b_shape: &[usize]) -> bool {
    a_shape.len() == b_shape.len()
        && a_shape
            .iter()
            .zip(b_shape)
            .all(|(&a, &b)| a == b || b == 1)
}

pub fn broadcast_zip(
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![0.0; a.len()];
    for_each_broadcast(a_shape, b_shape, |ia, ib| out[ia] = f(a[ia], b[ib]));
    out
}

/// Sums `grad` (shaped like `a`) down to the broadcast operand's shape.
pub fn reduce_to(a_shape: &[usize], grad: &[f64], b_shape: &[usize]) -> Vec<f64> {
    if a_shape == b_shape {
        return grad.to_vec();
    }
    let mut out = vec![0.0; b_shape.iter().product()];
    for_each_broadcast(a_shape, b_shape, |ia, ib| out[ib] += grad[ia]);
    out
}

/// Same as [`reduce_to`] but of the product `grad ⊙ other`, with `other`
/// shaped like `a`.
pub fn reduce_product_to(a_shape: &[usize], grad: &[f64], other: &[f64], b_shape: &[usize]) -> Vec<f64> {
    if a_shape == b_shape {
        return grad.iter().zip(other).map(|(g, o)| g * o).collect();
    }
    let mut out = vec![0.0; b_shape.iter().product()];
    for_each_broadcast(a_shape, b_shape, |ia, ib| out[ib] += grad[ia] * other[ia]);
    out
}

/// Numerically stable softmax over contiguous rows of length `n`.
pub fn softmax_rows(n: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Output shape and source offset for every destination index of a permute.
pub fn permute(shape: &[usize], perm: &[usize], data: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for ax in (0..rank.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let last = out_shape[rank - 1];
    let last_stride = strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..last {
            out.push(data[base + j * last_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a 3×3, padding-1 convolution over `[n, c, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    pub fn cols_shape(&self) -> [usize; 2] {
        [self.c * 9, self.n * self.out_h() * self.out_w()]
    }
}

/// Unfolds 3×3 patches into columns: row `c·9 + ky·3 + kx`, column
/// `n·Ho·Wo + oy·Wo + ox`.
pub fn im2col(g: ConvGeom, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = g.n * ho * wo;
    let mut out = vec![0.0; g.c * 9 * cols];
    for ci in 0..g.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols;
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let dst = row + ni * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < g.w {
                                out[dst + ox] = plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input grid.
pub fn col2im(g: ConvGeom, cols_data: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = g.n * ho * wo;
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols;
                for ni in 0..g.n {
                    let plane_off = (ni * g.c + ci) * g.h * g.w;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let src = row + ni * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < g.w {
                                out[plane_off + iy as usize * g.w + ix as usize] += cols_data[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling of `planes` planes of `h × w`.
pub fn upsample2x(planes: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub fn upsample2x_adjoint(planes: usize, h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        assert_eq!(c, expect);

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c);
        assert_eq!(c, expect);

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c);
        assert_eq!(c, expect);
    }

    #[test]
    fn broadcast_reduce_roundtrip() {
        let a_shape = [2, 3, 4];
        let b_shape = [1, 3, 1];
        let a = vec![1.0; 24];
        let b = vec![1.0, 2.0, 3.0];
        let out = broadcast_zip(&a_shape, &a, &b_shape, &b, |x, y| x * y);
        assert_eq!(out[0..4], [1.0; 4]);
        assert_eq!(out[4..8], [2.0; 4]);
        assert_eq!(out[12..16], [1.0; 4]);
        let r = reduce_to(&a_shape, &out, &b_shape);
        assert_eq!(r, vec![8.0, 16.0, 24.0]);
    }

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let (s, out) = permute(&shape, &[2, 0, 1], &data);
        assert_eq!(s, vec![4, 2, 3]);
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    assert_eq!(out[(i * 2 + j) * 3 + k], data[(j * 3 + k) * 4 + i]);
                }
            }
        }
        let (_, back) = permute(&s, &inverse_permutation(&[2, 0, 1]), &out);
        assert_eq!(back, data);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { n: 2, c: 2, h: 5, w: 4, stride: 2 };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| (i as f64 * 0.3).sin()).collect();
        let [r, c] = g.cols_shape();
        let y: Vec<f64> = (0..r * c).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = im2col(g, &x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(g, &y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
