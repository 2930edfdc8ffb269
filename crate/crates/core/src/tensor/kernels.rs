// Dense kernels behind the tape ops. Every reduction runs sequentially in
// ascending index order, so results are bitwise reproducible and equal to a
// naive loop that accumulates from zero in the same order.

const COL_BLOCK: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + COL_BLOCK).min(n);
            let cblk = &mut crow[j0..j1];
            let mut p = 0;
            // Four k-steps per sweep; each element still accumulates p, p+1, p+2, p+3 in order.
            while p + 4 <= k {
                let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
                let b0 = &b[p * n + j0..p * n + j1];
                let b1 = &b[(p + 1) * n + j0..(p + 1) * n + j1];
                let b2 = &b[(p + 2) * n + j0..(p + 2) * n + j1];
                let b3 = &b[(p + 3) * n + j0..(p + 3) * n + j1];
                for (j, cv) in cblk.iter_mut().enumerate() {
                    let mut v = *cv;
                    v += a0 * b0[j];
                    v += a1 * b1[j];
                    v += a2 * b2[j];
                    v += a3 * b3[j];
                    *cv = v;
                }
                p += 4;
            }
            while p < k {
                let ap = arow[p];
                let bp = &b[p * n + j0..p * n + j1];
                for (cv, bv) in cblk.iter_mut().zip(bp) {
                    *cv += ap * bv;
                }
                p += 1;
            }
            j0 = j1;
        }
    }
}

pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a, b, &mut c);
    c
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let bt = transpose(n, k, b);
    gemm(m, k, n, a, &bt)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let at = transpose(k, m, a);
    gemm(m, k, n, &at, b)
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    const T: usize = 32;
    for i0 in (0..rows).step_by(T) {
        for j0 in (0..cols).step_by(T) {
            for i in i0..(i0 + T).min(rows) {
                for j in j0..(j0 + T).min(cols) {
                    out[j * rows + i] = x[i * cols + j];
                }
            }
        }
    }
    out
}

/// Sliding-window geometry shared by conv and transposed conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Unfolds `x[C×H×W]` into columns `[(C·kh·kw) × (out_h·out_w)]`; padding reads as zero.
pub fn im2col(x: &[f64], g: &Window) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.channels * g.kh * g.kw * n];
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto a `C×H×W` buffer.
pub fn col2im(cols: &[f64], g: &Window) -> Vec<f64> {
    let n = g.out_h * g.out_w;
    let mut x = vec![0.0; g.channels * g.in_h * g.in_w];
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[test]
    fn blocked_gemm_is_bitwise_naive() {
        let mut rng = crate::tensor::SeededRng::new(5);
        for &(m, k, n) in &[(3, 7, 5), (4, 9, 300), (1, 1, 1), (6, 16, 513)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            assert_eq!(gemm(m, k, n, &a, &b), naive(m, k, n, &a, &b));
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = crate::tensor::SeededRng::new(6);
        let (m, k, n) = (4, 5, 6);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let c = gemm(m, k, n, &a, &b);
        assert_eq!(gemm_nt(m, k, n, &a, &transpose(k, n, &b)), c);
        assert_eq!(gemm_tn(m, k, n, &transpose(m, k, &a), &b), c);
    }
}
