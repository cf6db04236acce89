//! Dense matrix kernels with a fixed summation order.
//!
//! Every output element is accumulated as `acc = 0; acc += a[i][k] * b[k][j]`
//! for `k` ascending, then `out += acc`. Tiling never changes that order, so
//! dropping a `k` whose `a` column (or `b` row) is zero leaves every output
//! bit-identical. Surgery exactness depends on this.

const MR: usize = 4;
const NR: usize = 8;

/// `out[m x n] += a[m x k] * b[k x n]`, all row-major and contiguous.
pub fn matmul_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(out.len(), m * n, "out length");
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature presence checked at runtime.
            unsafe { matmul_acc_avx2(m, k, n, a, b, out) };
            return;
        }
    }
    matmul_acc_generic(m, k, n, a, b, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    matmul_acc_generic(m, k, n, a, b, out)
}

#[inline(always)]
fn matmul_acc_generic(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let mut i = 0;
    while i + MR <= m {
        let a_rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for kk in 0..k {
                let brow: &[f64; NR] = b[kk * n + j..kk * n + j + NR].try_into().unwrap();
                for r in 0..MR {
                    let av = a_rows[r][kk];
                    for c in 0..NR {
                        acc[r][c] += av * brow[c];
                    }
                }
            }
            for r in 0..MR {
                let orow = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for c in 0..NR {
                    orow[c] += acc[r][c];
                }
            }
            j += NR;
        }
        for jj in j..n {
            for (r, arow) in a_rows.iter().enumerate() {
                out[(i + r) * n + jj] += dot_strided(arow, b, jj, n);
            }
        }
        i += MR;
    }
    for ii in i..m {
        let arow = &a[ii * k..(ii + 1) * k];
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [0.0f64; NR];
            for (kk, &av) in arow.iter().enumerate() {
                let brow: &[f64; NR] = b[kk * n + j..kk * n + j + NR].try_into().unwrap();
                for c in 0..NR {
                    acc[c] += av * brow[c];
                }
            }
            for c in 0..NR {
                out[ii * n + j + c] += acc[c];
            }
            j += NR;
        }
        for jj in j..n {
            out[ii * n + jj] += dot_strided(arow, b, jj, n);
        }
    }
}

#[inline(always)]
fn dot_strided(arow: &[f64], b: &[f64], col: usize, n: usize) -> f64 {
    let mut acc = 0.0;
    for (kk, &av) in arow.iter().enumerate() {
        acc += av * b[kk * n + col];
    }
    acc
}

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut dst = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}
