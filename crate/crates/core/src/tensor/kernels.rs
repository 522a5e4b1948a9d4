//! Dense matrix kernels.
//!
//! Every output element is the sum over the contraction index taken in
//! ascending order and accumulated in f64, whatever the tiling or thread
//! split. That fixes results bit-for-bit across runs, thread counts and
//! storage precision.

use crate::exec;
use crate::Real;

const MR: usize = 4;
const NR: usize = 8;

/// Work below this many multiply-adds stays on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 16;

/// `c[m×n] = a[m×k] · b[k×n]`, all row-major.
pub fn gemm(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    gemm_general(a, false, b, false, c, m, k, n);
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    gemm_general(a, false, b, true, c, m, k, n);
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
pub fn gemm_tn(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    gemm_general(a, true, b, false, c, m, k, n);
}

/// Shared driver. Transposed operands are read in place while packing.
#[allow(clippy::too_many_arguments)]
fn gemm_general(a: &[Real], a_t: bool, b: &[Real], b_t: bool, c: &mut [Real], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }

    // B packed into column panels of width NR: panel j holds B[p][j*NR..] for all p.
    let n_panels = n.div_ceil(NR);
    let mut packed_b = vec![0.0 as Real; n_panels * k * NR];
    for jp in 0..n_panels {
        let j0 = jp * NR;
        let w = NR.min(n - j0);
        let panel = &mut packed_b[jp * k * NR..(jp + 1) * k * NR];
        if b_t {
            for jj in 0..w {
                let col = &b[(j0 + jj) * k..(j0 + jj + 1) * k];
                for (p, &v) in col.iter().enumerate() {
                    panel[p * NR + jj] = v;
                }
            }
        } else {
            for p in 0..k {
                panel[p * NR..p * NR + w].copy_from_slice(&b[p * n + j0..p * n + j0 + w]);
            }
        }
    }

    let row_block = |bi: usize, c_rows: &mut [Real]| {
        let i0 = bi * MR;
        let h = c_rows.len() / n;
        // A rows of this block, interleaved by p.
        let mut packed_a = vec![0.0 as Real; k * MR];
        for r in 0..h {
            if a_t {
                for p in 0..k {
                    packed_a[p * MR + r] = a[p * m + i0 + r];
                }
            } else {
                let row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (p, &v) in row.iter().enumerate() {
                    packed_a[p * MR + r] = v;
                }
            }
        }
        for jp in 0..n_panels {
            let j0 = jp * NR;
            let w = NR.min(n - j0);
            let acc = micro_kernel(&packed_a, &packed_b[jp * k * NR..(jp + 1) * k * NR], k);
            for r in 0..h {
                for (jj, &v) in acc[r][..w].iter().enumerate() {
                    c_rows[r * n + j0 + jj] = v as Real;
                }
            }
        }
    };

    if m * n * k >= PARALLEL_THRESHOLD {
        exec::for_each_chunk(c, MR * n, row_block);
    } else {
        for (bi, chunk) in c.chunks_mut(MR * n).enumerate() {
            row_block(bi, chunk);
        }
    }
}

/// `MR×NR` tile over the full contraction.
fn micro_kernel(packed_a: &[Real], panel: &[Real], k: usize) -> [[f64; NR]; MR] {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { micro_kernel_avx2(packed_a, panel, k) };
    }
    micro_body(packed_a, panel, k)
}

/// Same arithmetic as the portable path (Rust never contracts into FMA),
/// just wider registers, so results stay bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn micro_kernel_avx2(packed_a: &[Real], panel: &[Real], k: usize) -> [[f64; NR]; MR] {
    micro_body(packed_a, panel, k)
}

#[inline(always)]
fn micro_body(packed_a: &[Real], panel: &[Real], k: usize) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    for (a, b) in packed_a.chunks_exact(MR).zip(panel.chunks_exact(NR)).take(k) {
        for r in 0..MR {
            let av = a[r] as f64;
            for j in 0..NR {
                acc[r][j] += av * b[j] as f64;
            }
        }
    }
    acc
}

/// Transpose of a row-major `rows×cols` matrix, in cache-sized tiles.
pub fn transpose(x: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    const T: usize = 32;
    assert_eq!(x.len(), rows * cols);
    let mut out = vec![0.0 as Real; x.len()];
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
