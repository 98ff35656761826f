//! Register-tiled matrix multiply-accumulate.
//!
//! Each element of `C` is updated as `c = fma(a(i,t), b(t,j), c)` for `t` in
//! ascending order, whatever tile it lands in. Two calls that share rows of
//! `A` therefore produce bit-identical rows of `C`.

const MR: usize = 4;
const NR: usize = 16;
const KC: usize = 256;
const MC: usize = 64;
const NC: usize = 512;

/// Row-major view with explicit strides.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Mat { data, row_stride: cols, col_stride: 1 }
    }

    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat { data, row_stride: 1, col_stride: cols }
    }

    #[inline(always)]
    fn at(&self, i: usize, t: usize) -> f64 {
        self.data[i * self.row_stride + t * self.col_stride]
    }
}

/// `C[m x n] += A[m x k] * B[k x n]`, where `B` and `C` are row-major with
/// leading dimensions `ldb` and `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(m: usize, n: usize, k: usize, a: Mat<'_>, b: &[f64], ldb: usize, c: &mut [f64], ldc: usize) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut a_pack = vec![0.0; MC.min(m).next_multiple_of(MR) * KC.min(k)];
    let mut b_pack = vec![0.0; NC.min(n).next_multiple_of(NR) * KC.min(k)];
    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b(&mut b_pack, b, ldb, pc, kc, jc, nc);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                pack_a(&mut a_pack, a, ic, mc, pc, kc);
                for q in 0..nc.div_ceil(NR) {
                    let j0 = jc + q * NR;
                    let nr = NR.min(n - j0);
                    let b_panel = &b_pack[q * kc * NR..(q + 1) * kc * NR];
                    for p in 0..mc.div_ceil(MR) {
                        let i0 = ic + p * MR;
                        let mr = MR.min(m - i0);
                        let mut acc = [[0.0f64; NR]; MR];
                        for i in 0..mr {
                            acc[i][..nr].copy_from_slice(&c[(i0 + i) * ldc + j0..(i0 + i) * ldc + j0 + nr]);
                        }
                        kernel(&a_pack[p * kc * MR..(p + 1) * kc * MR], b_panel, &mut acc);
                        for i in 0..mr {
                            c[(i0 + i) * ldc + j0..(i0 + i) * ldc + j0 + nr].copy_from_slice(&acc[i][..nr]);
                        }
                    }
                }
            }
        }
    }
}

/// Rows `ic..ic+mc`, columns `pc..pc+kc` of `A` as MR-row panels, t-major
/// inside a panel. Rows past `mc` are zero.
fn pack_a(dst: &mut [f64], a: Mat<'_>, ic: usize, mc: usize, pc: usize, kc: usize) {
    for p in 0..mc.div_ceil(MR) {
        let panel = &mut dst[p * kc * MR..(p + 1) * kc * MR];
        let rows = MR.min(mc - p * MR);
        if rows < MR {
            panel.fill(0.0);
        }
        if a.col_stride == 1 {
            for i in 0..rows {
                let src = &a.data[(ic + p * MR + i) * a.row_stride + pc..][..kc];
                for (t, &v) in src.iter().enumerate() {
                    panel[t * MR + i] = v;
                }
            }
        } else {
            for t in 0..kc {
                for i in 0..rows {
                    panel[t * MR + i] = a.at(ic + p * MR + i, pc + t);
                }
            }
        }
    }
}

/// Rows `pc..pc+kc`, columns `jc..jc+nc` of `B` as NR-wide panels, t-major
/// inside a panel. Columns past `nc` are zero.
fn pack_b(dst: &mut [f64], b: &[f64], ldb: usize, pc: usize, kc: usize, jc: usize, nc: usize) {
    for t in 0..kc {
        let row = &b[(pc + t) * ldb + jc..(pc + t) * ldb + jc + nc];
        for (q, chunk) in row.chunks(NR).enumerate() {
            let at = q * kc * NR + t * NR;
            dst[at..at + chunk.len()].copy_from_slice(chunk);
            dst[at + chunk.len()..at + NR].fill(0.0);
        }
    }
}

#[inline(always)]
fn kernel(a_panel: &[f64], b_panel: &[f64], acc: &mut [[f64; NR]; MR]) {
    for (av, bv) in a_panel.chunks_exact(MR).zip(b_panel.chunks_exact(NR)) {
        for i in 0..MR {
            for j in 0..NR {
                acc[i][j] = av[i].mul_add(bv[j], acc[i][j]);
            }
        }
    }
}
