/// Strided read-only view of an `rows x cols` matrix: element `(i, j)` lives at
/// `data[i * rs + j * cs]`.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.rs + j * self.cs]
    }
}

const NB: usize = 256;
const KB: usize = 128;

/// `C (m x n, row-major) {=, +=} A (m x k) * B (k x n)`.
///
/// Every output element accumulates its `k` products in increasing `k`
/// order, so results are identical to a plain triple loop.
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], accumulate: bool) {
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    let c = &mut c[..m * n];
    if !accumulate {
        c.fill(0.0);
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let packed;
    let b_rows: &[f64] = if b.cs == 1 && b.rs == n {
        &b.data[..k * n]
    } else {
        let mut buf = vec![0.0; k * n];
        for kk in 0..k {
            for (j, slot) in buf[kk * n..(kk + 1) * n].iter_mut().enumerate() {
                *slot = b.get(kk, j);
            }
        }
        packed = buf;
        &packed
    };

    for jb in (0..n).step_by(NB) {
        let jend = (jb + NB).min(n);
        for kb in (0..k).step_by(KB) {
            let kend = (kb + KB).min(k);
            let mut i = 0;
            while i + 4 <= m {
                let (r0, rest) = c[i * n..].split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, rest) = rest.split_at_mut(n);
                let r3 = &mut rest[..n];
                let (c0, c1, c2, c3) = (
                    &mut r0[jb..jend],
                    &mut r1[jb..jend],
                    &mut r2[jb..jend],
                    &mut r3[jb..jend],
                );
                for kk in kb..kend {
                    let a0 = a.get(i, kk);
                    let a1 = a.get(i + 1, kk);
                    let a2 = a.get(i + 2, kk);
                    let a3 = a.get(i + 3, kk);
                    let brow = &b_rows[kk * n + jb..kk * n + jend];
                    for ((((x0, x1), x2), x3), &bv) in c0
                        .iter_mut()
                        .zip(c1.iter_mut())
                        .zip(c2.iter_mut())
                        .zip(c3.iter_mut())
                        .zip(brow)
                    {
                        *x0 += a0 * bv;
                        *x1 += a1 * bv;
                        *x2 += a2 * bv;
                        *x3 += a3 * bv;
                    }
                }
                i += 4;
            }
            while i < m {
                let crow = &mut c[i * n + jb..i * n + jend];
                for kk in kb..kend {
                    let av = a.get(i, kk);
                    let brow = &b_rows[kk * n + jb..kk * n + jend];
                    for (x, &bv) in crow.iter_mut().zip(brow) {
                        *x += av * bv;
                    }
                }
                i += 1;
            }
        }
    }
}
