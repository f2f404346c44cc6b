//! Dense kernels: row-major sgemm wrappers and the fused GRU recurrence.
//!
//! GRU gate order is `r, z, n` (reset, update, candidate):
//!
//! ```text
//! r  = σ(x_r + h·W_r + b_r)
//! z  = σ(x_z + h·W_z + b_z)
//! n  = tanh(x_n + r ⊙ (h·W_n + b_n))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```
//!
//! `x` already holds the input projection (and input bias) for every step.

/// `c (+)= op(a) · op(b)` for row-major matrices, where `op(a)` is `m×k` and
/// `op(b)` is `k×n`. With `a_t` the buffer `a` holds the `k×m` transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Saved activations of one GRU pass: per row `r, z, n, h·W_n + b_n`.
#[derive(Debug, Clone, Default)]
pub struct GruCache {
    pub gates: Vec<f32>,
}

/// Shapes of a GRU pass over `steps × batch` rows.
#[derive(Debug, Clone, Copy)]
pub struct GruDims {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl GruDims {
    fn order(&self) -> impl Iterator<Item = usize> {
        let steps = self.steps;
        let reverse = self.reverse;
        (0..steps).map(move |i| if reverse { steps - 1 - i } else { i })
    }
}

/// Runs the recurrence. Returns the hidden state at every time position
/// (`steps × batch × hidden`); for a reverse pass position `p` holds the state
/// after consuming `p..steps`.
pub fn gru_forward(
    dims: GruDims,
    x: &[f32],
    h0: &[f32],
    w: &[f32],
    bias: &[f32],
) -> (Vec<f32>, GruCache) {
    let GruDims { batch, hidden, .. } = dims;
    let h3 = 3 * hidden;
    let rows = dims.steps * batch;
    let mut out = vec![0f32; rows * hidden];
    let mut gates = vec![0f32; rows * 4 * hidden];
    let mut gh = vec![0f32; batch * h3];
    let mut h_prev = h0.to_vec();
    for p in dims.order() {
        for row in gh.chunks_exact_mut(h3) {
            row.copy_from_slice(bias);
        }
        gemm(batch, hidden, h3, &h_prev, false, w, false, &mut gh, true);
        let cur = &mut out[p * batch * hidden..(p + 1) * batch * hidden];
        for i in 0..batch {
            let row = p * batch + i;
            let xr = &x[row * h3..(row + 1) * h3];
            let g = &gh[i * h3..(i + 1) * h3];
            let cache = &mut gates[row * 4 * hidden..(row + 1) * 4 * hidden];
            let hp = &h_prev[i * hidden..(i + 1) * hidden];
            let hc = &mut cur[i * hidden..(i + 1) * hidden];
            for j in 0..hidden {
                let r = sigmoid(xr[j] + g[j]);
                let z = sigmoid(xr[hidden + j] + g[hidden + j]);
                let hn = g[2 * hidden + j];
                let n = (xr[2 * hidden + j] + r * hn).tanh();
                cache[j] = r;
                cache[hidden + j] = z;
                cache[2 * hidden + j] = n;
                cache[3 * hidden + j] = hn;
                hc[j] = (1.0 - z) * n + z * hp[j];
            }
        }
        h_prev.copy_from_slice(cur);
    }
    (out, GruCache { gates })
}

/// Gradients of one GRU pass.
pub struct GruGrads {
    pub dx: Vec<f32>,
    pub dh0: Vec<f32>,
    pub dw: Vec<f32>,
    pub dbias: Vec<f32>,
}

/// Backpropagation through time for [`gru_forward`].
pub fn gru_backward(
    dims: GruDims,
    h0: &[f32],
    w: &[f32],
    out: &[f32],
    cache: &GruCache,
    dout: &[f32],
) -> GruGrads {
    let GruDims { batch, hidden, .. } = dims;
    let h3 = 3 * hidden;
    let bh = batch * hidden;
    let mut dx = vec![0f32; dims.steps * batch * h3];
    let mut dw = vec![0f32; hidden * h3];
    let mut dbias = vec![0f32; h3];
    let mut carry = vec![0f32; bh];
    let mut dgh = vec![0f32; batch * h3];
    let order: Vec<usize> = dims.order().collect();
    for (k, &p) in order.iter().enumerate().rev() {
        let h_prev: &[f32] = if k == 0 {
            h0
        } else {
            let q = order[k - 1];
            &out[q * bh..(q + 1) * bh]
        };
        let mut next_carry = vec![0f32; bh];
        for i in 0..batch {
            let row = p * batch + i;
            let cache_row = &cache.gates[row * 4 * hidden..(row + 1) * 4 * hidden];
            let dxr = &mut dx[row * h3..(row + 1) * h3];
            let dg = &mut dgh[i * h3..(i + 1) * h3];
            for j in 0..hidden {
                let dh = dout[row * hidden + j] + carry[i * hidden + j];
                let r = cache_row[j];
                let z = cache_row[hidden + j];
                let n = cache_row[2 * hidden + j];
                let hn = cache_row[3 * hidden + j];
                let hp = h_prev[i * hidden + j];
                let dn = dh * (1.0 - z);
                let dz = dh * (hp - n);
                next_carry[i * hidden + j] = dh * z;
                let dn_pre = dn * (1.0 - n * n);
                let dr = dn_pre * hn;
                let dr_pre = dr * r * (1.0 - r);
                let dz_pre = dz * z * (1.0 - z);
                dxr[j] = dr_pre;
                dxr[hidden + j] = dz_pre;
                dxr[2 * hidden + j] = dn_pre;
                dg[j] = dr_pre;
                dg[hidden + j] = dz_pre;
                dg[2 * hidden + j] = dn_pre * r;
            }
        }
        gemm(hidden, batch, h3, h_prev, true, &dgh, false, &mut dw, true);
        for row in dgh.chunks_exact(h3) {
            for (db, g) in dbias.iter_mut().zip(row) {
                *db += g;
            }
        }
        gemm(batch, h3, hidden, &dgh, false, w, true, &mut next_carry, true);
        carry = next_carry;
    }
    GruGrads {
        dx,
        dh0: carry,
        dw,
        dbias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0f32; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0f32; m * n];
        gemm(m, k, n, &transpose(m, k, &a), true, &transpose(k, n, &b), true, &mut c, false);
        assert_eq!(c, want);
        gemm(m, k, n, &a, false, &b, false, &mut c, true);
        let doubled: Vec<f32> = want.iter().map(|v| 2.0 * v).collect();
        assert_eq!(c, doubled);
    }

    fn loss(dims: GruDims, x: &[f32], h0: &[f32], w: &[f32], b: &[f32], weights: &[f32]) -> f64 {
        let (out, _) = gru_forward(dims, x, h0, w, b);
        out.iter().zip(weights).map(|(o, c)| (*o as f64) * (*c as f64)).sum()
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        for reverse in [false, true] {
            let dims = GruDims {
                steps: 4,
                batch: 2,
                hidden: 3,
                reverse,
            };
            let h = dims.hidden;
            let gen = |n: usize, s: f32| -> Vec<f32> {
                (0..n).map(|i| ((i as f32 * 0.731 + s).sin()) * 0.8).collect()
            };
            let x = gen(dims.steps * dims.batch * 3 * h, 0.3);
            let h0 = gen(dims.batch * h, 1.1);
            let w = gen(h * 3 * h, 2.7);
            let b = gen(3 * h, 0.9);
            let weights = gen(dims.steps * dims.batch * h, 5.0);
            let (out, cache) = gru_forward(dims, &x, &h0, &w, &b);
            let g = gru_backward(dims, &h0, &w, &out, &cache, &weights);
            let eps = 1e-2f32;
            let check = |name: &str, base: &[f32], grad: &[f32], f: &dyn Fn(&[f32]) -> f64| {
                for i in 0..base.len() {
                    let mut p = base.to_vec();
                    p[i] += eps;
                    let up = f(&p);
                    p[i] -= 2.0 * eps;
                    let down = f(&p);
                    let fd = (up - down) / (2.0 * eps as f64);
                    assert!(
                        (fd - grad[i] as f64).abs() < 2e-3,
                        "{name}[{i}] reverse={reverse}: fd {fd} vs {}",
                        grad[i]
                    );
                }
            };
            check("x", &x, &g.dx, &|p| loss(dims, p, &h0, &w, &b, &weights));
            check("h0", &h0, &g.dh0, &|p| loss(dims, &x, p, &w, &b, &weights));
            check("w", &w, &g.dw, &|p| loss(dims, &x, &h0, p, &b, &weights));
            check("b", &b, &g.dbias, &|p| loss(dims, &x, &h0, &w, p, &weights));
        }
    }
}
