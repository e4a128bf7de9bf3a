//! Raw array kernels shared by the tape operations.

use super::{Result, TensorError};

/// `C = beta * C + op(A) * op(B)` for row-major slices.
///
/// `op(A)` is `m x k`; when `trans_a` is set, `a` is stored as `k x m`.
/// Likewise `op(B)` is `k x n`, stored `n x k` when `trans_b` is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices: the largest offsets are (m-1)*rsa + (k-1)*csa < m*k, the
    // same for B, and (m-1)*n + (n-1) < m*n for C.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps flat indices of a broadcast output back to an input.
#[derive(Debug, Clone)]
pub(crate) enum BroadcastMap {
    /// Input has the output's shape.
    Same,
    /// Input equals a trailing block of the output; index is `i % len`.
    Tile(usize),
    /// Arbitrary broadcast: per-output-dimension input strides (0 where the
    /// input is broadcast).
    Strided(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Self {
        if input == out {
            return BroadcastMap::Same;
        }
        let n_in: usize = input.iter().product();
        let lead = out.len() - input.len();
        let trailing_match = input
            .iter()
            .skip_while(|&&d| d == 1)
            .eq(out[lead + input.iter().take_while(|&&d| d == 1).count()..].iter());
        if trailing_match && n_in > 0 {
            return BroadcastMap::Tile(n_in);
        }
        let mut strides = vec![0; out.len()];
        let mut acc = 1;
        for (i, &d) in input.iter().enumerate().rev() {
            let o = lead + i;
            strides[o] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
        BroadcastMap::Strided(strides)
    }

    /// Calls `f(out_index, in_index)` for every output element.
    #[inline]
    pub(crate) fn for_each(&self, out: &[usize], mut f: impl FnMut(usize, usize)) {
        let total: usize = out.iter().product();
        match self {
            BroadcastMap::Same => (0..total).for_each(|i| f(i, i)),
            BroadcastMap::Tile(len) => {
                let mut i = 0;
                while i < total {
                    for j in 0..*len {
                        f(i + j, j);
                    }
                    i += len;
                }
            }
            BroadcastMap::Strided(strides) => {
                if total == 0 {
                    return;
                }
                let rank = out.len();
                let last = out[rank - 1];
                let last_stride = strides[rank - 1];
                let mut counter = vec![0usize; rank.saturating_sub(1)];
                let mut base = 0usize;
                let mut i = 0usize;
                loop {
                    for j in 0..last {
                        f(i + j, base + j * last_stride);
                    }
                    i += last;
                    // advance the odometer over all but the last axis
                    let mut axis = rank - 1;
                    loop {
                        if axis == 0 {
                            return;
                        }
                        axis -= 1;
                        counter[axis] += 1;
                        base += strides[axis];
                        if counter[axis] < out[axis] {
                            break;
                        }
                        base -= strides[axis] * out[axis];
                        counter[axis] = 0;
                    }
                }
            }
        }
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: output axis `d` is input axis `perm[d]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    BroadcastMap::Strided(src_strides).for_each(&out_shape, |_, src| out.push(data[src]));
    (out, out_shape)
}

/// Inverse of a permutation.
pub(crate) fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, &mut c, 0.0);
                let expect = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shapes("t", &[2, 1, 3], &[4, 3]).unwrap(), vec![2, 4, 3]);
        assert_eq!(broadcast_shapes("t", &[], &[2]).unwrap(), vec![2]);
        assert!(broadcast_shapes("t", &[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn broadcast_map_strided_matches_manual_indexing() {
        let out = [2, 3, 4];
        let input = [2, 1, 4];
        let map = BroadcastMap::new(&input, &out);
        let mut seen = Vec::new();
        map.for_each(&out, |o, i| seen.push((o, i)));
        for (o, i) in seen {
            let (a, c) = (o / 12, o % 4);
            assert_eq!(i, a * 4 + c);
        }
    }

    #[test]
    fn tile_map_is_used_for_suffix_broadcast() {
        assert!(matches!(BroadcastMap::new(&[4], &[3, 4]), BroadcastMap::Tile(4)));
        assert!(matches!(BroadcastMap::new(&[1, 3, 4], &[2, 3, 4]), BroadcastMap::Tile(12)));
        assert!(matches!(BroadcastMap::new(&[3, 1], &[3, 4]), BroadcastMap::Strided(_)));
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let (p, s) = permute(&data, &shape, &perm);
        assert_eq!(s, vec![4, 2, 3]);
        // out[c, a, b] == in[a, b, c]
        assert_eq!(p[(3 * 2 + 1) * 3 + 2], data[(3 + 2) * 4 + 3]);
        let (back, bs) = permute(&p, &s, &invert_permutation(&perm));
        assert_eq!(bs, shape.to_vec());
        assert_eq!(back, data);
    }
}
