//! Dense kernels shared by the forward and backward passes.
//!
//! All routines accumulate into their output slice; callers zero it first
//! when they want plain assignment.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · d[m×n]`
pub(crate) fn gemm_tn(a: &[f64], d: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let d_row = &d[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, d_ij) in c_row.iter_mut().zip(d_row) {
                *c_pj += a_ip * d_ij;
            }
        }
    }
}

/// `c[n×k] += d[m×n]ᵀ · a[m×k]`
pub(crate) fn gemm_tn_swapped(d: &[f64], a: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let d_ij = d[i * n + j];
            if d_ij == 0.0 {
                continue;
            }
            let c_row = &mut c[j * k..(j + 1) * k];
            for (c_jp, a_ip) in c_row.iter_mut().zip(a_row) {
                *c_jp += d_ij * a_ip;
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// For every element of `out_shape` (row-major), the flat offset of the
/// element of `in_shape` that broadcasts onto it. `in_shape` must be
/// broadcast-compatible with `out_shape` and have rank ≤ its rank.
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + offset] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    let mut current = 0usize;
    for _ in 0..numel {
        offsets.push(current);
        for d in (0..rank).rev() {
            index[d] += 1;
            current += strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            current -= strides[d] * index[d];
            index[d] = 0;
        }
    }
    offsets
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_offsets_bias_and_column() {
        assert_eq!(broadcast_offsets(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_offsets(&[2, 2], &[1]), vec![0, 0, 0, 0]);
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let bt = [1.0, 2.0, 0.0, 0.0, 1.0, 3.0]; // 2x3 = bᵀ
        let mut c1 = [0.0; 4];
        let mut c2 = [0.0; 4];
        gemm_nn(&a, &b, &mut c1, 2, 3, 2);
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c1, [5.0, 11.0, 14.0, 23.0]);
        assert_eq!(c1, c2);
    }
}
