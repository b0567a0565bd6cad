use rayon::prelude::*;

use crate::error::{shape_err, usage_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

/// Transpose flags for the matmul kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatLayout {
    NN,
    NT,
    TN,
}

/// `out[m,n] = A·B` with `A` `[m,k]`, `B` `[k,n]` after applying the layout.
///
/// For `NT`, `b` holds `[n,k]` and is read transposed; for `TN`, `a` holds
/// `[k,m]`. Accumulation runs in the element type; rows are computed
/// independently so the parallel split cannot change the result.
pub fn mm_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    layout: MatLayout,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), m * n);
    // Thread dispatch costs more than micro matmuls do.
    let parallel = m * k * n >= 1 << 16;
    // Four output rows per pass share each streamed B row.
    let block_nn = |i0: usize, rows: &mut [T]| {
        let rn = rows.len() / n;
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            match rn {
                4 => {
                    let a0 = a[i0 * k + l];
                    let a1 = a[(i0 + 1) * k + l];
                    let a2 = a[(i0 + 2) * k + l];
                    let a3 = a[(i0 + 3) * k + l];
                    if a0 == T::zero() && a1 == T::zero() && a2 == T::zero() && a3 == T::zero() {
                        continue;
                    }
                    let (r0, rest) = rows.split_at_mut(n);
                    let (r1, rest) = rest.split_at_mut(n);
                    let (r2, r3) = rest.split_at_mut(n);
                    for (j, &bv) in b_row.iter().enumerate() {
                        r0[j] += a0 * bv;
                        r1[j] += a1 * bv;
                        r2[j] += a2 * bv;
                        r3[j] += a3 * bv;
                    }
                }
                _ => {
                    for r in 0..rn {
                        let av = a[(i0 + r) * k + l];
                        if av == T::zero() {
                            continue;
                        }
                        for (o, &bv) in rows[r * n..(r + 1) * n].iter_mut().zip(b_row.iter()) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
    };
    // Four output rows per pass share each streamed B row.
    let block_nt = |i0: usize, rows: &mut [T]| {
        let rn = rows.len() / n;
        if rn == 4 {
            let a0 = &a[i0 * k..(i0 + 1) * k];
            let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
            let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
            let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
            let (r0, rest) = rows.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            for j in 0..n {
                let b_row = &b[j * k..(j + 1) * k];
                let (mut s0, mut s1, mut s2, mut s3) =
                    (T::zero(), T::zero(), T::zero(), T::zero());
                for l in 0..k {
                    let bv = b_row[l];
                    s0 += a0[l] * bv;
                    s1 += a1[l] * bv;
                    s2 += a2[l] * bv;
                    s3 += a3[l] * bv;
                }
                r0[j] += s0;
                r1[j] += s1;
                r2[j] += s2;
                r3[j] += s3;
            }
        } else {
            for r in 0..rn {
                let a_row = &a[(i0 + r) * k..(i0 + r + 1) * k];
                for (j, o) in rows[r * n..(r + 1) * n].iter_mut().enumerate() {
                    let b_row = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                        acc += av * bv;
                    }
                    *o += acc;
                }
            }
        }
    };
    let row_tn = |i: usize, row: &mut [T]| {
        for l in 0..k {
            let av = a[l * m + i];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    };
    match (layout, parallel) {
        (MatLayout::NN, true) => out
            .par_chunks_mut(4 * n)
            .enumerate()
            .for_each(|(blk, rows)| block_nn(blk * 4, rows)),
        (MatLayout::NN, false) => out
            .chunks_mut(4 * n)
            .enumerate()
            .for_each(|(blk, rows)| block_nn(blk * 4, rows)),
        (MatLayout::NT, true) => out
            .par_chunks_mut(4 * n)
            .enumerate()
            .for_each(|(blk, rows)| block_nt(blk * 4, rows)),
        (MatLayout::NT, false) => out
            .chunks_mut(4 * n)
            .enumerate()
            .for_each(|(blk, rows)| block_nt(blk * 4, rows)),
        (MatLayout::TN, true) => out
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_tn(i, row)),
        (MatLayout::TN, false) => out.chunks_mut(n).enumerate().for_each(|(i, row)| row_tn(i, row)),
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err!(
            "matmul inner dimensions differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    mm_kernel(a.data(), b.data(), m, k, n, MatLayout::NN, &mut out);
    Tensor::from_vec(&[m, n], out)
}

/// Batched matmul over the leading dimension: `[B,m,k]·[B,k,n] -> [B,m,n]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 3 || b.rank() != 3 {
        return Err(shape_err!(
            "bmm expects 3-D operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if bs != bs2 || k != k2 {
        return Err(shape_err!(
            "bmm shapes do not compose: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); bs * m * n];
    for (i, chunk) in out.chunks_mut(m * n).enumerate() {
        mm_kernel(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
            MatLayout::NN,
            chunk,
        );
    }
    Tensor::from_vec(&[bs, m, n], out)
}

/// Batched `A·Bᵀ`: `[B,m,k]·[B,n,k] -> [B,m,n]`.
pub fn bmm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bs2, n, k2) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if bs != bs2 || k != k2 {
        return Err(shape_err!(
            "bmm_nt shapes do not compose: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); bs * m * n];
    for (i, chunk) in out.chunks_mut(m * n).enumerate() {
        mm_kernel(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * n * k..(i + 1) * n * k],
            m,
            k,
            n,
            MatLayout::NT,
            chunk,
        );
    }
    Tensor::from_vec(&[bs, m, n], out)
}

/// Batched `Aᵀ·B`: `[B,k,m]·[B,k,n] -> [B,m,n]`.
pub fn bmm_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, k, m) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if bs != bs2 || k != k2 {
        return Err(shape_err!(
            "bmm_tn shapes do not compose: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); bs * m * n];
    for (i, chunk) in out.chunks_mut(m * n).enumerate() {
        mm_kernel(
            &a.data()[i * k * m..(i + 1) * k * m],
            &b.data()[i * k * n..(i + 1) * k * n],
            m,
            k,
            n,
            MatLayout::TN,
            chunk,
        );
    }
    Tensor::from_vec(&[bs, m, n], out)
}

/// Reorder axes; `order` is a permutation of `0..rank`.
pub fn permute<T: Scalar>(x: &Tensor<T>, order: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    if order.len() != rank {
        return Err(usage_err!(
            "permutation {:?} does not match rank {}",
            order,
            rank
        ));
    }
    let mut seen = vec![false; rank];
    for &axis in order {
        if axis >= rank || seen[axis] {
            return Err(usage_err!("invalid permutation {:?}", order));
        }
        seen[axis] = true;
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = order.iter().map(|&axis| in_shape[axis]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut data = vec![T::zero(); x.numel()];
    // For each output element, map its multi-index back through the permutation.
    for (flat, slot) in data.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..rank {
            let idx = rem / out_strides[d];
            rem %= out_strides[d];
            src += idx * in_strides[order[d]];
        }
        *slot = x.data()[src];
    }
    Tensor::from_vec(&out_shape, data)
}

/// The permutation that undoes `order`.
pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (i, &axis) in order.iter().enumerate() {
        inv[axis] = i;
    }
    inv
}

pub fn concat<T: Scalar>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if inputs.is_empty() {
        return Err(usage_err!("concat needs at least one input"));
    }
    let rank = inputs[0].rank();
    if axis >= rank {
        return Err(usage_err!("concat axis {} out of range for rank {}", axis, rank));
    }
    let mut out_shape = inputs[0].shape().to_vec();
    let mut axis_total = 0usize;
    for t in inputs {
        if t.rank() != rank {
            return Err(shape_err!("concat inputs differ in rank"));
        }
        for d in 0..rank {
            if d != axis && t.shape()[d] != out_shape[d] {
                return Err(shape_err!(
                    "concat inputs differ off-axis: {:?} vs {:?}",
                    t.shape(),
                    out_shape
                ));
            }
        }
        axis_total += t.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = vec![T::zero(); outer * axis_total * inner];
    let mut offset = 0usize;
    for t in inputs {
        let len_axis = t.shape()[axis];
        for o in 0..outer {
            let src_base = o * len_axis * inner;
            let dst_base = (o * axis_total + offset) * inner;
            data[dst_base..dst_base + len_axis * inner]
                .copy_from_slice(&t.data()[src_base..src_base + len_axis * inner]);
        }
        offset += len_axis;
    }
    Tensor::from_vec(&out_shape, data)
}

/// Split a gradient back into the pieces `concat` joined.
pub fn split<T: Scalar>(x: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let rank = x.rank();
    let total: usize = sizes.iter().sum();
    if axis >= rank || total != x.shape()[axis] {
        return Err(usage_err!(
            "split sizes {:?} do not cover axis {} of {:?}",
            sizes,
            axis,
            x.shape()
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut pieces = Vec::with_capacity(sizes.len());
    let mut offset = 0usize;
    for &len_axis in sizes {
        let mut shape = x.shape().to_vec();
        shape[axis] = len_axis;
        let mut data = vec![T::zero(); outer * len_axis * inner];
        for o in 0..outer {
            let src_base = (o * total + offset) * inner;
            let dst_base = o * len_axis * inner;
            data[dst_base..dst_base + len_axis * inner]
                .copy_from_slice(&x.data()[src_base..src_base + len_axis * inner]);
        }
        pieces.push(Tensor::from_vec(&shape, data)?);
        offset += len_axis;
    }
    Ok(pieces)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip(b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip(b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip(b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: f64) -> Tensor<T> {
    a.map(|x| T::from_f64(x.to_f64() * factor))
}

/// Reduction kind for [`reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
}

/// Reduce one axis, keeping it with size 1. For `Max` the argmax offsets
/// along the reduced axis are returned for gradient routing.
pub fn reduce<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    kind: ReduceKind,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let rank = x.rank();
    if axis >= rank {
        return Err(usage_err!("reduce axis {} out of range for rank {}", axis, rank));
    }
    let len_axis = x.shape()[axis];
    if len_axis == 0 {
        return Err(usage_err!("reduce over empty axis"));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = 1;
    let mut data = vec![T::zero(); outer * inner];
    let mut argmax = if kind == ReduceKind::Max {
        Some(vec![0usize; outer * inner])
    } else {
        None
    };
    for o in 0..outer {
        for i in 0..inner {
            let slot = o * inner + i;
            match kind {
                ReduceKind::Max => {
                    let mut best = x.data()[o * len_axis * inner + i];
                    let mut best_k = 0usize;
                    for k in 1..len_axis {
                        let v = x.data()[(o * len_axis + k) * inner + i];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    data[slot] = best;
                    argmax.as_mut().unwrap()[slot] = best_k;
                }
                ReduceKind::Mean => {
                    let mut acc = T::zero();
                    for k in 0..len_axis {
                        acc += x.data()[(o * len_axis + k) * inner + i];
                    }
                    data[slot] = acc / T::from_f64(len_axis as f64);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&out_shape, data)?, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        let shape = [rows.len(), rows[0].len()];
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(&shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t2(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn transposed_layouts_agree_with_plain() {
        let a = t2(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]); // [2,3]
        let b = t2(&[&[0.5, 2.0], &[1.0, -1.0], &[2.0, 0.0]]); // [3,2]
        let plain = matmul(&a, &b).unwrap();

        // NT: b stored as [2,3]
        let bt = permute(&b, &[1, 0]).unwrap();
        let mut out = vec![0.0f64; 4];
        mm_kernel(a.data(), bt.data(), 2, 3, 2, MatLayout::NT, &mut out);
        assert_eq!(out, plain.data());

        // TN: a stored as [3,2]
        let at = permute(&a, &[1, 0]).unwrap();
        let mut out = vec![0.0f64; 4];
        mm_kernel(at.data(), b.data(), 2, 3, 2, MatLayout::TN, &mut out);
        assert_eq!(out, plain.data());
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 3], |i| (i as f64) * 0.3 - 1.0);
        let b = Tensor::<f64>::from_fn(&[2, 3, 2], |i| (i as f64) * 0.1 + 0.2);
        let c = bmm(&a, &b).unwrap();
        for batch in 0..2 {
            let a_slice =
                Tensor::from_vec(&[2, 3], a.data()[batch * 6..(batch + 1) * 6].to_vec()).unwrap();
            let b_slice =
                Tensor::from_vec(&[3, 2], b.data()[batch * 6..(batch + 1) * 6].to_vec()).unwrap();
            let expect = matmul(&a_slice, &b_slice).unwrap();
            assert_eq!(&c.data()[batch * 4..(batch + 1) * 4], expect.data());
        }
    }

    #[test]
    fn permute_round_trip_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| (i as f64).sin());
        let order = [2, 0, 3, 1];
        let p = permute(&x, &order).unwrap();
        let back = permute(&p, &inverse_permutation(&order)).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 2], |i| 100.0 + i as f64);
        let joined = concat(&[&a, &b], 1).unwrap();
        assert_eq!(joined.shape(), &[2, 5, 2]);
        let pieces = split(&joined, 1, &[2, 3]).unwrap();
        assert_eq!(pieces[0], a);
        assert_eq!(pieces[1], b);
    }

    #[test]
    fn reduce_max_routes_argmax() {
        let x = Tensor::<f64>::from_vec(&[1, 3, 2], vec![1.0, 5.0, 9.0, 2.0, 4.0, 3.0]).unwrap();
        let (m, arg) = reduce(&x, 1, ReduceKind::Max).unwrap();
        assert_eq!(m.shape(), &[1, 1, 2]);
        assert_eq!(m.data(), &[9.0, 5.0]);
        assert_eq!(arg.unwrap(), vec![1, 0]);
    }

    #[test]
    fn reduce_mean_matches_hand_value() {
        let x = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (m, _) = reduce(&x, 0, ReduceKind::Mean).unwrap();
        assert_eq!(m.data(), &[2.0, 3.0]);
    }
}
