//! Raw compute kernels. Results are wide-carrier values; callers apply the
//! logical output dtype.

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::numerics::DType;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
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
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// Shape of `a @ b` for `a[..., M, K]` and `b[K, N]` or `b[..., K, N]` with
/// matching batch dimensions.
pub fn matmul_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let bad = || Error::shape(format!("matmul shapes {a:?} and {b:?} are incompatible"));
    if a.len() < 2 || b.len() < 2 {
        return Err(bad());
    }
    let k = a[a.len() - 1];
    if b[b.len() - 2] != k {
        return Err(bad());
    }
    if b.len() > 2 && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(bad());
    }
    let mut out = a[..a.len() - 1].to_vec();
    out.push(b[b.len() - 1]);
    Ok(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` viewed inside a broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Visit every output position in row-major order with the matching flat
/// offsets into each operand.
fn for_each_broadcast<const N: usize>(
    out: &[usize],
    operand_strides: [&[usize]; N],
    mut f: impl FnMut([usize; N]),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; N];
    for _ in 0..total {
        f(offs);
        for d in (0..rank).rev() {
            idx[d] += 1;
            for (o, s) in offs.iter_mut().zip(operand_strides.iter()) {
                *o += s[d];
            }
            if idx[d] < out[d] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(operand_strides.iter()) {
                *o -= s[d] * out[d];
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 && b.rank() <= a.rank() {
        let y = bd[0];
        ad.iter().map(|&x| f(x, y)).collect()
    } else if ad.len() == 1 && a.rank() <= b.rank() {
        let x = ad[0];
        bd.iter().map(|&y| f(x, y)).collect()
    } else {
        let out = broadcast_shapes(a.shape(), b.shape())?;
        let sa = broadcast_strides(a.shape(), &out);
        let sb = broadcast_strides(b.shape(), &out);
        let mut v = Vec::with_capacity(numel(&out));
        for_each_broadcast(&out, [&sa, &sb], |[i, j]| v.push(f(ad[i], bd[j])));
        return Ok(Tensor::from_raw(out, DType::F64, v));
    };
    let shape = if a.rank() >= b.rank() { a.shape() } else { b.shape() };
    Ok(Tensor::from_raw(shape.to_vec(), DType::F64, data))
}

pub(crate) fn select(mask: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if mask.shape() == a.shape() && a.shape() == b.shape() {
        let v = mask
            .data()
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&m, (&x, &y))| if m != 0.0 { x } else { y })
            .collect();
        return Ok(Tensor::from_raw(a.shape().to_vec(), DType::F64, v));
    }
    let out = broadcast_shapes(&broadcast_shapes(mask.shape(), a.shape())?, b.shape())?;
    let sm = broadcast_strides(mask.shape(), &out);
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let (md, ad, bd) = (mask.data(), a.data(), b.data());
    let mut v = Vec::with_capacity(numel(&out));
    for_each_broadcast(&out, [&sm, &sa, &sb], |[i, j, k]| {
        v.push(if md[i] != 0.0 { ad[j] } else { bd[k] })
    });
    Ok(Tensor::from_raw(out, DType::F64, v))
}

pub(crate) fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if broadcast_shapes(x.shape(), shape)? != shape {
        return Err(Error::shape(format!(
            "cannot broadcast {:?} to {:?}",
            x.shape(),
            shape
        )));
    }
    if x.shape() == shape {
        return Ok(Tensor::from_raw(shape.to_vec(), DType::F64, x.data().to_vec()));
    }
    if x.len() == 1 {
        return Ok(Tensor::from_raw(
            shape.to_vec(),
            DType::F64,
            vec![x.data()[0]; numel(shape)],
        ));
    }
    let sx = broadcast_strides(x.shape(), shape);
    let xd = x.data();
    let mut v = Vec::with_capacity(numel(shape));
    for_each_broadcast(shape, [&sx], |[i]| v.push(xd[i]));
    Ok(Tensor::from_raw(shape.to_vec(), DType::F64, v))
}

/// Output shape after removing `axes` (keepdims = false).
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() || axes[..i].contains(&a) {
            return Err(Error::shape(format!(
                "invalid reduction axes {axes:?} for shape {shape:?}"
            )));
        }
    }
    Ok(shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect())
}

/// Fold over `axes`, visiting inputs in row-major order so each output
/// accumulates left to right.
pub(crate) fn reduce(
    x: &Tensor,
    axes: &[usize],
    init: f64,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = reduced_shape(x.shape(), axes)?;
    let xd = x.data();
    // Fast path: reducing a suffix of the axes.
    let rank = x.rank();
    let suffix = axes.len() <= rank && {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.iter().enumerate().all(|(i, &a)| a == rank - axes.len() + i)
    };
    let mut out = vec![init; numel(&out_shape)];
    if suffix {
        let inner: usize = x.shape()[rank - axes.len()..].iter().product();
        if inner > 0 {
            for (o, chunk) in out.iter_mut().zip(xd.chunks_exact(inner)) {
                let mut acc = init;
                for &v in chunk {
                    acc = f(acc, v);
                }
                *o = acc;
            }
        }
    } else {
        // Map each input position to its output offset.
        let mut keep_shape = x.shape().to_vec();
        for &a in axes {
            keep_shape[a] = 1;
        }
        let so = broadcast_strides(&keep_shape, x.shape());
        let mut k = 0;
        for_each_broadcast(x.shape(), [&so], |[o]| {
            out[o] = f(out[o], xd[k]);
            k += 1;
        });
    }
    Ok(Tensor::from_raw(out_shape, DType::F64, out))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = matmul_shape(a.shape(), b.shape())?;
    let k = a.shape()[a.rank() - 1];
    let m = a.shape()[a.rank() - 2];
    let n = b.shape()[b.rank() - 1];
    let batch: usize = a.shape()[..a.rank() - 2].iter().product();
    let shared_b = b.rank() == 2;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; numel(&out_shape)];
    if shared_b {
        // Fold the batch into rows.
        gemm(ad, bd, &mut out, batch * m, k, n);
    } else {
        for t in 0..batch {
            gemm(
                &ad[t * m * k..(t + 1) * m * k],
                &bd[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
    }
    Ok(Tensor::from_raw(out_shape, DType::F64, out))
}

/// `c = a @ b`; each output accumulates over `k` in increasing order.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(format!(
            "invalid permutation {perm:?} for shape {:?}",
            x.shape()
        )));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src = strides(x.shape());
    let perm_strides: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let xd = x.data();
    let mut v = Vec::with_capacity(x.len());
    if rank >= 2 && perm[..rank - 2].iter().enumerate().all(|(i, &p)| p == i)
        && perm[rank - 2] == rank - 1
    {
        // Swap of the two innermost axes.
        let (r, c) = (x.shape()[rank - 2], x.shape()[rank - 1]);
        let blocks = if r * c == 0 { 0 } else { xd.len() / (r * c) };
        for blk in xd.chunks_exact((r * c).max(1)).take(blocks) {
            for j in 0..c {
                for i in 0..r {
                    v.push(blk[i * c + j]);
                }
            }
        }
    } else {
        for_each_broadcast(&out_shape, [&perm_strides], |[i]| v.push(xd[i]));
    }
    Ok(Tensor::from_raw(out_shape, DType::F64, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[3], &[3]).unwrap(), vec![3]);
        assert_eq!(broadcast_shapes(&[2, 1], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[], &[5, 5]).unwrap(), vec![5, 5]);
        assert!(broadcast_shapes(&[2], &[3]).is_err());
        let r = binary(&t(&[2, 1], &[1., 2.]), &t(&[3], &[10., 20., 30.]), |a, b| a + b).unwrap();
        assert_eq!(r.shape(), &[2, 3]);
        assert_eq!(r.data(), &[11., 21., 31., 12., 22., 32.]);
    }

    #[test]
    fn matmul_shapes_and_values() {
        assert_eq!(matmul_shape(&[4, 8], &[8, 2]).unwrap(), vec![4, 2]);
        assert_eq!(matmul_shape(&[3, 4, 8], &[3, 8, 2]).unwrap(), vec![3, 4, 2]);
        assert!(matmul_shape(&[4, 8], &[7, 2]).is_err());
        let r = matmul(&t(&[1, 1], &[2.]), &t(&[1, 1], &[3.])).unwrap();
        assert_eq!(r.data(), &[6.]);
        let a = t(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let b = t(&[2, 2, 1], &[1., 1., 1., 0.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3., 7., 5., 7.]);
        let shared = matmul(&a, &t(&[2, 1], &[1., 0.])).unwrap();
        assert_eq!(shared.shape(), &[2, 2, 1]);
        assert_eq!(shared.data(), &[1., 3., 5., 7.]);
    }

    #[test]
    fn reductions() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(reduce(&x, &[1], 0.0, |a, b| a + b).unwrap().data(), &[6., 15.]);
        assert_eq!(reduce(&x, &[0], 0.0, |a, b| a + b).unwrap().data(), &[5., 7., 9.]);
        let all = reduce(&x, &[0, 1], 0.0, |a, b| a + b).unwrap();
        assert_eq!(all.shape(), &[] as &[usize]);
        assert_eq!(all.item(), 21.);
        assert!(reduce(&x, &[2], 0.0, |a, b| a + b).is_err());
        assert!(reduce(&x, &[1, 1], 0.0, |a, b| a + b).is_err());
    }

    #[test]
    fn transposes() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = transpose(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
        let z = t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let w = transpose(&z, &[1, 0, 2]).unwrap();
        assert_eq!(w.shape(), &[1, 2, 3]);
        assert_eq!(w.data(), z.data());
        let g = transpose(&t(&[2, 3, 1], &[1., 2., 3., 4., 5., 6.]), &[2, 1, 0]).unwrap();
        assert_eq!(g.data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(transpose(&x, &[0, 0]).is_err());
    }

    #[test]
    fn select_and_broadcast() {
        let m = t(&[2], &[1., 0.]);
        let r = select(&m, &t(&[2], &[1., 2.]), &t(&[], &[9.])).unwrap();
        assert_eq!(r.data(), &[1., 9.]);
        let b = broadcast_to(&t(&[2, 1], &[1., 2.]), &[2, 2]).unwrap();
        assert_eq!(b.data(), &[1., 1., 2., 2.]);
        assert!(broadcast_to(&t(&[2], &[1., 2.]), &[3]).is_err());
    }
}
