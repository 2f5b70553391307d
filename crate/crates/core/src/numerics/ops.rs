//! Differentiable operations over [`Tensor`].
//!
//! Matrices are `[rows, cols]`; vectors are treated as a single row wherever a
//! matrix is expected, and results keep the caller's rank.

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Contract(format!("expected vector or matrix, got {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `out[m×n] = a[m×k] · b[k×n]`, i-k-j loop order.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · bᵀ` where `b` is `[n×k]`.
fn gemm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k×n] = aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`.
fn gemm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(grow) {
                *o += x * y;
            }
        }
    }
    out
}

/// Matrix product. A vector left operand is treated as `[1×k]` and the
/// result is returned as a vector.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a)?;
    let (k2, n) = match b.shape() {
        [r, c] => (*r, *c),
        _ => return Err(Error::shape("matmul", a.shape(), b.shape())),
    };
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let out = gemm(a.values(), b.values(), m, k, n);
    let shape = if a.shape().len() == 1 { vec![n] } else { vec![m, n] };
    let (av, bv) = (a.values().to_vec(), b.values().to_vec());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(out, shape, vec![a.clone(), b.clone()], move |g| {
        let ga = need_a.then(|| gemm_bt(g, &bv, m, n, k));
        let gb = need_b.then(|| gemm_at(&av, g, m, k, n));
        vec![ga, gb]
    }))
}

/// `x·W + b` with `x` of shape `[d_in]` or `[batch×d_in]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(x)?;
    let (k2, n) = match w.shape() {
        [r, c] => (*r, *c),
        _ => return Err(Error::shape("affine", x.shape(), w.shape())),
    };
    if k != k2 {
        return Err(Error::shape("affine", x.shape(), w.shape()));
    }
    if b.shape() != [n] {
        return Err(Error::shape("affine", w.shape(), b.shape()));
    }
    let mut out = gemm(x.values(), w.values(), m, k, n);
    for row in out.chunks_mut(n) {
        row.iter_mut().zip(b.values()).for_each(|(o, bi)| *o += bi);
    }
    let shape = if x.shape().len() == 1 { vec![n] } else { vec![m, n] };
    let (xv, wv) = (x.values().to_vec(), w.values().to_vec());
    let (need_x, need_w, need_b) = (x.requires_grad(), w.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(
        out,
        shape,
        vec![x.clone(), w.clone(), b.clone()],
        move |g| {
            let gx = need_x.then(|| gemm_bt(g, &wv, m, n, k));
            let gw = need_w.then(|| gemm_at(&xv, g, m, k, n));
            let gb = need_b.then(|| {
                let mut acc = vec![0.0; n];
                for row in g.chunks(n) {
                    acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                acc
            });
            vec![gx, gw, gb]
        },
    ))
}

fn elementwise(
    a: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64 + Send + Sync + 'static,
) -> Tensor {
    let out = a.values().iter().map(|&x| f(x)).collect();
    let av = a.values().to_vec();
    Tensor::from_op(out, a.shape().to_vec(), vec![a.clone()], move |g| {
        vec![Some(g.iter().zip(&av).map(|(gi, &x)| gi * df(x)).collect())]
    })
}

/// Elementwise `max(x, 0)`; subgradient 0 at the kink.
pub fn relu(x: &Tensor) -> Tensor {
    elementwise(x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
}

fn log_sigmoid_scalar(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise `log σ(x)` in the overflow-free form `min(x,0) − log1p(e^{−|x|})`.
pub fn log_sigmoid(x: &Tensor) -> Tensor {
    // d/dx log σ(x) = σ(−x)
    elementwise(x, log_sigmoid_scalar, |v| sigmoid_scalar(-v))
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    elementwise(x, |v| v * c, move |_| c)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        |g| vec![Some(g.to_vec()), Some(g.to_vec())],
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        |g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
    ))
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    let (av, bv) = (a.values().to_vec(), b.values().to_vec());
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        move |g| {
            vec![
                Some(g.iter().zip(&bv).map(|(gi, y)| gi * y).collect()),
                Some(g.iter().zip(&av).map(|(gi, x)| gi * x).collect()),
            ]
        },
    ))
}

/// Sum of all elements as a scalar.
pub fn sum(x: &Tensor) -> Tensor {
    let n = x.len();
    Tensor::from_op(
        vec![x.values().iter().sum()],
        vec![],
        vec![x.clone()],
        move |g| vec![Some(vec![g[0]; n])],
    )
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Plain (non-differentiable) softmax of a slice.
pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_row(x, &mut out);
    out
}

/// Row-wise softmax over the trailing dimension, shift-stabilised.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (m, n) = as_matrix(x)?;
    if n == 0 {
        return Err(Error::Contract("softmax over empty axis".into()));
    }
    let mut out = vec![0.0; m * n];
    for (row, o) in x.values().chunks(n).zip(out.chunks_mut(n)) {
        softmax_row(row, o);
    }
    let y = out.clone();
    Ok(Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], move |g| {
        let mut gx = vec![0.0; m * n];
        for r in 0..m {
            let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..n {
                gx[r * n + j] = yr[j] * (gr[j] - dot);
            }
        }
        vec![Some(gx)]
    }))
}

/// Mean over rows of `−log softmax(scores_r)[target_r]`. A vector `scores`
/// is one row and takes a single target.
pub fn cross_entropy(scores: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (m, n) = as_matrix(scores)?;
    if targets.len() != m {
        return Err(Error::shape("cross_entropy", scores.shape(), &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Index { index: bad, len: n });
    }
    let mut probs = vec![0.0; m * n];
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &scores.values()[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        softmax_row(row, &mut probs[r * n..(r + 1) * n]);
    }
    let inv = 1.0 / m as f64;
    let targets = targets.to_vec();
    Ok(Tensor::from_op(
        vec![loss * inv],
        vec![],
        vec![scores.clone()],
        move |g| {
            let mut gs = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                gs[r * n + t] -= 1.0;
            }
            gs.iter_mut().for_each(|v| *v *= g[0] * inv);
            vec![Some(gs)]
        },
    ))
}

/// Row-wise mixture `y_r = Σ_n w[r,n] · e_n[r]`.
///
/// Terms whose weight is exactly zero are skipped, so a one-hot row reproduces
/// the selected expert's output exactly. An expert may be `None` only if every
/// weight pointing at it is zero and the weights carry no gradient.
pub fn weighted_sum(weights: &Tensor, experts: &[Option<Tensor>]) -> Result<Tensor> {
    let (m, count) = as_matrix(weights)?;
    if count != experts.len() {
        return Err(Error::shape("weighted_sum", weights.shape(), &[experts.len()]));
    }
    let Some(first) = experts.iter().flatten().next() else {
        return Err(Error::Contract("weighted_sum with no evaluated experts".into()));
    };
    let out_shape = first.shape().to_vec();
    let d = first.cols();
    for e in experts.iter().flatten() {
        if e.shape() != out_shape.as_slice() || e.rows() != m {
            return Err(Error::shape("weighted_sum", &out_shape, e.shape()));
        }
    }
    let w = weights.values();
    if weights.requires_grad() && experts.iter().any(Option::is_none) {
        return Err(Error::Contract(
            "trainable weights need every expert evaluated".into(),
        ));
    }
    let mut out = vec![0.0; m * d];
    for r in 0..m {
        let orow = &mut out[r * d..(r + 1) * d];
        let mut started = false;
        for (n, e) in experts.iter().enumerate() {
            let wn = w[r * count + n];
            if wn == 0.0 {
                continue;
            }
            let Some(e) = e else {
                return Err(Error::Contract(format!("expert {n} selected but not evaluated")));
            };
            let erow = e.row(r);
            if started {
                orow.iter_mut().zip(erow).for_each(|(o, x)| *o += wn * x);
            } else {
                orow.iter_mut().zip(erow).for_each(|(o, x)| *o = wn * x);
                started = true;
            }
        }
    }
    let wv = w.to_vec();
    let evals: Vec<Option<Vec<f64>>> = experts
        .iter()
        .map(|e| e.as_ref().map(|t| t.values().to_vec()))
        .collect();
    let need_w = weights.requires_grad();
    let mut parents = vec![weights.clone()];
    parents.extend(experts.iter().flatten().cloned());
    Ok(Tensor::from_op(out, out_shape, parents, move |g| {
        let mut grads = Vec::with_capacity(count + 1);
        grads.push(need_w.then(|| {
            let mut gw = vec![0.0; m * count];
            for (n, e) in evals.iter().enumerate() {
                if let Some(e) = e {
                    for r in 0..m {
                        gw[r * count + n] = g[r * d..(r + 1) * d]
                            .iter()
                            .zip(&e[r * d..(r + 1) * d])
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                }
            }
            gw
        }));
        for (n, e) in evals.iter().enumerate() {
            if e.is_none() {
                continue;
            }
            let mut ge = vec![0.0; m * d];
            for r in 0..m {
                let wn = wv[r * count + n];
                if wn == 0.0 {
                    continue;
                }
                for j in 0..d {
                    ge[r * d + j] = wn * g[r * d + j];
                }
            }
            grads.push(Some(ge));
        }
        grads
    }))
}

/// Forward value `hard`, backward gradient routed unchanged into `soft`.
pub fn straight_through(hard: Vec<f64>, soft: &Tensor) -> Result<Tensor> {
    if hard.len() != soft.len() {
        return Err(Error::shape("straight_through", &[hard.len()], soft.shape()));
    }
    Ok(Tensor::from_op(
        hard,
        soft.shape().to_vec(),
        vec![soft.clone()],
        |g| vec![Some(g.to_vec())],
    ))
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: Vec<Vec<f64>>) -> Tensor {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = m(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = m(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.values(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = m(vec![vec![1.5, -2.0], vec![0.25, 4.0]]);
        let eye = m(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(matmul(&z, &a).unwrap(), z);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn affine_cases() {
        let w = m(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = Tensor::vector(vec![1.0, 2.0]);
        let y = affine(&Tensor::vector(vec![1.0, 1.0]), &w, &b).unwrap();
        assert_eq!(y.values(), &[2.0, 3.0]);
        let y0 = affine(&Tensor::zeros(&[2]), &w, &b).unwrap();
        assert_eq!(y0.values(), b.values());
        let zw = Tensor::zeros(&[2, 2]);
        let zb = Tensor::zeros(&[2]);
        let y1 = affine(&Tensor::vector(vec![3.0, -1.0]), &zw, &zb).unwrap();
        assert_eq!(y1.values(), &[0.0, 0.0]);
        assert!(affine(&Tensor::zeros(&[3]), &w, &b).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor::param(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        let y = relu(&x);
        assert_eq!(y.values(), &[0.0, 0.0, 2.0]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
        let neg = relu(&Tensor::vector(vec![-3.0, -0.5]));
        assert_eq!(neg.values(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::vector(vec![0.7; 4])).unwrap();
        u.values().iter().for_each(|&p| assert_relative_eq!(p, 0.25, epsilon = 1e-15));
        let s = softmax(&Tensor::vector(vec![10.0, 0.0, 0.0])).unwrap();
        let tail = 1.0 / (10f64.exp() + 2.0);
        assert_relative_eq!(s.values()[0], 10f64.exp() * tail, epsilon = 1e-15);
        assert_relative_eq!(s.values()[0], 0.99991, epsilon = 1e-5);
        assert_relative_eq!(s.values()[1], 4.5e-5, epsilon = 1e-6);
        let shifted = softmax(&Tensor::vector(vec![110.0, 100.0, 100.0])).unwrap();
        for (a, b) in s.values().iter().zip(shifted.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_sigmoid_cases() {
        let y = log_sigmoid(&Tensor::vector(vec![0.0, -1000.0, 1000.0, 1e6, -1e6]));
        let v = y.values();
        assert_relative_eq!(v[0], -std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(v[1], -1000.0, epsilon = 1e-12);
        assert!(v[2] <= 0.0 && v[2] > -1e-300);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = cross_entropy(&Tensor::zeros(&[16]), &[3]).unwrap();
        assert_relative_eq!(uniform.item().unwrap(), 16f64.ln(), epsilon = 1e-14);
        let mut peaked = vec![0.0; 16];
        peaked[5] = 50.0;
        let p = cross_entropy(&Tensor::vector(peaked.clone()), &[5]).unwrap();
        assert!(p.item().unwrap() < 1e-19);
        assert!(p.item().unwrap() >= 0.0);
        let shifted: Vec<f64> = peaked.iter().map(|x| x - 7.0).collect();
        let ps = cross_entropy(&Tensor::vector(shifted), &[5]).unwrap();
        assert_relative_eq!(p.item().unwrap(), ps.item().unwrap(), epsilon = 1e-15);
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[4]), &[4]),
            Err(Error::Index { index: 4, len: 4 })
        ));
    }

    #[test]
    fn product_rule() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let y = Tensor::param(vec![-2.0], &[1]).unwrap();
        sum(&mul(&x, &y).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-2.0]);
        assert_eq!(y.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn weighted_sum_one_hot_is_exact() {
        let e0 = Tensor::vector(vec![0.1, 0.2, 0.3]).reshape(&[1, 3]).unwrap();
        let e1 = Tensor::vector(vec![-1.0 / 3.0, 1e-17, 7.0]).reshape(&[1, 3]).unwrap();
        let w = Tensor::new(vec![0.0, 1.0], &[1, 2]).unwrap();
        let y = weighted_sum(&w, &[Some(e0.clone()), Some(e1.clone())]).unwrap();
        assert_eq!(y.values(), e1.values());
        let y2 = weighted_sum(&w, &[None, Some(e1.clone())]).unwrap();
        assert_eq!(y2.values(), e1.values());
    }

    #[test]
    fn straight_through_passes_gradient() {
        let soft = Tensor::param(vec![0.3, 0.7], &[2]).unwrap();
        let st = straight_through(vec![0.0, 1.0], &soft).unwrap();
        assert_eq!(st.values(), &[0.0, 1.0]);
        let c = Tensor::vector(vec![2.0, 5.0]);
        sum(&mul(&st, &c).unwrap()).backward().unwrap();
        assert_eq!(soft.grad().unwrap(), vec![2.0, 5.0]);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
    }
}
