use super::kernels::{self, AttnGeom};
use super::{shape_err, Result, Scalar, Tensor, TensorError};

/// Variance floor added inside [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
    }
    let out = kernels::matmul(a.data(), b.data(), m, k, n);
    Ok(Tensor::record(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        0,
        Box::new(move |g, p| {
            let da = p[0]
                .requires_grad()
                .then(|| kernels::matmul_nt(g, p[1].data(), m, n, k));
            let db = p[1]
                .requires_grad()
                .then(|| kernels::matmul_tn(p[0].data(), g, m, k, n));
            vec![da, db]
        }),
    ))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::record(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        0,
        Box::new(|g, p| {
            vec![
                p[0].requires_grad().then(|| g.to_vec()),
                p[1].requires_grad().then(|| g.to_vec()),
            ]
        }),
    ))
}

/// Adds a bias row (`[n]` or `[1×n]`) to every row of `a [m×n]`.
pub fn add_row<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("add_row")?;
    if bias.numel() != n || bias.shape().len() > 2 || (bias.shape().len() == 2 && bias.shape()[0] != 1) {
        return Err(shape_err("add_row", format!("bias {:?} for {m}×{n}", bias.shape())));
    }
    let b = bias.data();
    let out = a
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
        .collect();
    Ok(Tensor::record(
        vec![m, n],
        out,
        vec![a.clone(), bias.clone()],
        0,
        Box::new(move |g, p| {
            let db = p[1].requires_grad().then(|| {
                let mut acc = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                acc
            });
            vec![p[0].requires_grad().then(|| g.to_vec()), db]
        }),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::record(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        0,
        Box::new(|g, p| {
            let da = p[0]
                .requires_grad()
                .then(|| g.iter().zip(p[1].data()).map(|(&g, &y)| g * y).collect());
            let db = p[1]
                .requires_grad()
                .then(|| g.iter().zip(p[0].data()).map(|(&g, &x)| g * x).collect());
            vec![da, db]
        }),
    ))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    let s = T::lit(s);
    let out = a.data().iter().map(|&x| x * s).collect();
    Ok(Tensor::record(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        0,
        Box::new(move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
    ))
}

/// Sum of all elements as a `[1]` tensor.
pub fn sum<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let total = a.data().iter().fold(T::zero(), |acc, &v| acc + v);
    let n = a.numel();
    Ok(Tensor::record(
        vec![1],
        vec![total],
        vec![a.clone()],
        0,
        Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
    ))
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let out = a.data().iter().map(|&x| x.max(T::zero())).collect();
    Ok(Tensor::record(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        0,
        Box::new(|g, p| {
            vec![Some(
                g.iter()
                    .zip(p[0].data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        }),
    ))
}

pub fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("softmax_rows")?;
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(n) {
        kernels::softmax_in_place(row);
    }
    let probs = out.clone();
    Ok(Tensor::record(
        vec![m, n],
        out,
        vec![a.clone()],
        0,
        Box::new(move |g, _| {
            let mut dx = vec![T::zero(); m * n];
            for ((p, dy), d) in probs.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                kernels::softmax_row_backward(p, dy, d);
            }
            vec![Some(dx)]
        }),
    ))
}

/// Normalizes each row to zero mean and unit variance, then applies
/// `gain ⊙ x̂ + bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("layer_norm")?;
    if gain.numel() != n || bias.numel() != n {
        return Err(shape_err(
            "layer_norm",
            format!("gain {:?} / bias {:?} for width {n}", gain.shape(), bias.shape()),
        ));
    }
    let inv_n = T::lit(1.0 / n as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut xhat = vec![T::zero(); m * n];
    let mut rstd = vec![T::zero(); m];
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_n;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for c in 0..n {
            let h = (row[c] - mean) * r;
            xhat[i * n + c] = h;
            out[i * n + c] = h * gain.data()[c] + bias.data()[c];
        }
    }
    Ok(Tensor::record(
        vec![m, n],
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        m * n + m,
        Box::new(move |g, p| {
            let gain = p[1].data();
            let dx = p[0].requires_grad().then(|| {
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    let hi = &xhat[i * n..(i + 1) * n];
                    let mut sum_d = T::zero();
                    let mut sum_dh = T::zero();
                    for c in 0..n {
                        let d = gi[c] * gain[c];
                        sum_d = sum_d + d;
                        sum_dh = sum_dh + d * hi[c];
                    }
                    for c in 0..n {
                        let d = gi[c] * gain[c];
                        dx[i * n + c] = rstd[i] * inv_n * (T::lit(n as f64) * d - sum_d - hi[c] * sum_dh);
                    }
                }
                dx
            });
            let dgain = p[1].requires_grad().then(|| {
                let mut acc = vec![T::zero(); n];
                for i in 0..m {
                    for c in 0..n {
                        acc[c] = acc[c] + g[i * n + c] * xhat[i * n + c];
                    }
                }
                acc
            });
            let dbias = p[2].requires_grad().then(|| {
                let mut acc = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                acc
            });
            vec![dx, dgain, dbias]
        }),
    ))
}

/// Mean softmax cross-entropy of `logits [B×C]` against integer labels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (b, c) = logits.dims2("cross_entropy")?;
    if labels.len() != b {
        return Err(shape_err("cross_entropy", format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::LabelOutOfRange { label: bad, classes: c });
    }
    let mut probs = logits.data().to_vec();
    let mut total = T::zero();
    for (row, &label) in probs.chunks_mut(c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
        total = total + (lse - row[label]);
        kernels::softmax_in_place(row);
    }
    let inv_b = T::lit(1.0 / b as f64);
    let labels = labels.to_vec();
    Ok(Tensor::record(
        vec![1],
        vec![total * inv_b],
        vec![logits.clone()],
        b * c,
        Box::new(move |g, _| {
            let scale = g[0] * inv_b;
            let mut d = probs.clone();
            for (row, &label) in d.chunks_mut(c).zip(&labels) {
                row[label] = row[label] - T::one();
                for v in row.iter_mut() {
                    *v = *v * scale;
                }
            }
            vec![Some(d)]
        }),
    ))
}

/// Selects rows of `table` by index (embedding lookup / row pick).
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let (rows, n) = table.dims2("gather_rows")?;
    if indices.is_empty() {
        return Err(shape_err("gather_rows", "empty index list"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(TensorError::IndexOutOfRange { index: bad, rows });
    }
    let mut out = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        out.extend_from_slice(&table.data()[i * n..(i + 1) * n]);
    }
    let indices = indices.to_vec();
    Ok(Tensor::record(
        vec![indices.len(), n],
        out,
        vec![table.clone()],
        0,
        Box::new(move |g, _| {
            let mut d = vec![T::zero(); rows * n];
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..n {
                    d[i * n + c] = d[i * n + c] + g[r * n + c];
                }
            }
            vec![Some(d)]
        }),
    ))
}

/// Concatenates rank-2 tensors along columns. A single part is returned as is.
pub fn concat_cols<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no parts"))?;
    if parts.len() == 1 {
        return Ok(first.clone());
    }
    let m = first.dims2("concat_cols")?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.dims2("concat_cols")?;
        if pm != m {
            return Err(shape_err("concat_cols", format!("row count {pm} vs {m}")));
        }
        widths.push(pn);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * total);
    for i in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor::record(
        vec![m, total],
        out,
        parts.to_vec(),
        0,
        Box::new(move |g, p| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for (part, &w) in p.iter().zip(&widths) {
                grads.push(part.requires_grad().then(|| {
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    d
                }));
                offset += w;
            }
            grads
        }),
    ))
}

/// Block-diagonal softmax attention: `q`, `k`, `v` are `[samples·seq × heads·d_head]`
/// and each (sample, head) block attends only within itself. Output has the
/// same layout. `scaled` applies the `1/√d_head` score factor.
pub fn attention_core<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    seq_len: usize,
    heads: usize,
    scaled: bool,
) -> Result<Tensor<T>> {
    let (rows, width) = q.dims2("attention_core")?;
    same_shape("attention_core", q, k)?;
    same_shape("attention_core", q, v)?;
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(shape_err("attention_core", format!("{rows} rows not divisible by seq_len {seq_len}")));
    }
    if heads == 0 || width % heads != 0 {
        return Err(shape_err("attention_core", format!("width {width} not divisible by {heads} heads")));
    }
    let geom = AttnGeom {
        samples: rows / seq_len,
        seq: seq_len,
        heads,
        d_head: width / heads,
    };
    let score_scale = if scaled {
        T::lit(1.0 / (geom.d_head as f64).sqrt())
    } else {
        T::one()
    };
    let (z, probs) = kernels::attention_forward(q.data(), k.data(), v.data(), geom, score_scale);
    let aux = probs.len();
    Ok(Tensor::record(
        vec![rows, width],
        z,
        vec![q.clone(), k.clone(), v.clone()],
        aux,
        Box::new(move |g, p| {
            let (dq, dk, dv) = kernels::attention_backward(
                p[0].data(),
                p[1].data(),
                p[2].data(),
                &probs,
                g,
                geom,
                score_scale,
            );
            vec![
                p[0].requires_grad().then_some(dq),
                p[1].requires_grad().then_some(dk),
                p[2].requires_grad().then_some(dv),
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i2, &m).unwrap().data(), m.data());
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let e = matmul(&t(&[2, 3], &[0.0; 6]), &t(&[2, 3], &[0.0; 6])).unwrap_err();
        assert!(matches!(e, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_rows(&t(&[1, 2], &[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        let big = softmax_rows(&t(&[1, 2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        let f = Tensor::<f32>::from_f64(vec![1, 2], &[1000.0, 1000.0]).unwrap();
        assert_eq!(softmax_rows(&f).unwrap().data(), &[0.5f32, 0.5]);
        let r = softmax_rows(&t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (got, x) in r.data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - x.exp() / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_and_cross_entropy_examples() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).unwrap().data(), &[0.0, 0.0, 2.0]);
        let ce = cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[0]).unwrap();
        assert!((ce.item() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(
            cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &[2]).unwrap_err(),
            TensorError::LabelOutOfRange { label: 2, classes: 2 }
        );
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let g = t(&[3], &[1.0; 3]);
        let b = t(&[3], &[0.0; 3]);
        let y = layer_norm(&t(&[1, 3], &[1.0, 2.0, 3.0]), &g, &b).unwrap();
        let mean = y.data().iter().sum::<f64>() / 3.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        // unit variance up to the ε floor: var / (var + ε) with var = 2/3
        let expected = (2.0 / 3.0) / (2.0 / 3.0 + LAYER_NORM_EPS);
        assert!((var - expected).abs() < 1e-12);
        assert!((var - 1.0).abs() < 2e-5);
    }

    #[test]
    fn add_row_broadcasts_bias() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = add_row(&a, &t(&[2], &[10.0, 20.0])).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        assert!(add_row(&a, &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn concat_routes_gradients_to_parts() {
        let a = Tensor::<f64>::param(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::param(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = sum(&mul(&c, &w).unwrap()).unwrap();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let table = Tensor::<f64>::param(vec![3, 2], vec![0.0; 6]).unwrap();
        let g = gather_rows(&table, &[2, 0, 2]).unwrap();
        backward(&sum(&g).unwrap()).unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            gather_rows(&table, &[3]),
            Err(TensorError::IndexOutOfRange { index: 3, rows: 3 })
        ));
    }
}
