//! Scaled dot-product attention, multi-head attention, and attention shared
//! across several views (every view's queries attend over the keys and
//! values of all views).

use stylefield_tensor::Tensor;

use crate::error::{Error, Result};

fn dims(t: &Tensor<f64>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dimension(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

/// Softmax of every row, stabilized by subtracting the row maximum.
pub fn softmax_rows(logits: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (_, cols) = dims(logits, "logits")?;
    let mut out = logits.clone();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// `softmax(Q K^T / sqrt(d_k)) V`.
pub fn attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (_, dq) = dims(q, "Q")?;
    let (mk, dk) = dims(k, "K")?;
    let (mv, dh) = dims(v, "V")?;
    if dq != dk {
        return Err(Error::dimension(format!("Q has {dq} columns but K has {dk}")));
    }
    if mk != mv {
        return Err(Error::dimension(format!("K has {mk} rows but V has {mv}")));
    }
    if dk == 0 || dh == 0 || mk == 0 {
        return Err(Error::dimension("attention needs non-empty keys and values"));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let logits = q.matmul(&k.transpose()?)?.map(|x| x * scale);
    Ok(softmax_rows(&logits)?.matmul(v)?)
}

fn columns(t: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(vec![rows, len], |i| t.data()[(i / len) * cols + start + i % len])
}

/// Attention per head on equal column slices of `Q`, `K` and `V`, with the
/// head outputs concatenated along the value columns.
pub fn multi_head_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize) -> Result<Tensor<f64>> {
    let (m, dk) = dims(q, "Q")?;
    let (_, dh) = dims(v, "V")?;
    if heads == 0 || dk % heads != 0 || dh % heads != 0 {
        return Err(Error::contract(format!(
            "{heads} heads do not divide d_k = {dk} and d_h = {dh}"
        )));
    }
    if dims(k, "K")?.1 != dk {
        return Err(Error::dimension(format!("Q has {dk} columns but K has {}", k.shape()[1])));
    }
    let (sk, sh) = (dk / heads, dh / heads);
    let mut out = vec![0.0; m * dh];
    for h in 0..heads {
        let head = attention(&columns(q, h * sk, sk), &columns(k, h * sk, sk), &columns(v, h * sh, sh))?;
        for r in 0..m {
            out[r * dh + h * sh..r * dh + (h + 1) * sh].copy_from_slice(&head.data()[r * sh..(r + 1) * sh]);
        }
    }
    Ok(Tensor::new(vec![m, dh], out)?)
}

fn stack_rows(parts: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let cols = parts[0].shape()[1];
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// Per-view outputs where view `i` computes `Attn(Q_i, [K_1..K_n], [V_1..V_n])`.
pub fn shared_attention(q: &[Tensor<f64>], k: &[Tensor<f64>], v: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    if q.is_empty() || q.len() != k.len() || q.len() != v.len() {
        return Err(Error::dimension(format!(
            "{} query, {} key and {} value views",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    let reference = (q[0].shape().to_vec(), k[0].shape().to_vec(), v[0].shape().to_vec());
    for i in 0..q.len() {
        dims(&q[i], "Q")?;
        dims(&k[i], "K")?;
        dims(&v[i], "V")?;
        if (q[i].shape(), k[i].shape(), v[i].shape())
            != (reference.0.as_slice(), reference.1.as_slice(), reference.2.as_slice())
        {
            return Err(Error::dimension(format!(
                "view {i} has Q {:?}, K {:?}, V {:?}; view 0 has {:?}, {:?}, {:?}",
                q[i].shape(),
                k[i].shape(),
                v[i].shape(),
                reference.0,
                reference.1,
                reference.2
            )));
        }
    }
    let keys = stack_rows(k)?;
    let values = stack_rows(v)?;
    q.iter().map(|qi| attention(qi, &keys, &values)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn hand_case() {
        let q = mat(1, 2, &[1.0, 0.0]);
        let eye = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let out = attention(&q, &eye, &eye).unwrap();
        let e = (0.5f64).sqrt().exp();
        let p = e / (e + 1.0);
        assert!((out.data()[0] - p).abs() < 1e-12 && (out.data()[1] - (1.0 - p)).abs() < 1e-12);
        assert!((p - 0.6698).abs() < 1e-4);
    }

    #[test]
    fn shape_errors() {
        let a = mat(2, 2, &[0.0; 4]);
        let b = mat(3, 2, &[0.0; 6]);
        assert!(attention(&a, &a, &b).is_err());
        assert!(multi_head_attention(&a, &a, &a, 3).is_err());
        let err = shared_attention(&[a.clone(), a.clone()], &[a.clone(), b.clone()], &[a.clone(), b]).unwrap_err();
        assert!(err.to_string().contains("view 1"), "{err}");
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let p = softmax_rows(&mat(1, 3, &[1e4, -1e4, 1e4])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.0, 0.5]);
    }
}
