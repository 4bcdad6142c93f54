//! Fully connected layer, ReLU, and softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `y[b, o] = bias[o] + sum_d x[b, d] * w[d, o]`, summed in ascending `d`.
pub fn linear_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::shape("linear", format!("x {:?}, w {:?} must both be rank 2", x.shape(), w.shape())));
    }
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[1];
    if w.shape()[0] != d {
        return Err(Error::Dim {
            op: "linear",
            dim: "input features",
            expected: d,
            got: w.shape()[0],
        });
    }
    if bias.shape() != [o] {
        return Err(Error::Dim {
            op: "linear bias",
            dim: "output features",
            expected: o,
            got: bias.len(),
        });
    }
    let mut y = Vec::with_capacity(b * o);
    for xr in x.data().chunks_exact(d) {
        let mut row = bias.data().to_vec();
        for (&xv, wr) in xr.iter().zip(w.data().chunks_exact(o)) {
            for (r, &wv) in row.iter_mut().zip(wr) {
                *r += xv * wv;
            }
        }
        y.extend(row);
    }
    Tensor::new(vec![b, o], y)
}

pub struct LinearGrads<S> {
    pub dx: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

pub fn linear_backward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, dy: &Tensor<S>) -> Result<LinearGrads<S>> {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[1];
    let mut dx = vec![S::ZERO; b * d];
    let mut dw = vec![S::ZERO; d * o];
    let mut db = vec![S::ZERO; o];
    for bi in 0..b {
        let dyr = &dy.data()[bi * o..(bi + 1) * o];
        let xr = &x.data()[bi * d..(bi + 1) * d];
        for (j, &g) in dyr.iter().enumerate() {
            db[j] += g;
        }
        for di in 0..d {
            let wr = &w.data()[di * o..(di + 1) * o];
            let mut acc = S::ZERO;
            for (&wv, &g) in wr.iter().zip(dyr) {
                acc += wv * g;
            }
            dx[bi * d + di] = acc;
            let xv = xr[di];
            for (dwv, &g) in dw[di * o..(di + 1) * o].iter_mut().zip(dyr) {
                *dwv += xv * g;
            }
        }
    }
    Ok(LinearGrads {
        dx: Tensor::new(vec![b, d], dx)?,
        dw: Tensor::new(vec![d, o], dw)?,
        db: Tensor::new(vec![o], db)?,
    })
}

pub fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::ZERO { v } else { S::ZERO })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > S::ZERO { g } else { S::ZERO })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape as x")
}

/// Row-wise softmax with max subtraction.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax", format!("expected [B, K], got {:?}", logits.shape())));
    }
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().copied().fold(row[0], S::max);
        let e: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: S = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn softmax_xent<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax_xent", format!("expected [B, K], got {:?}", logits.shape())));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Dim {
            op: "softmax_xent",
            dim: "batch (labels)",
            expected: b,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let mut probs = Vec::with_capacity(b * k);
    let mut loss = S::ZERO;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(row[0], S::max);
        let z: S = row.iter().map(|&v| (v - m).exp()).sum();
        let lz = z.ln();
        loss += lz - (row[label] - m);
        probs.extend(row.iter().map(|&v| (v - m - lz).exp()));
    }
    Ok((loss / S::from_usize(b), Tensor::new(vec![b, k], probs)?))
}

/// Gradient of the mean cross-entropy w.r.t. the logits.
pub fn softmax_xent_backward<S: Scalar>(probs: &Tensor<S>, labels: &[usize], dloss: S) -> Tensor<S> {
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = dloss / S::from_usize(b);
    let mut d = probs.data().to_vec();
    for (bi, &l) in labels.iter().enumerate() {
        d[bi * k + l] -= S::ONE;
    }
    for v in &mut d {
        *v *= scale;
    }
    Tensor::new(vec![b, k], d).expect("probs shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xent_of_equal_logits_is_ln2() {
        let l = Tensor::<f64>::zeros(&[1, 2]);
        let (loss, p) = softmax_xent(&l, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(p.to_f64_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn xent_is_stable_for_large_logits() {
        let l = Tensor::<f32>::from_f64(&[1, 3], &[1000.0, 0.0, -1000.0]).unwrap();
        let (loss, p) = softmax_xent(&l, &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(p.all_finite());
    }

    #[test]
    fn xent_rejects_bad_label() {
        let l = Tensor::<f64>::zeros(&[1, 2]);
        assert!(matches!(softmax_xent(&l, &[2]), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::<f64>::from_f64(&[3], &[-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu_forward(&x).to_f64_vec(), vec![0.0, 0.0, 3.0]);
        let g = relu_backward(&x, &Tensor::full(&[3], 1.0));
        assert_eq!(g.to_f64_vec(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_identity() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0]).unwrap();
        let mut w = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear_forward(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert!(y.bitwise_eq(&x));
    }
}
