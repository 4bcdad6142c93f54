//! Per-channel batch normalization over every non-channel axis of `[B, C, *S]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Running variance at initialization: `1 - eps`, so that `run_var + eps == 1`
/// exactly and eval-mode normalization at init is a bitwise identity.
pub fn identity_running_var<S: Scalar>(eps: f64) -> S {
    S::ONE - S::from_f64(eps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<S> {
    pub mode: Mode,
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
}

pub struct BnOutput<S> {
    pub y: Tensor<S>,
    pub saved: BnSaved<S>,
    /// Updated `(running_mean, running_var)`; only produced in train mode.
    pub running: Option<(Tensor<S>, Tensor<S>)>,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("batchnorm", format!("need at least [B, C], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub fn batchnorm_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    run_mean: &Tensor<S>,
    run_var: &Tensor<S>,
    mode: Mode,
    cfg: BnConfig,
) -> Result<BnOutput<S>> {
    if !(cfg.eps > 0.0) {
        return Err(Error::invalid(format!("batchnorm eps must be positive, got {}", cfg.eps)));
    }
    let (b, c, inner) = layout(x.shape())?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", run_mean), ("running_var", run_var)] {
        if t.shape() != [c] {
            return Err(Error::shape("batchnorm", format!("{name} has shape {:?}, expected [{c}]", t.shape())));
        }
    }
    let eps = S::from_f64(cfg.eps);
    let xd = x.data();
    let mut y = vec![S::ZERO; x.len()];
    let mut xhat = vec![S::ZERO; x.len()];
    let mut inv_std = vec![S::ZERO; c];
    let mut running = None;
    match mode {
        Mode::Train => {
            let n = S::from_usize(b * inner);
            let mut new_mean = run_mean.clone();
            let mut new_var = run_var.clone();
            let m = S::from_f64(cfg.momentum);
            for ch in 0..c {
                let mut sum = S::ZERO;
                for bi in 0..b {
                    sum += xd[(bi * c + ch) * inner..][..inner].iter().copied().sum::<S>();
                }
                let mean = sum / n;
                let mut sq = S::ZERO;
                for bi in 0..b {
                    for &v in &xd[(bi * c + ch) * inner..][..inner] {
                        let d = v - mean;
                        sq += d * d;
                    }
                }
                let var = sq / n;
                let is = S::ONE / (var + eps).sqrt();
                inv_std[ch] = is;
                let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
                for bi in 0..b {
                    let off = (bi * c + ch) * inner;
                    for i in off..off + inner {
                        let h = (xd[i] - mean) * is;
                        xhat[i] = h;
                        y[i] = g * h + bt;
                    }
                }
                new_mean.data_mut()[ch] = m * run_mean.data()[ch] + (S::ONE - m) * mean;
                new_var.data_mut()[ch] = m * run_var.data()[ch] + (S::ONE - m) * var;
            }
            running = Some((new_mean, new_var));
        }
        Mode::Eval => {
            for ch in 0..c {
                let is = S::ONE / (run_var.data()[ch] + eps).sqrt();
                inv_std[ch] = is;
                let (g, bt, mean) = (gamma.data()[ch], beta.data()[ch], run_mean.data()[ch]);
                for bi in 0..b {
                    let off = (bi * c + ch) * inner;
                    for i in off..off + inner {
                        let h = (xd[i] - mean) * is;
                        xhat[i] = h;
                        y[i] = g * h + bt;
                    }
                }
            }
        }
    }
    Ok(BnOutput {
        y: Tensor::new(x.shape().to_vec(), y)?,
        saved: BnSaved { mode, xhat, inv_std },
        running,
    })
}

pub struct BnGrads<S> {
    pub dx: Tensor<S>,
    pub dgamma: Tensor<S>,
    pub dbeta: Tensor<S>,
}

pub fn batchnorm_backward<S: Scalar>(dy: &Tensor<S>, gamma: &Tensor<S>, saved: &BnSaved<S>) -> Result<BnGrads<S>> {
    let (b, c, inner) = layout(dy.shape())?;
    let dyd = dy.data();
    let mut dx = vec![S::ZERO; dy.len()];
    let mut dgamma = vec![S::ZERO; c];
    let mut dbeta = vec![S::ZERO; c];
    let n = S::from_usize(b * inner);
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (S::ZERO, S::ZERO);
        for bi in 0..b {
            let off = (bi * c + ch) * inner;
            for i in off..off + inner {
                sdy += dyd[i];
                sdyx += dyd[i] * saved.xhat[i];
            }
        }
        dgamma[ch] = sdyx;
        dbeta[ch] = sdy;
        let g = gamma.data()[ch];
        let is = saved.inv_std[ch];
        for bi in 0..b {
            let off = (bi * c + ch) * inner;
            for i in off..off + inner {
                dx[i] = match saved.mode {
                    Mode::Eval => g * is * dyd[i],
                    Mode::Train => g * is / n * (n * dyd[i] - sdy - saved.xhat[i] * sdyx),
                };
            }
        }
    }
    Ok(BnGrads {
        dx: Tensor::new(dy.shape().to_vec(), dx)?,
        dgamma: Tensor::new(vec![c], dgamma)?,
        dbeta: Tensor::new(vec![c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh(c: usize) -> [Tensor<f64>; 4] {
        [Tensor::full(&[c], 1.0), Tensor::zeros(&[c]), Tensor::zeros(&[c]), Tensor::full(&[c], 1.0)]
    }

    #[test]
    fn eval_at_init_is_identity() {
        let x = Tensor::<f64>::from_f64(&[2, 2, 3], &[0.3, -1.0, 2.5, 7.0, 0.0, -3.25, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let [g, b, m, _] = fresh(2);
        let v = Tensor::full(&[2], identity_running_var::<f64>(DEFAULT_EPS));
        let out = batchnorm_forward(&x, &g, &b, &m, &v, Mode::Eval, BnConfig::default()).unwrap();
        assert!(out.y.bitwise_eq(&x));
    }

    #[test]
    fn identity_running_var_is_exact() {
        assert_eq!(identity_running_var::<f32>(DEFAULT_EPS) + 1e-5f32, 1.0f32);
        assert_eq!(identity_running_var::<f64>(DEFAULT_EPS) + 1e-5f64, 1.0f64);
    }

    #[test]
    fn train_constant_input_is_zero() {
        let x = Tensor::<f64>::full(&[3, 1, 4], 2.5);
        let [g, b, m, v] = fresh(1);
        let out = batchnorm_forward(&x, &g, &b, &m, &v, Mode::Train, BnConfig::default()).unwrap();
        assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_two_values() {
        let x = Tensor::<f64>::from_f64(&[2, 1], &[-1.0, 1.0]).unwrap();
        let [g, b, m, v] = fresh(1);
        let out = batchnorm_forward(&x, &g, &b, &m, &v, Mode::Train, BnConfig::default()).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.y.data()[0] + expect).abs() < 1e-15);
        assert!((out.y.data()[1] - expect).abs() < 1e-15);
        assert!((expect - 0.999995).abs() < 1e-9);
        let (rm, rv) = out.running.unwrap();
        assert!((rm.data()[0] - 0.0).abs() < 1e-15);
        assert!((rv.data()[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 6.0]).unwrap();
        let [g, b, m, v] = fresh(1);
        let out = batchnorm_forward(&x, &g, &b, &m, &v, Mode::Train, BnConfig::default()).unwrap();
        let (rm, rv) = out.running.unwrap();
        assert!((rm.data()[0] - 0.1 * 3.0).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 + 0.1 * 3.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::<f64>::zeros(&[1, 1]);
        let [g, b, m, v] = fresh(1);
        let cfg = BnConfig { eps: 0.0, ..BnConfig::default() };
        assert!(batchnorm_forward(&x, &g, &b, &m, &v, Mode::Eval, cfg).is_err());
    }
}
