//! Direct-loop reference implementations used as oracles by the integration tests.
#![allow(dead_code)]

pub mod cases;

use stnet::rng::StreamRng;
use stnet::Tensor;

/// Calls `f` with every multi-index of `dims` in row-major order.
pub fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.contains(&0) {
        return;
    }
    let mut idx = vec![0; dims.len()];
    loop {
        f(&idx);
        let mut d = dims.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn offset(shape: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

pub fn randn(shape: &[usize], rng: &mut StreamRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// `max |a - b| / max |b|` (0 when both are zero).
pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub struct ConvGeom {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

fn conv_out_dims(x: &[usize], w: &[usize], g: &ConvGeom) -> Vec<usize> {
    (0..x.len() - 2)
        .map(|d| (x[d + 2] + 2 * g.padding[d] - w[d + 2]) / g.stride[d] + 1)
        .collect()
}

/// Input position read by output position `o` and kernel tap `k`, if inside the input.
fn tap(o: &[usize], k: &[usize], x_sp: &[usize], g: &ConvGeom) -> Option<Vec<usize>> {
    let mut pos = Vec::with_capacity(o.len());
    for d in 0..o.len() {
        let p = (o[d] * g.stride[d] + k[d]) as isize - g.padding[d] as isize;
        if p < 0 || p >= x_sp[d] as isize {
            return None;
        }
        pos.push(p as usize);
    }
    Some(pos)
}

/// Grouped N-d cross-correlation with zero padding.
pub fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: &ConvGeom) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
    let (cin_g, cout_g) = (cin / g.groups, cout / g.groups);
    let out_sp = conv_out_dims(xs, ws, g);
    let mut out_shape = vec![batch, cout];
    out_shape.extend(&out_sp);
    let mut y = vec![0.0; out_shape.iter().product()];
    for bi in 0..batch {
        for co in 0..cout {
            let grp = co / cout_g;
            for_each_index(&out_sp, |o| {
                let mut acc = b.map_or(0.0, |b| b.data()[co]);
                for ci in 0..cin_g {
                    for_each_index(&ws[2..], |k| {
                        if let Some(p) = tap(o, k, &xs[2..], g) {
                            let mut xi = vec![bi, grp * cin_g + ci];
                            xi.extend(&p);
                            let mut wi = vec![co, ci];
                            wi.extend(k);
                            acc += x.data()[offset(xs, &xi)] * w.data()[offset(ws, &wi)];
                        }
                    });
                }
                let mut yi = vec![bi, co];
                yi.extend(o);
                y[offset(&out_shape, &yi)] = acc;
            });
        }
    }
    Tensor::new(out_shape, y).unwrap()
}

/// Gradients of `sum(dy * conv(x, w, b))` with respect to x, w and b.
pub fn conv_grads(x: &Tensor<f64>, w: &Tensor<f64>, dy: &Tensor<f64>, g: &ConvGeom) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let (xs, ws, ys) = (x.shape(), w.shape(), dy.shape());
    let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
    let (cin_g, cout_g) = (cin / g.groups, cout / g.groups);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for bi in 0..batch {
        for co in 0..cout {
            let grp = co / cout_g;
            for_each_index(&ys[2..], |o| {
                let mut yi = vec![bi, co];
                yi.extend(o);
                let gy = dy.data()[offset(ys, &yi)];
                db[co] += gy;
                for ci in 0..cin_g {
                    for_each_index(&ws[2..], |k| {
                        if let Some(p) = tap(o, k, &xs[2..], g) {
                            let mut xi = vec![bi, grp * cin_g + ci];
                            xi.extend(&p);
                            let mut wi = vec![co, ci];
                            wi.extend(k);
                            let (xo, wo) = (offset(xs, &xi), offset(ws, &wi));
                            dx[xo] += gy * w.data()[wo];
                            dw[wo] += gy * x.data()[xo];
                        }
                    });
                }
            });
        }
    }
    (
        Tensor::new(xs.to_vec(), dx).unwrap(),
        Tensor::new(ws.to_vec(), dw).unwrap(),
        Tensor::new(vec![cout], db).unwrap(),
    )
}

/// Max (`is_max`) or average pooling without padding over the trailing `window.len()` axes.
pub fn pool(x: &Tensor<f64>, window: &[usize], stride: &[usize], is_max: bool) -> Tensor<f64> {
    let xs = x.shape();
    let lead = xs.len() - window.len();
    let out_sp: Vec<usize> = (0..window.len()).map(|d| (xs[lead + d] - window[d]) / stride[d] + 1).collect();
    let mut out_shape = xs[..lead].to_vec();
    out_shape.extend(&out_sp);
    let mut y = Vec::new();
    for_each_index(&out_shape, |oi| {
        let (l, o) = oi.split_at(lead);
        let mut best = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for_each_index(window, |k| {
            let mut xi = l.to_vec();
            xi.extend((0..k.len()).map(|d| o[d] * stride[d] + k[d]));
            let v = x.data()[offset(xs, &xi)];
            best = best.max(v);
            sum += v;
        });
        y.push(if is_max { best } else { sum / window.iter().product::<usize>() as f64 });
    });
    Tensor::new(out_shape, y).unwrap()
}

/// Gradient of `sum(dy * pool(x))`; max routes to the first maximal element.
pub fn pool_grad(x: &Tensor<f64>, window: &[usize], stride: &[usize], is_max: bool, dy: &Tensor<f64>) -> Tensor<f64> {
    let xs = x.shape();
    let lead = xs.len() - window.len();
    let mut dx = vec![0.0; x.len()];
    let vol = window.iter().product::<usize>() as f64;
    for_each_index(dy.shape(), |oi| {
        let (l, o) = oi.split_at(lead);
        let gy = dy.data()[offset(dy.shape(), oi)];
        let mut best: Option<(f64, usize)> = None;
        for_each_index(window, |k| {
            let mut xi = l.to_vec();
            xi.extend((0..k.len()).map(|d| o[d] * stride[d] + k[d]));
            let at = offset(xs, &xi);
            if is_max {
                if best.is_none_or(|(v, _)| x.data()[at] > v) {
                    best = Some((x.data()[at], at));
                }
            } else {
                dx[at] += gy / vol;
            }
        });
        if let Some((_, at)) = best {
            dx[at] += gy;
        }
    });
    Tensor::new(xs.to_vec(), dx).unwrap()
}

/// Mean (`is_max == false`) or max over all trailing axes: `[B, C, *S] -> [B, C]`.
pub fn global_pool(x: &Tensor<f64>, is_max: bool) -> Tensor<f64> {
    let xs = x.shape();
    let inner: usize = xs[2..].iter().product();
    let y = x
        .data()
        .chunks(inner)
        .map(|c| {
            if is_max {
                c.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            } else {
                c.iter().sum::<f64>() / inner as f64
            }
        })
        .collect();
    Tensor::new(xs[..2].to_vec(), y).unwrap()
}

pub struct BnRef {
    pub y: Tensor<f64>,
    pub run_mean: Vec<f64>,
    pub run_var: Vec<f64>,
}

/// Batch normalization over every axis but 1. Train mode uses the biased batch
/// variance and updates running stats as `m * run + (1 - m) * batch`.
pub fn batchnorm(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], run_mean: &[f64], run_var: &[f64], train: bool, eps: f64, momentum: f64) -> BnRef {
    let xs = x.shape();
    let c = xs[1];
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut count = vec![0usize; c];
    for_each_index(xs, |i| {
        mean[i[1]] += x.data()[offset(xs, i)];
        count[i[1]] += 1;
    });
    for ch in 0..c {
        mean[ch] /= count[ch] as f64;
    }
    for_each_index(xs, |i| {
        let d = x.data()[offset(xs, i)] - mean[i[1]];
        var[i[1]] += d * d;
    });
    for ch in 0..c {
        var[ch] /= count[ch] as f64;
    }
    let (m, v) = if train { (mean.clone(), var.clone()) } else { (run_mean.to_vec(), run_var.to_vec()) };
    let mut y = vec![0.0; x.len()];
    for_each_index(xs, |i| {
        let o = offset(xs, i);
        let ch = i[1];
        y[o] = gamma[ch] * (x.data()[o] - m[ch]) / (v[ch] + eps).sqrt() + beta[ch];
    });
    let (rm, rv) = if train {
        (
            (0..c).map(|ch| momentum * run_mean[ch] + (1.0 - momentum) * mean[ch]).collect(),
            (0..c).map(|ch| momentum * run_var[ch] + (1.0 - momentum) * var[ch]).collect(),
        )
    } else {
        (run_mean.to_vec(), run_var.to_vec())
    };
    BnRef {
        y: Tensor::new(xs.to_vec(), y).unwrap(),
        run_mean: rm,
        run_var: rv,
    }
}

/// Train-mode batch-norm gradients from the textbook closed form.
pub fn batchnorm_train_grads(x: &Tensor<f64>, gamma: &[f64], dy: &Tensor<f64>, eps: f64) -> (Tensor<f64>, Vec<f64>, Vec<f64>) {
    let xs = x.shape();
    let c = xs[1];
    let mut sums = vec![(0.0, 0.0, 0usize); c];
    for_each_index(xs, |i| {
        let s = &mut sums[i[1]];
        s.0 += x.data()[offset(xs, i)];
        s.2 += 1;
    });
    let mean: Vec<f64> = sums.iter().map(|s| s.0 / s.2 as f64).collect();
    for_each_index(xs, |i| {
        let d = x.data()[offset(xs, i)] - mean[i[1]];
        sums[i[1]].1 += d * d;
    });
    let n: Vec<f64> = sums.iter().map(|s| s.2 as f64).collect();
    let inv: Vec<f64> = (0..c).map(|ch| 1.0 / (sums[ch].1 / n[ch] + eps).sqrt()).collect();
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for_each_index(xs, |i| {
        let o = offset(xs, i);
        let ch = i[1];
        let xhat = (x.data()[o] - mean[ch]) * inv[ch];
        dbeta[ch] += dy.data()[o];
        dgamma[ch] += dy.data()[o] * xhat;
    });
    let mut dx = vec![0.0; x.len()];
    for_each_index(xs, |i| {
        let o = offset(xs, i);
        let ch = i[1];
        let xhat = (x.data()[o] - mean[ch]) * inv[ch];
        dx[o] = gamma[ch] * inv[ch] / n[ch] * (n[ch] * dy.data()[o] - dbeta[ch] - xhat * dgamma[ch]);
    });
    (Tensor::new(xs.to_vec(), dx).unwrap(), dgamma, dbeta)
}

/// `x @ w + b` for `x: [B, D]`, `w: [D, O]`.
pub fn linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (bn, d) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[1];
    let mut y = vec![0.0; bn * o];
    for i in 0..bn {
        for j in 0..o {
            let mut acc = b.data()[j];
            for k in 0..d {
                acc += x.data()[i * d + k] * w.data()[k * o + j];
            }
            y[i * o + j] = acc;
        }
    }
    Tensor::new(vec![bn, o], y).unwrap()
}
