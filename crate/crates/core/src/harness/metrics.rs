//! Top-k metrics, evaluation and score averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ExecOptions, ModelGraph};
use crate::harness::source::BatchSource;
use crate::kernels::{softmax, softmax_xent, Mode};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::synthdata::parallel_map;
use crate::tensor::{Scalar, Tensor};

/// Classes of one score row ranked best first; ties go to the lower index.
pub fn rank_classes<S: Scalar>(row: &[S]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].to_f64().total_cmp(&row[a].to_f64()).then(a.cmp(&b)));
    idx
}

/// Number of rows of `scores` (`[B, K]`) whose label is among the `k` best classes.
pub fn topk_hits<S: Scalar>(scores: &Tensor<S>, labels: &[usize], k: usize) -> Result<usize> {
    if scores.rank() != 2 || scores.shape()[0] != labels.len() {
        return Err(Error::shape("top-k", format!("scores {:?} for {} labels", scores.shape(), labels.len())));
    }
    let classes = scores.shape()[1];
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("k={k} must be in 1..={classes}")));
    }
    let mut hits = 0;
    for (row, &y) in scores.data().chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        hits += usize::from(rank_classes(row)[..k].contains(&y));
    }
    Ok(hits)
}

pub fn topk_accuracy<S: Scalar>(scores: &Tensor<S>, labels: &[usize], k: usize) -> Result<f64> {
    Ok(topk_hits(scores, labels, k)? as f64 / labels.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    /// Top-`min(5, K)` accuracy.
    pub top5: f64,
    pub loss: f64,
    pub per_class: Vec<f64>,
    pub samples: usize,
}

impl EvalReport {
    pub fn from_scores<S: Scalar>(scores: &Tensor<S>, labels: &[usize]) -> Result<Self> {
        let k = scores.shape().get(1).copied().unwrap_or(0);
        let (loss, _) = softmax_xent(scores, labels)?;
        let ranks: Vec<usize> = scores.data().chunks(k).map(|r| rank_classes(r)[0]).collect();
        let per_class = (0..k)
            .map(|c| {
                let (n, hit) = labels
                    .iter()
                    .zip(&ranks)
                    .filter(|(&y, _)| y == c)
                    .fold((0usize, 0usize), |(n, h), (_, &p)| (n + 1, h + usize::from(p == c)));
                if n == 0 {
                    0.0
                } else {
                    hit as f64 / n as f64
                }
            })
            .collect();
        Ok(EvalReport {
            top1: topk_accuracy(scores, labels, 1)?,
            top5: topk_accuracy(scores, labels, k.min(5))?,
            loss: loss.to_f64(),
            per_class,
            samples: labels.len(),
        })
    }
}

/// Eval-mode scores `[B, K]` for every sample of `src`, computed in chunks of
/// `batch` on up to `workers` threads. Results do not depend on either.
pub fn predict<S: Scalar>(graph: &ModelGraph, params: &ParamSet<S>, src: &dyn BatchSource<S>, batch: usize, workers: usize) -> Result<Tensor<S>> {
    if src.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let idx: Vec<usize> = (0..src.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(batch.max(1)).collect();
    let rng = RngStream::new(0).named("eval");
    let parts = parallel_map(&chunks, workers, |_, c| -> Result<Tensor<S>> {
        let inputs = src.inputs(c, Mode::Eval, &rng)?;
        let f = graph.forward(params, &inputs, Mode::Eval, ExecOptions::default())?;
        Ok(f.logits().clone())
    });
    let k = src.num_classes();
    let mut data = Vec::with_capacity(src.len() * k);
    for p in parts {
        let p = p?;
        if p.shape()[1] != k {
            return Err(Error::shape("predict", format!("model emits {} classes, dataset has {k}", p.shape()[1])));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![src.len(), k], data)
}

pub fn evaluate<S: Scalar>(graph: &ModelGraph, params: &ParamSet<S>, src: &dyn BatchSource<S>, batch: usize, workers: usize) -> Result<EvalReport> {
    let scores = predict(graph, params, src, batch, workers)?;
    let labels: Vec<usize> = (0..src.len()).map(|i| src.label(i)).collect();
    EvalReport::from_scores(&scores, &labels)
}

/// Softmax of each score set, weighted mean, renormalized per row.
pub fn ensemble_average<S: Scalar>(score_sets: &[Tensor<S>], weights: &[f64]) -> Result<Tensor<S>> {
    let first = score_sets.first().ok_or_else(|| Error::invalid("ensemble needs at least one score set"))?;
    if score_sets.len() != weights.len() {
        return Err(Error::invalid(format!("{} score sets but {} weights", score_sets.len(), weights.len())));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::invalid("weights must be finite, >= 0 and not all 0"));
    }
    if first.rank() != 2 {
        return Err(Error::shape("ensemble_average", format!("expected [B, K], got {:?}", first.shape())));
    }
    for s in score_sets {
        if s.shape() != first.shape() {
            return Err(Error::shape("ensemble_average", format!("{:?} vs {:?}", s.shape(), first.shape())));
        }
    }
    let k = first.shape()[1];
    let mut acc = vec![0.0f64; first.len()];
    for (s, &w) in score_sets.iter().zip(weights) {
        for (a, p) in acc.iter_mut().zip(softmax(s)?.data()) {
            *a += w * p.to_f64();
        }
    }
    let mut out = Vec::with_capacity(acc.len());
    for row in acc.chunks(k) {
        let z: f64 = row.iter().sum();
        out.extend(row.iter().map(|&v| S::from_f64(v / z)));
    }
    Tensor::new(first.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let s = Tensor::<f64>::new(vec![1, 3], vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(topk_hits(&s, &[1], 1).unwrap(), 1);
        assert_eq!(topk_accuracy(&s, &[0], 3).unwrap(), 1.0);
        let tie = Tensor::<f64>::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(topk_hits(&tie, &[1], 1).unwrap(), 0);
        assert_eq!(topk_hits(&tie, &[0], 1).unwrap(), 1);
        assert!(topk_hits(&s, &[0], 4).is_err());
    }

    #[test]
    fn ensemble_identities() {
        let a = Tensor::<f64>::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
        let sm = softmax(&a).unwrap();
        let one = ensemble_average(std::slice::from_ref(&a), &[1.0]).unwrap();
        assert!(one.max_abs_diff(&sm) <= 1e-15);
        let two = ensemble_average(&[a.clone(), a.clone()], &[0.3, 2.0]).unwrap();
        assert!(two.max_abs_diff(&one) <= 1e-15);
        assert!(ensemble_average(std::slice::from_ref(&a), &[0.0]).is_err());
        let b = Tensor::<f64>::zeros(&[3, 3]);
        assert!(ensemble_average(&[a, b], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn report_bounds() {
        let s = Tensor::<f64>::new(vec![3, 2], vec![0.0, 1.0, 1.0, 0.0, 0.3, 0.2]).unwrap();
        let r = EvalReport::from_scores(&s, &[1, 1, 0]).unwrap();
        assert!((r.top1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.top5, 1.0);
        assert_eq!(r.per_class, vec![1.0, 0.5]);
    }
}
