//! SGD with momentum, weight decay and step learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ExecOptions, ModelGraph};
use crate::harness::metrics::topk_hits;
use crate::harness::source::BatchSource;
use crate::kernels::Mode;
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimCfg {
    pub lr: f64,
    pub momentum: f64,
    /// Applied to `*.weight` parameters only.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub seed: u64,
}

impl Default for OptimCfg {
    fn default() -> Self {
        OptimCfg {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 16,
            milestones: vec![14],
            factor: 0.1,
            seed: 0,
        }
    }
}

impl OptimCfg {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("lr must be a finite value >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(self.factor > 0.0) {
            return Err(Error::invalid("weight_decay must be >= 0 and factor > 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    /// Training-batch top-1 accuracy.
    pub top1: f64,
    pub lr: f64,
}

pub struct TrainOutput<S> {
    pub params: ParamSet<S>,
    pub curve: Vec<CurvePoint>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("epoch,loss,top1\n");
    for p in curve {
        s.push_str(&format!("{},{:.6},{:.6}\n", p.epoch, p.loss, p.top1));
    }
    s
}

/// Trains `params` on `src`. Deterministic for a fixed `opt.seed`.
///
/// A non-finite loss aborts with [`Error::NonFinite`] naming the first layer whose
/// output was non-finite on the offending batch.
pub fn train<S: Scalar>(graph: &ModelGraph, mut params: ParamSet<S>, src: &dyn BatchSource<S>, opt: &OptimCfg) -> Result<TrainOutput<S>> {
    opt.validate()?;
    if src.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    graph.check_params(&params)?;
    let root = RngStream::new(opt.seed).named("train");
    let mut velocity: BTreeMap<String, Tensor<S>> = BTreeMap::new();
    let mut curve = Vec::with_capacity(opt.epochs);
    let mom = S::from_f64(opt.momentum);
    let wd = S::from_f64(opt.weight_decay);

    for epoch in 0..opt.epochs {
        let lr = S::from_f64(opt.lr_at(epoch));
        let mut order: Vec<usize> = (0..src.len()).collect();
        root.named("order").split(epoch as u64).rng().shuffle(&mut order);
        let sampling = root.named("sampling").split(epoch as u64);
        let (mut loss_sum, mut hits) = (0.0, 0usize);

        for batch in order.chunks(opt.batch_size) {
            let inputs = src.inputs(batch, Mode::Train, &sampling)?;
            let labels: Vec<usize> = batch.iter().map(|&i| src.label(i)).collect();
            let mut f = graph.forward(&params, &inputs, Mode::Train, ExecOptions { trainable: true, check_finite: false })?;
            let loss = f.tape.softmax_xent(f.logits, &labels)?;
            let lv = f.tape.value(loss).data()[0].to_f64();
            if !lv.is_finite() {
                let diag = graph.forward(&params, &inputs, Mode::Train, ExecOptions { trainable: false, check_finite: true });
                return Err(match diag {
                    Err(e @ Error::NonFinite { .. }) => e,
                    Err(e) => e,
                    Ok(_) => Error::NonFinite { layer: "loss".into() },
                });
            }
            loss_sum += lv * batch.len() as f64;
            hits += topk_hits(f.logits(), &labels, 1)?;

            let mut grads = f.tape.backward(loss)?;
            for (name, &var) in &f.params {
                let Some(g) = grads.take(var) else { continue };
                let w = params.get_mut(name)?;
                let decay = name.ends_with(".weight") && opt.weight_decay != 0.0;
                let v = velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(w.shape()));
                for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    let gi = if decay { gi + wd * *wi } else { gi };
                    *vi = mom * *vi + gi;
                    *wi -= lr * *vi;
                }
            }
            f.commit_running(&mut params)?;
        }
        curve.push(CurvePoint {
            epoch: epoch + 1,
            loss: loss_sum / src.len() as f64,
            top1: hits as f64 / src.len() as f64,
            lr: opt.lr_at(epoch),
        });
    }
    Ok(TrainOutput { params, curve })
}
