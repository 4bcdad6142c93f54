//! Run configuration. Every field has a default; the resolved config is what gets
//! echoed to `config.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::TxnBlockCfg;
use crate::harness::OptimCfg;
use crate::kernels::BnConfig;
use crate::stnet::{BackboneSpec, HeadKind, StNetConfig, StageSpec, StemSpec};
use crate::synthdata::{MultimodalXorCfg, TemporalOrderCfg};
use crate::tensor::DType;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scalar type for training and evaluation (gradient checks always use f64).
    pub dtype: DType,
    pub backbone: BackboneSpec,
    /// Frames per segment (`N`).
    pub n_frames: usize,
    pub t_train: usize,
    pub t_eval: usize,
    /// Temporal Xception head of StNet.
    pub txn: TxnBlockCfg,
    pub residual_temporal_block: bool,
    pub temporal_order: TemporalOrderCfg,
    pub optim: OptimCfg,
    /// TXN encoder used by every iTXN branch and the single-modality models.
    pub fusion_txn: TxnBlockCfg,
    pub multimodal_xor: MultimodalXorCfg,
    pub fusion_optim: OptimCfg,
    /// Ensemble weights per single-modality model (modality order); equal when empty.
    pub ensemble_weights: Vec<f64>,
    pub eval_batch: usize,
    pub workers: usize,
}

/// Backbone small enough to train on one CPU core in minutes.
pub fn desk_backbone() -> BackboneSpec {
    BackboneSpec {
        stem: StemSpec {
            channels: 8,
            kernel: 3,
            stride: 2,
        },
        stages: [(8, 1), (16, 2), (32, 2), (32, 2)]
            .into_iter()
            .map(|(channels, stride)| StageSpec { blocks: 1, channels, stride })
            .collect(),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dtype: DType::F32,
            backbone: desk_backbone(),
            n_frames: 5,
            t_train: 7,
            t_eval: 25,
            txn: TxnBlockCfg::with_widths(&[32, 32]),
            residual_temporal_block: false,
            temporal_order: TemporalOrderCfg::default(),
            optim: OptimCfg {
                lr: 0.05,
                epochs: 12,
                batch_size: 16,
                milestones: vec![9],
                ..OptimCfg::default()
            },
            fusion_txn: TxnBlockCfg::with_widths(&[16, 16]),
            multimodal_xor: MultimodalXorCfg::default(),
            fusion_optim: OptimCfg {
                lr: 0.05,
                weight_decay: 0.05,
                epochs: 20,
                batch_size: 32,
                milestones: vec![14],
                ..OptimCfg::default()
            },
            ensemble_weights: vec![],
            eval_batch: 32,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.t_train == 0 || self.t_eval == 0 {
            return Err(Error::invalid("n_frames, t_train and t_eval must be positive"));
        }
        if self.eval_batch == 0 {
            return Err(Error::invalid("eval_batch must be positive"));
        }
        self.optim.validate()?;
        self.fusion_optim.validate()?;
        self.txn.validate()?;
        self.fusion_txn.validate()?;
        self.temporal_order.validate()?;
        self.multimodal_xor.validate()?;
        self.backbone.validate()
    }

    pub fn stnet(&self, num_classes: usize) -> StNetConfig {
        StNetConfig {
            backbone: self.backbone.clone(),
            n_frames: self.n_frames,
            num_classes,
            txn: self.txn.clone(),
            temporal_stages: vec![3, 4],
            residual_temporal_block: self.residual_temporal_block,
            head: HeadKind::Txn,
            bn: BnConfig::default(),
        }
    }
}
