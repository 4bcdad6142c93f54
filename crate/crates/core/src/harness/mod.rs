//! Training, evaluation, ensembling and the ablation drivers.

pub mod ablation;
pub mod metrics;
pub mod source;
pub mod train;

pub use ablation::{run_ablation, AblationCfg, AblationReport, AblationRow, ABLATIONS};
pub use metrics::{ensemble_average, evaluate, predict, rank_classes, topk_accuracy, topk_hits, EvalReport};
pub use source::{BatchSource, ClipSource, SeqSource};
pub use train::{curve_csv, train, CurvePoint, OptimCfg, TrainOutput};
