//! Grid detector: model, decoding, loss, training and persistence.

pub mod checkpoint;
pub mod grid;
pub mod labels;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use grid::{decode, encode, nms, GridPrediction, DEFAULT_NMS_IOU};
pub use labels::{format_labels, parse_labels, read_labels, write_labels};
pub use loss::{loss_and_grad, loss_backward, total_loss, LossBreakdown, LossWeights};
pub use model::{
    backbone_backward, backbone_forward, backward, forward, head_backward, head_forward, predict, DetectorParams,
    ModelConfig, ModelInput, Modality,
};
pub use train::{cosine_lr, sgd_step, train, EpochLog, TrainConfig, TrainOutcome, TrainSample};

use crate::boxes::Detection;
use crate::error::Result;

/// Forward pass, decoding and per-class NMS.
pub fn detect(
    params: &DetectorParams,
    input: ModelInput<'_>,
    conf_thresh: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let pred = predict(params, input)?;
    nms(&decode(&pred, conf_thresh)?, nms_iou)
}
