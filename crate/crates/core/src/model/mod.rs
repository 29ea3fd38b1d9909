//! Recurrent student classifier: parameters, forward/backward passes,
//! fine-tuning and the weight checkpoint format.

mod checkpoint;
mod gru;
mod params;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gru::{
    batch_loss, bptt_gradients, forward_batch, forward_sequence, gru_cell_forward, predict_batch,
    predict_with_confidence, ForwardPass, Prediction, SequenceOutput,
};
pub use params::{GruLayerParams, GruParameters, ModelConfig};
pub use train::{fine_tune, predict_examples, Example, TrainConfig, TrainReport, WindowSample};
