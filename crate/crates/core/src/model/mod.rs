//! Small BERT-style encoder with an MLM head, trained with AdamW.

mod checkpoint;
mod config;
mod optim;
mod params;
mod pretrain;
mod transformer;

pub use checkpoint::{
    load_checkpoint, load_model, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub(crate) use checkpoint::{map_eof, read_string, read_u32, read_u64, write_string};
pub use config::ModelConfig;
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{parameter_layout, restore, snapshot, LayerSelection, ParameterStore};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use transformer::{
    backward, batch_loss, batch_loss_and_gradients, forward_mlm, mlm_loss, Gradients,
};
