//! File formats: run configs, checkpoints and raw embedding matrices.

mod atomic;
mod checkpoint;
mod embedding_file;
mod run_config;

pub use atomic::write_atomic;
pub use checkpoint::{config_digest, Checkpoint, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, Z_REPAIR_LIMIT};
pub use embedding_file::{decode_matrix, encode_matrix, read_embedding, write_embedding, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use run_config::{RunConfig, KEYS};
