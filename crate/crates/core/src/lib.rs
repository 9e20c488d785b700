//! Sequence classifiers built on an LSTM whose input features and gates are
//! wrapped in variational information bottleneck masks, trained so that
//! uninformative units can be cut away.
//!
//! The crate covers the whole pipeline: tensors and seeded randomness,
//! the masked LSTM cell with hand-written backpropagation through time,
//! the classifier and its binary container, the training objective,
//! structural pruning, an Adam trainer, synthetic data and the `viblstm`
//! command-line tool.

pub mod cell;
pub mod cli;
pub mod data;
pub mod error;
pub mod network;
pub mod objective;
pub mod prune;
pub mod tensor;
pub mod train;
pub mod vib;

pub use error::{Error, Result};
pub use network::{compression_ratio, count_lstm, Dims, SequenceClassifier};
pub use prune::{apply_plan, make_plan, verify_equivalence, HiddenRule, PrunePlan};
pub use tensor::{SeededRng, Tensor};
pub use train::{evaluate, initialize_model, train, InitConfig, TrainConfig};
