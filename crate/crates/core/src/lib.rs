//! Semantic-aware masked-autoencoder image transmission.
//!
//! The transmitter encodes an image into one feature per patch, weighs the
//! features by importance, keeps the important ones, and sends them as
//! power-normalized complex symbols together with a bitmap of what was
//! kept. The receiver fills the gaps with a learned mask token and decodes.
//! A classical block-DCT plus Hamming chain serves as a reference.

pub mod autograd;
pub mod aware;
pub mod baseline;
pub mod bitmap;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod framing;
pub mod nn;
pub mod params;
pub mod seed;
pub mod tasks;
pub mod tensor;

pub use aware::{entropy_weights, rate_match, select_threshold, select_topk, task_weights, CorpusStats, MaskPolicy, WeightModel, WeightVector};
pub use bitmap::MaskBitmap;
pub use channel::{transmit, ChannelConfig, ChannelKind, ChannelReport, TrainingChannel};
pub use codec::{features_to_symbols, patchify, symbols_to_features, unpatchify, CodecConfig, CodecModel, FeatureSequence, Image, PatchSequence, SymbolFrame};
pub use error::{Error, Result};
pub use seed::derive_seed;
pub use tasks::{LabeledImage, TaskModel};
