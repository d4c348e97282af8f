//! On-disk formats: tensor archives, checkpoints, reports, metrics, corpora.

pub mod archive;
pub mod checkpoint;
pub mod corpus;
pub mod metrics;
pub mod report;

pub use archive::{ArchiveError, DType, Tensor, TensorArchive};
pub use checkpoint::{load_model, save_model};
pub use corpus::{synthetic_text, Corpus};
pub use report::CompressionReportFile;
