//! End-to-end workflow: synthetic data, the two-phase trainer, held-out
//! evaluation, embedding export, and paired ablation suites.

pub mod ablation;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod sgd;
pub mod train;

pub use ablation::{default_suite, run_ablation, AblationConfig, AblationRow, AblationTable};
pub use config::KeyValues;
pub use data::{
    generate_synthetic_dataset, load_dataset_dir, save_dataset_dir, Dataset, GeneratedData,
    SyntheticDataConfig,
};
pub use evaluate::{
    embed_dataset, evaluate, export_embeddings, write_report, Embeddings, EmbeddingSource,
    EvalOptions,
};
pub use sgd::{Schedule, Sgd};
pub use train::{
    assign_dataset_labels, train, Labeling, LossRow, RunArtifacts, TraceRow, TrainConfig,
};
