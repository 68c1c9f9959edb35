//! Desk-scale simulation: synthetic two-domain data, pretraining, federated
//! adaptation, evaluation and persistence.

mod checkpoint;
mod checks;
mod config;
mod data;
mod eval;
mod experiment;
mod records;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint,
    Checkpoint, ServerSnapshot,
};
pub use checks::{
    fd_lattice_grad, gradcheck_model_config, lattice_gradcheck, model_gradcheck, oracle_check,
    random_lattice, random_path, relative_error, GradReport, OracleReport, FD_STEP,
};
pub use config::{parse_band, ExperimentConfig};
pub use data::{
    gen_dataset, make_domains, DataConfig, Domain, DomainConfig, DomainStream, Utterance,
};
pub use eval::{evaluate, levenshtein, token_error_rate, Evaluation};
pub use experiment::{metrics_csv, Adaptation, Experiment, MetricsRow, Pretrained, CSV_HEADER};
pub use records::{format_record, load_dataset, parse_record, save_dataset};
