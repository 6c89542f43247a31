//! Configuration, persistence, the coefficient grid search and the
//! experiment protocols driven by the command-line tool.

pub mod config;
pub mod grid;
pub mod jobs;
pub mod lab;
pub mod persist;
pub mod protocol;

pub use config::{ExperimentConfig, MergeProtocol, ProxyMode};
pub use grid::{grid_search_coefficient, GridResult, GridSearchSpec};
pub use jobs::{execute, rerun, Job, Manifest, RerunReport};
pub use lab::{Lab, LambdaChoice};
pub use persist::{fingerprint, load_adapter, load_weights, save_adapter, save_weights};
pub use protocol::{pairwise_matrix, table1, verify_theorems, PairwiseReport, Table1, TheoremReport};
