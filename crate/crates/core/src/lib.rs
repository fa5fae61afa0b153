pub mod corpus;
pub mod error;
pub mod evolve;
pub mod expr;
pub mod metrics;
pub mod proxy;
pub mod reject;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use evolve::{BranchSpec, Individual, Population};
pub use expr::{InputKind, Leaf, LossGraph, MultiBranchLoss, Node, Op};
pub use metrics::Metric;
pub use proxy::{ProxyTask, TaskKind};
pub use reject::{Fingerprint, FingerprintCache, RejectionContext};
pub use search::{run_ablation, run_search, SearchConfig, SearchRun, TaskConfig, Variant};
pub use tensor::{Shape, Tensor4};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
