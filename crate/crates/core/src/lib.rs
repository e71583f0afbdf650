//! Delta-parameter pruning and partition amplification for merging
//! fine-tuned checkpoints that share a base model.
//!
//! Pipeline: [`delta::compute_delta`] extracts `finetuned - base`;
//! [`significance`] turns outlier mass into per-linear-unit pruning rates;
//! [`pruners`] sparsifies; [`amplify`] searches per-partition scale factors
//! against an [`oracle::Oracle`]; [`delta::merge`] adds the results back onto
//! the base.

pub mod amplify;
pub mod archive;
pub mod cli;
pub mod delta;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod oracle;
pub mod pruners;
pub mod significance;
pub mod synthetic;
pub mod topology;

pub use archive::{load_archive, save_archive, Tensor, TensorArchive};
pub use delta::{compute_delta, merge, offset_quantiles, DeltaModel, DeltaTensor};
pub use error::{Error, Result};
pub use topology::{parse_topology, LinearKey, ModelTopology, NamingRule, UnitKind};
