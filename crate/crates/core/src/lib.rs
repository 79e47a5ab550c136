//! Cross-domain aspect transfer network (CATN) for cold-start rating
//! prediction, with the small reverse-mode autodiff engine it runs on.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod scenario;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::{ParamId, ParamStore};
pub use corpus::{Document, DocumentIndex, Domain, Interaction, Vocabulary};
pub use error::{CatnError, Result};
pub use graph::{Graph, OpKind, Var};
pub use model::{CatnModel, HyperParams, Variant};
pub use parallel::Execution;
pub use scenario::{Flow, Pair, Scenario, Split};
pub use tensor::Tensor;
