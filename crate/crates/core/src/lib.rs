//! Weighted data summaries (coresets) selected by bilevel optimization.
//!
//! A coreset is a weight vector over a dataset with few nonzero entries such
//! that a model trained on the weighted points does well on the full data.
//! Selection is driven by implicit gradients of the outer loss with respect
//! to the weights.

pub mod baselines;
pub mod compsense;
pub mod data;
pub mod expdesign;
pub mod error;
pub mod experiment;
pub mod hypergrad;
pub mod linalg;
pub mod models;
pub mod objective;
pub mod proxy;
pub mod select;
pub mod streaming;

pub use data::{Labels, StreamBatch, WeightedDataset};
pub use error::{Error, Result};
pub use hypergrad::{HypergradConfig, Solver};
pub use models::{Family, InnerBudget, InnerProblem, ModelSpec, OuterObjective};
pub use objective::{BilevelObjective, WeightObjective};
pub use select::{CoresetState, SelectionConfig, Variant};
