//! Entity disambiguation toolkit.
//!
//! Three families of linkers share one data model:
//!
//! * [`alias`]: count-ranked alias tables built from training mentions,
//! * [`similarity`]: normalized Indel fallback over the same tables,
//! * [`encoder`] + [`index`] + [`trainer`]: a bi-encoder trained with in-batch
//!   sampled softmax and hard negatives mined from a maximum-inner-product index.
//!
//! [`eval`] computes R@K for all of them and [`kb`] holds ingestion and coverage analyses.

pub mod alias;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod kb;
pub mod similarity;
pub mod tokenizer;
pub mod toyland;
pub mod trainer;

pub use error::{Error, Result};
pub use kb::{Entity, Mention, Qid};
