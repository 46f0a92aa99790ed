//! Adapter-fusion semantic plausibility classification at desk scale.
//!
//! Pretrains bottleneck task adapters on physical-property and selectional
//! association data over a frozen toy transformer encoder, fuses them with
//! attention, and fine-tunes a plausibility head. Includes the corpus
//! statistics and dataset analytics the data pipeline needs.

pub mod adapters;
pub mod association;
pub mod backbone;
pub mod data;
pub mod snapshot;
pub mod tensor;
pub mod trainer;
