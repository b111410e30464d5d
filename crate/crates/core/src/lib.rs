//! Global image descriptors from conv feature maps.
//!
//! A feature tensor is masked down to its informative locations, the retained
//! local descriptors are PCA-reduced and embedded (T-emb, VLAD or FV),
//! aggregated (sum/avg/max or democratic pooling), power- and
//! rotation-normalised, and optionally hashed to compact binary codes with
//! ITQ. The [`retrieval`] module scores the result with junk-aware mAP.

pub mod aggregation;
pub mod codebooks;
pub mod embedding;
pub mod error;
pub mod hashing;
pub mod linalg;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod postprocessing;
pub mod preprocessing;
pub mod retrieval;
pub mod store;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DescriptorSet, FeatureTensor, KeypointList};
