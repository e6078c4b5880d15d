//! Context prototype-aware learning for weakly supervised segmentation.
//!
//! The crate turns classifier activation maps into prototype-aware maps
//! (PACAMs) by clustering a per-class support bank of instance prototypes,
//! scoring the resulting context prototypes against each instance, and
//! aggregating the selected neighbors into a cosine-similarity map.
//!
//! ```
//! use cpal_core::synth::{generate, DatasetSpec};
//! use cpal_core::pipeline::{Pipeline, RunConfig};
//!
//! let spec = DatasetSpec { images: 4, height: 12, width: 12, blob_min: 3, blob_max: 6, ..DatasetSpec::default() };
//! let data = generate(&spec).unwrap();
//! let out = Pipeline::new(&data, RunConfig::default()).unwrap().run().unwrap();
//! assert_eq!(out.last().pacams.len(), 4);
//! ```

pub mod ablation;
pub mod cam;
pub mod context;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kmeans;
pub mod npy;
pub mod pacam;
pub mod pipeline;
pub mod proto;
pub mod simplex;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{LabelVector, Tensor};
