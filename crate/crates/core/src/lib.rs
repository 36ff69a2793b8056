//! Tiny deep ensembles: networks whose ensemble members share every weight
//! and bias and differ only in their normalization parameters.
//!
//! The crate covers the numeric substrate ([`tensor`], [`layers`]), the
//! ensemble model and its two inference routes ([`ensemble`]), training
//! ([`training`]), uncertainty metrics ([`uncertainty`]), an analytic cost
//! census ([`cost`]), a compute-in-memory inference simulator ([`cim`]),
//! dataset handling ([`data`]) and serialization ([`checkpoint`]).

pub mod checkpoint;
pub mod cim;
pub mod cost;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod layers;
pub mod tensor;
pub mod training;
pub mod uncertainty;

pub use cost::{CostCensus, LayerSpec, Method};
pub use data::Dataset;
pub use ensemble::{Mode, ModelSpec, Prediction, Task, TinyDeModel};
pub use error::{Error, Result};
pub use layers::{NormKind, Phase};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainLog};
pub use uncertainty::UncertaintyReport;
