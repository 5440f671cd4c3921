//! Forehead-crease verification toolkit.
//!
//! ROI images become overlapping-patch cubes ([`montage`]), a 3D inception
//! backbone and a normalizing head embed them ([`model`]), metric objectives
//! train the two stages ([`losses`], [`training`]), and a gallery/probe
//! protocol scores the embeddings ([`evaluation`]). [`datakit`] ingests
//! image trees and renders synthetic identities for desk-scale runs.

pub mod datakit;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod montage;
pub mod optim;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
