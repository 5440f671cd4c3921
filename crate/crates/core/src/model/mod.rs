//! The embedding network: 3D inception backbone plus a normalizing head.

pub mod backbone;
pub mod config;
pub mod embedding;
pub mod head;
pub mod layers;
pub mod params;

pub use backbone::{Backbone, BackboneOutput, Tape};
pub use config::{
    count_params, shape_plan, BackboneConfig, BlockSpec, ConvSpec, InceptionSpec, Op, Padding, PoolSpec,
    ShapePlan, DECLARED_BLOCK_SHAPES,
};
pub use embedding::EmbeddingVector;
pub use head::{Head, HeadConfig};
pub use params::{Grads, Param, ParamSet};
