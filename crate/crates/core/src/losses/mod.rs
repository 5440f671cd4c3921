//! Training objectives: cosine distance, mined triplet loss and the
//! additive-angular-margin classifier with softmax cross-entropy.

pub mod arcface;
pub mod distance;
pub mod softmax;
pub mod triplet;

pub use arcface::{arcface_logits, ArcConfig, ArcFaceLayer, ArcStep};
pub use distance::{cosine_distance, cosine_distance_grad};
pub use softmax::{softmax, softmax_cross_entropy, softmax_cross_entropy_grad};
pub use triplet::{
    distance_matrix, mine_triplets, mine_with_margin, triplet_batch_loss, triplet_loss, MarginSchedule, MiningPolicy, Triplet, TripletConfig,
};
