//! Gallery/probe verification protocol and error-rate metrics.

pub mod metrics;
pub mod protocol;
pub mod split;

pub use metrics::{det_curve, eer, tmr_at_fmr, write_det_csv, DetCurve, DetPoint, MetricsReport};
pub use protocol::{
    cosine_similarity, count_protocol, read_score_csv, score_protocol, PairType, ProtocolCounts, ProtocolScores,
    ScoreSet, ScoredPair,
};
pub use split::{make_split, SplitAdjustment, SplitConfig, SplitMode, SplitPlan, SubjectSplit};
