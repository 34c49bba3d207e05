//! Group-based evaluation: retrieval (mAP, top-1), K-means clustering scored by
//! adjusted Rand index, and the four-way oddity task.

mod cluster;
mod groups;
mod oddity;
mod retrieval;

pub use cluster::{adjusted_rand_index, cluster_eval, kmeans, ClusterReport, GroupCluster, KMeansConfig, KMeansResult};
pub use groups::{build_groups, EvalGroup, GroupSet, Member, Protocol};
pub use oddity::{oddity, oddity_from_similarity};
pub use retrieval::{
    average_precision, evaluate_group, random_top1_baseline, retrieval_eval, GroupRetrieval, GroupScore, QueryOutcome,
    RetrievalPartial, RetrievalReport, Score, Scorer, Symmetric,
};

/// Derives an independent stream seed for item `index` from a run seed
/// (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
