//! Certified L2 robustness for 1-nearest-neighbor retrieval.
//!
//! A base embedding `h` with ‖h(x)‖ ≤ F is smoothed with Gaussian noise,
//! g(x) = E[h(x + z)], z ~ N(0, σ²I). The smoothed embedding is Lipschitz
//! with a calculable bound, so a query whose nearest-same-class /
//! nearest-other-class margin under `g` is positive keeps its Recall@1
//! score under every input perturbation inside a computable L2 ball. In
//! practice `g` is estimated by Monte-Carlo averaging; the margin is then
//! lowered by a matrix-Chernoff correction so the radius holds with
//! probability at least 1 − α.
//!
//! ```no_run
//! use nncert_core::prelude::*;
//!
//! # fn main() -> nncert_core::Result<()> {
//! let model = make_toy_mlp(7, 2, 2, 8, NormBound::unit())?;
//! let data = two_cluster_dataset(&model, 1, 10, 5, 3.0, 0.1)?;
//! let cfg = SmoothingConfig::new(0.25, 100_000, 0.01, 42)?;
//! let records = certify_dataset(&data.queries, &model, &data.gallery, &cfg)?;
//! for r in &records {
//!     println!("{} {:?}", r.id, r.radius());
//! }
//! # Ok(())
//! # }
//! ```

pub mod certify;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod format;
pub mod margin;
pub mod models;
pub mod normal;
pub mod oracle;
pub mod rng;
pub mod smoothing;
pub mod toy;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::certify::{
        certified_radius, certify_dataset, lipschitz_bound_loose, lipschitz_bound_tight,
        CertificationRecord, Outcome, Score,
    };
    pub use crate::embedding::{
        l2_distance, validate_norm, EmbeddingVector, InputVector, LabeledSample, NormBound,
    };
    pub use crate::eval::{recall_at_1_curve, rejected_ratio, GridSpec, RecallCurve};
    pub use crate::margin::{
        build_index, margin_lower_bound, minimum_margin, IndexEntry, MarginResult, ReferenceIndex,
    };
    pub use crate::models::{make_toy_mlp, BaseModel, EmbeddingModel};
    pub use crate::oracle::{exact_smooth_quadrature, exact_smooth_sign, ExactSmoothed};
    pub use crate::smoothing::{
        chernoff_epsilon, smooth_embed_mc, SmoothedEstimate, SmoothingConfig,
    };
    pub use crate::toy::{segment_queries, two_cluster_dataset};
}
