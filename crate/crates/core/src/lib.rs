//! Meta-embedding construction from multiple pre-trained word-embedding
//! sets ("facets").
//!
//! Every variant here is one parameterization of the same combination rule:
//! each facet vector is linearly transformed (`P_f w_f + b_f`) and the
//! transformed vectors are mixed by scalar weights `alpha_f`. Averaging
//! fixes `alpha_f = 1/F` with identity projections; concatenation uses fixed
//! selector matrices with unit weights; attention-weighted combination (DME)
//! learns free projections and derives per-word weights from a softmax; the
//! word prism learns square projections held near the orthogonal manifold by
//! a cubic retraction after every optimizer step, together with directly
//! learned facet weights.
//!
//! Because prism weights are word-independent scalars, the final
//! meta-embedding for every vocabulary word can be exported once and served
//! without keeping any source facet in memory.
//!
//! Module map:
//! * [`facet`] — loading, validation, vocabulary union, OOV centroids, and
//!   dimension equalization (zero-padding / PCA compression);
//! * [`meta`] — the combination rule, retraction, baseline initializers, and
//!   table export;
//! * [`train`] — joint training with analytic gradients, Adam, and the
//!   reduce-on-plateau schedule;
//! * [`tasks`] — dataset readers and metrics (accuracy, micro F1 without O);
//! * [`synth`] — seeded synthetic facet/dataset generators;
//! * [`analysis`] — k-means + adjusted mutual information separability
//!   reports, geometry diagnostics, nearest neighbors;
//! * [`config`] / [`pipeline`] — JSON run configs and the train / export /
//!   eval / analyze / inspect entry points.

pub mod analysis;
pub mod config;
pub mod error;
pub mod facet;
pub mod meta;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tasks;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use facet::{Facet, FacetFormat, VocabUnion};
pub use meta::{
    dme_weights, export_table, make_baseline, meta_embed, orthogonal_retraction,
    orthogonality_error, BaselineKind, CombinerKind, MetaConfig, MetaParams, MetaTable,
    ProjectionKind, ProjectionOverride,
};
pub use train::{train, HeadKind, HeadParams, TrainConfig, TrainRun};
