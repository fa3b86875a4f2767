//! Frozen-feature evaluation and training diagnostics.

mod attribution;
mod collapse;
mod distance;
mod features;
mod probe;
mod theorem1;

pub use attribution::{attribution_map, gradient_attribution, level_gradient, to_gray, write_pgm, Attribution, LossSelection};
pub use collapse::{collapse_metric, top_embeddings, CollapseReport, MIN_COLLAPSE_SAMPLES};
pub use distance::{quantile, view_distance_stats, DistanceStats};
pub use features::{extract_all_features, extract_features, Features};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};
pub use theorem1::{theorem1_probe, Theorem1Report};
