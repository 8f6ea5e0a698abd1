//! Temporal importance reports and Shapley attributions over the global features.

pub mod beeswarm;
pub mod shap;
pub mod temporal;

pub use beeswarm::{beeswarm_rows, feature_ranking, render_beeswarm_svg, write_beeswarm_csv, BeeswarmRow};
pub use shap::{
    exact_shapley, explain_global, shap_sampling, CoalitionValue, ShapAttribution, ShapConfig,
    ShapEstimate,
};
pub use temporal::{segments_from_importance, temporal_report, Segment, TemporalConfig, TemporalReport};
