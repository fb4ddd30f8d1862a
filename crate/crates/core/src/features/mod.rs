//! Hand-crafted pixel and object features.

pub mod filters;
pub mod regionprops;

pub use filters::{pixel_filter_bank, Filter, FilterBankConfig};
pub use regionprops::{region_props, RegionFeatures, REGION_FEATURE_NAMES};
