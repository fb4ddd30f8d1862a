//! On-disk formats and resampling of features and labels.

pub mod manifest;
pub mod raster;
pub mod resize;
pub mod volume;

pub use manifest::{load_manifest, read_object_labels, record_labels, write_object_labels, DatasetManifest, Record, Split};
pub use raster::{read_image, read_instances, read_labels, write_image_png, write_instances, write_labels, GrayImage, InstanceMask, LabelImage};
pub use resize::{nearest_indices, project_instances, project_labels, resize_features, ResizeMode};
pub use volume::{read_feature_volume, write_feature_volume, FeatureVolume};
