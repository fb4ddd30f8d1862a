//! Attentive probes trained on frozen feature volumes.

pub mod deap;
pub mod encoding;
pub mod io;
mod layers;
pub mod mask;
pub mod obap;
pub mod train;

pub use deap::{train_deap, DeapConfig, DeapInput, DeapProbe, DenseExample};
pub use encoding::sinusoidal_encoding;
pub use io::{load_probe, save_probe, Probe};
pub use mask::{gaussian_attention_mask, grid_centers, pixel_to_grid, squared_distances, Position};
pub use obap::{object_centroids, train_obap, Centroid, ObapConfig, ObapInput, ObapOutput, ObapProbe, ObjectExample};
pub use train::{TrainConfig, TrainReport};
