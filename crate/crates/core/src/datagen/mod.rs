//! Synthetic partial/complete pairs from procedural shapes and a virtual
//! depth camera, dataset directories, and ingestion of real depth frames.

pub mod dataset;
pub mod ingest;
pub mod pairs;
pub mod render;
pub mod shapes;

pub use dataset::{read_dataset, validate_dataset, write_dataset, Dataset, Split, ValidationReport};
pub use ingest::{ingest, IngestOutput, IngestSettings, ObjectModel};
pub use pairs::{
    derive_seed, make_pair, oracle_metrics, synthesize, PairMeta, PairSample, PoseTag, SynthSpec,
};
pub use render::{render_depth, render_partial, Camera, NoiseSpec, Rendering};
pub use shapes::{sample_surface, sample_surface_raw, ShapeFamily, ShapeGeometry, ShapeSpec};
