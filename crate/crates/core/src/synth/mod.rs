//! Synthetic appendage-like shapes, procedural wall shear stress, and
//! persisted datasets.

mod dataset;
mod shape;
mod wss;

pub use dataset::{
    build_dataset, kfold, sample_seeds, train_test_split, Checksums, Dataset, DatasetSpec, Formats,
    LoadedSample, Manifest, SampleEntry, Split, DATASET_SCHEMA,
};
pub use shape::{
    generate_mesh, icosphere, lobe_displacement, pocket_depth, Lobe, Range, ShapeDistribution, ShapeParams,
    MAX_LOBES, MAX_RESAMPLES,
};
pub use wss::{generate_sample, generate_wss, SynthSample, WssModel, MIN_TIMES};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("shape parameters violate the injectivity bound: {0}")]
    SelfIntersection(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no valid parameter draw after {0} attempts")]
    Exhausted(usize),
    #[error("generated mesh failed validation: {0}")]
    Mesh(#[from] crate::mesh::MeshError),
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<SynthError>,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("wss: {0}")]
    Hemo(#[from] crate::hemo::HemoError),
    #[error("manifest: {0}")]
    Manifest(String),
}
