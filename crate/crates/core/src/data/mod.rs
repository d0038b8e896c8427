//! Target streams: synthetic generation, file ingestion and batching.

mod io;
mod stream;
mod synthetic;

pub use io::{
    format_embedding_dataset, load_embedding_dataset, parse_embedding_dataset, write_embedding_dataset,
    LoadedSuite, ManifestEntry, SuiteManifest,
};
pub use stream::{assemble_stream, Domain, DomainStream, HiddenLabels};
pub use synthetic::{
    generate_suite_datasets, generate_synthetic_suite, SyntheticDomain, SyntheticSuite, SyntheticSuiteConfig,
    Transform, TransformKind, MAX_MEAN_SHIFT, MAX_NOISE_STD, MAX_ROTATION_DEGREES, MAX_SCALE_FACTOR, MAX_SEVERITY,
};
