//! Online continual test-time adaptation over embedding streams.
//!
//! A frozen SSL branch (identity adapter plus prototype classifier) and a
//! trainable target branch copied from it adapt batch by batch to a stream of
//! shifting domains. Predictions are always recorded before the update for
//! that batch.
//!
//! ```
//! use collab_tta::data::SyntheticSuiteConfig;
//! use collab_tta::engine::{Method, RunConfig};
//! use collab_tta::report::Experiment;
//!
//! let suite = SyntheticSuiteConfig {
//!     classes: 3,
//!     dim: 4,
//!     samples_per_domain: 60,
//!     n_domains: 2,
//!     batch_size: 16,
//!     ..Default::default()
//! };
//! let exp = Experiment::synthetic(&suite).unwrap();
//! let mut cfg = RunConfig::for_method(Method::Aws);
//! cfg.method.n = 3;
//! let report = exp.run(&cfg, 7, None).unwrap();
//! assert_eq!(report.per_domain_error.len(), 2);
//! ```

pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod math;
pub mod model;
pub mod report;

pub use error::{Error, Result};
