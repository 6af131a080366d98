//! Curation engine for textual GUI world-knowledge corpora.
//!
//! Three stages communicate through files: `synthesis` turns raw GUI
//! trajectories into textual samples with an expert model, `density`,
//! `lexicon` and `retention` score and thin them, and `serializer` packs the
//! survivors into a plain-text training stream. `pipeline` drives the
//! stages from a single config.

pub mod config;
pub mod density;
pub mod lexicon;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod retention;
pub mod serializer;
pub mod synthesis;
