//! Multi-graph temporal knowledge graph extrapolation.
//!
//! Facts are `(subject, relation, object, timestamp)` quadruples grouped
//! into per-timestamp snapshots. Future links are predicted by combining
//! three graph views of the history:
//!
//! * an evolutional view — per-snapshot relational aggregation with
//!   recurrent carry-over of entity and relation embeddings ([`egl`]),
//! * a query-specific union view — facts from the recent window that touch
//!   query subjects, aggregated with time-conditioned attention and fused
//!   through a per-entity adaptive gate ([`ugl`]),
//! * a temporal view — timestamp nodes connected by periodic relations,
//!   embedded with a sine feature map and one relational convolution
//!   ([`tgl`]).
//!
//! Scoring runs two convolutional decoders ([`decoder`]): one masked by a
//! cumulative `(subject, relation) -> objects` memory ([`history`]), one
//! unmasked, blended by a fixed rate. [`training`] holds the chronological
//! optimization loop and the raw / time-filtered ranking evaluation;
//! [`gradcheck`] provides the finite-difference harness used throughout
//! the test suite.

pub mod act;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod egl;
pub mod error;
pub mod gradcheck;
pub mod history;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod tgl;
pub mod training;
pub mod ugl;

pub use config::{Config, Variant};
pub use dataset::{DatasetSplits, Quadruple, SnapshotSequence};
pub use error::{LmsError, Result};
