//! Configurable, deterministic cohort pipeline for MIMIC-IV-shaped EHR tables.

pub mod cleaning;
pub mod cohort;
pub mod config;
pub mod evaluation;
pub mod features;
pub mod grouping;
pub mod ingest;
pub mod modeling;
pub mod pipeline;
pub mod reference;
pub mod store;
pub mod summary;
pub mod synth;
pub mod time;
pub mod timeseries;
