//! Cattle-behavior digital twin pipeline.
//!
//! The crate is organized as a chain of stages, each usable on its own:
//!
//! - [`model`]: shared domain vocabulary (states, breeds, treatments, series)
//! - [`ingest`]: CSV parsing, validation, quarantine, cohort segmentation
//! - [`aggregate`]: minute records -> hourly state budgets -> cohort means
//! - [`filter`]: windowed-sinc FIR low-pass denoising of hourly series
//! - [`fit`]: four-family curve fitting of 24-hour profiles
//! - [`lstm`]: from-scratch stacked LSTM with Adam, BPTT, and a sweep harness
//! - [`synth`]: ground-truth-known synthetic herd generator
//! - [`twin`]: predict/compare/update loop and pain-treatment ranking

pub mod aggregate;
pub mod filter;
pub mod fit;
pub mod ingest;
pub mod lstm;
pub mod model;
pub mod synth;
pub mod twin;
