//! Analysis of time to first adverse event (AE) with varying follow-up and
//! competing events.
//!
//! The crate is organised by stage of an analysis:
//!
//! - [`data`]: subject-level records, CSV ingestion and validation.
//! - [`estimand`]: recoding of raw data according to an estimand strategy.
//! - [`estimators`]: one-sample estimators (crude rate, incidence proportion,
//!   Kaplan-Meier, Nelson-Aalen, Aalen-Johansen, incidence rates, parametric CIF).
//! - [`compare`]: two-group comparisons (rate ratio, cause-specific Cox,
//!   Fine-Gray).
//! - [`simulate`]: constant-hazard competing-risks generator and bias experiments.
//! - [`meta`]: few-study meta-analysis (fixed effect, modified Knapp-Hartung,
//!   Bayesian half-normal heterogeneity prior).
//! - [`plot`]: deterministic SVG rendering of curves and forest plots.
//! - [`cli`]: the `aesurv` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod compare;
pub mod data;
pub mod estimand;
pub mod estimators;
pub mod fmt;
pub mod meta;
pub mod plot;
pub mod simulate;

pub use data::{Dataset, DatasetMeta, EventCode, EventSet, Group, SubjectRecord};
pub use estimators::{CurveEstimate, CurveKind, HazardPair};
