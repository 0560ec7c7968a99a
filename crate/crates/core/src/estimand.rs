//! Estimand strategies as recodings of the raw data.
//!
//! Each strategy decides how the intercurrent events treatment
//! discontinuation and death enter the analysis. The output is an analysis
//! dataset plus an [`AnalysisPlan`] naming the target, competing and
//! censoring codes that the estimators should use. Times, groups and record
//! count are never changed.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, EventCode, EventSet, SubjectRecord};

/// Watermark carried by every export of a hypothetical-strategy analysis.
pub const HYPOTHETICAL_WARNING: &str = "assumption-laden: treatment discontinuation is handled as \
non-informative censoring, which presumes the AE and death hazards would stay the same had \
nobody discontinued; this cannot be checked from the data, so report sensitivity analyses";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimandError {
    #[error("strategy {strategy} does not fit the data: {reason}")]
    StrategyDataMismatch {
        strategy: EstimandStrategy,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandStrategy {
    TreatmentPolicy,
    WhileOnTreatment,
    Composite,
    Hypothetical,
}

impl EstimandStrategy {
    pub const ALL: [EstimandStrategy; 4] = [
        EstimandStrategy::TreatmentPolicy,
        EstimandStrategy::WhileOnTreatment,
        EstimandStrategy::Composite,
        EstimandStrategy::Hypothetical,
    ];

    /// Name used on the command line.
    pub fn flag(self) -> &'static str {
        match self {
            EstimandStrategy::TreatmentPolicy => "policy",
            EstimandStrategy::WhileOnTreatment => "on-treatment",
            EstimandStrategy::Composite => "composite",
            EstimandStrategy::Hypothetical => "hypothetical",
        }
    }
}

impl fmt::Display for EstimandStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for EstimandStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.flag() == s)
            .ok_or_else(|| format!("unknown estimand `{s}`"))
    }
}

/// Which codes of the analysis dataset are the target, which compete with
/// it, and which only end follow-up. The three sets are disjoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisPlan {
    pub strategy: EstimandStrategy,
    pub target: EventSet,
    pub competing: EventSet,
    pub censoring: EventSet,
    /// Caveats that every report of this analysis must carry.
    pub warnings: Vec<String>,
}

impl AnalysisPlan {
    pub fn is_assumption_laden(&self) -> bool {
        self.strategy == EstimandStrategy::Hypothetical
    }
}

fn recode(ds: &Dataset, f: impl Fn(EventCode) -> EventCode) -> Dataset {
    Dataset {
        records: ds
            .records
            .iter()
            .map(|r| SubjectRecord {
                event: f(r.event),
                ..r.clone()
            })
            .collect(),
        meta: ds.meta.clone(),
    }
}

/// Recodes `ds` for strategy `s`.
///
/// - Treatment policy: discontinuation is censoring; death competes. Refused
///   when discontinuations are present but AEs were not collected after them.
/// - While on treatment: death and discontinuation both compete. The first
///   recorded event is taken as authoritative.
/// - Composite: AE, death and discontinuation become one composite event
///   (coded as AE); nothing competes.
/// - Hypothetical: discontinuation is censoring; death competes. The plan
///   carries [`HYPOTHETICAL_WARNING`].
pub fn apply_strategy(ds: &Dataset, s: EstimandStrategy) -> Result<(Dataset, AnalysisPlan), EstimandError> {
    use EventCode::*;
    let ae = EventSet::from(Ae);
    let censored = EventSet::from(Censored);
    let (out, plan) = match s {
        EstimandStrategy::TreatmentPolicy => {
            let has_disc = ds.records.iter().any(|r| r.event == Discontinuation);
            if has_disc && !ds.meta.ae_collection_after_discontinuation {
                return Err(EstimandError::StrategyDataMismatch {
                    strategy: s,
                    reason: "AE collection stopped at treatment discontinuation, so AEs after \
                             discontinuation are unobserved"
                        .to_string(),
                });
            }
            let out = recode(ds, |e| if e == Discontinuation { Censored } else { e });
            (
                out,
                AnalysisPlan {
                    strategy: s,
                    target: ae,
                    competing: Death.into(),
                    censoring: censored,
                    warnings: vec![],
                },
            )
        }
        EstimandStrategy::WhileOnTreatment => (
            ds.clone(),
            AnalysisPlan {
                strategy: s,
                target: ae,
                competing: EventSet::of(&[Death, Discontinuation]),
                censoring: censored,
                warnings: vec![],
            },
        ),
        EstimandStrategy::Composite => (
            recode(ds, |e| if e == Censored { Censored } else { Ae }),
            AnalysisPlan {
                strategy: s,
                target: ae,
                competing: EventSet::EMPTY,
                censoring: censored,
                warnings: vec![],
            },
        ),
        EstimandStrategy::Hypothetical => (
            recode(ds, |e| if e == Discontinuation { Censored } else { e }),
            AnalysisPlan {
                strategy: s,
                target: ae,
                competing: Death.into(),
                censoring: censored,
                warnings: vec![HYPOTHETICAL_WARNING.to_string()],
            },
        ),
    };
    Ok((out, plan))
}
