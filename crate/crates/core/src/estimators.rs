//! One-sample estimators of AE probability and AE hazard.
//!
//! Risk sets follow the "just prior to u" convention: `n_u` counts every
//! subject whose observed time is at least `u`, all events at `u` are
//! processed together, and subjects censored at `u` are still at risk at `u`.
//!
//! Codes outside the target and competing sets are treated as censoring
//! throughout. This is how a competing event is "technically censored" in a
//! hazard analysis, and why the same censoring breaks probability estimates
//! such as one minus Kaplan-Meier.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, EventCode, EventSet, Group, SubjectRecord};
use crate::fmt::g17;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("group {0:?} has no subjects")]
    EmptyGroup(Group),
    #[error("target and competing event sets overlap")]
    TargetInCompetingSet,
    #[error("event set is empty")]
    EmptyEventSet,
    #[error("total person-time is zero")]
    ZeroPersonTime,
    #[error("both hazards are zero; the cumulative incidence is undefined")]
    BothHazardsZero,
    #[error("hazards must be finite and nonnegative")]
    InvalidHazard,
    #[error("time must be finite and nonnegative, got {0}")]
    InvalidTime(f64),
    #[error("evaluation grid must be strictly increasing and nonnegative")]
    InvalidGrid,
    #[error("io: {0}")]
    Io(String),
}

/// Counts at one distinct observed time of a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskSetPoint {
    pub time: f64,
    /// Subjects with observed time >= `time`.
    pub n_at_risk: usize,
    pub d_target: usize,
    pub d_competing: usize,
    pub d_censored: usize,
}

impl RiskSetPoint {
    pub fn d_events(&self) -> usize {
        self.d_target + self.d_competing
    }
}

fn group_records(ds: &Dataset, group: Group) -> Result<Vec<&SubjectRecord>, EstimateError> {
    let recs: Vec<_> = ds.group(group).collect();
    if recs.is_empty() {
        return Err(EstimateError::EmptyGroup(group));
    }
    Ok(recs)
}

/// Builds the risk-set table of `group` at every distinct observed time.
pub fn risk_table(
    ds: &Dataset,
    group: Group,
    target: EventSet,
    competing: EventSet,
) -> Result<Vec<RiskSetPoint>, EstimateError> {
    if target.intersects(competing) {
        return Err(EstimateError::TargetInCompetingSet);
    }
    let mut recs = group_records(ds, group)?;
    recs.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut out = Vec::new();
    let mut at_risk = recs.len();
    let mut i = 0;
    while i < recs.len() {
        let t = recs[i].time;
        let mut p = RiskSetPoint {
            time: t,
            n_at_risk: at_risk,
            d_target: 0,
            d_competing: 0,
            d_censored: 0,
        };
        while i < recs.len() && recs[i].time == t {
            let e = recs[i].event;
            if target.contains(e) {
                p.d_target += 1;
            } else if competing.contains(e) {
                p.d_competing += 1;
            } else {
                p.d_censored += 1;
            }
            i += 1;
        }
        at_risk -= p.d_target + p.d_competing + p.d_censored;
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CurveKind {
    Survival,
    CumulativeHazard,
    CumulativeIncidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub time: f64,
    pub value: f64,
    pub variance: f64,
}

/// A right-continuous step function with pointwise variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveEstimate {
    pub kind: CurveKind,
    pub points: Vec<CurvePoint>,
    /// Largest observed time; evaluations beyond it are extrapolated.
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub variance: f64,
    pub extrapolated: bool,
}

impl CurveEstimate {
    /// Value before the first step.
    pub fn initial_value(&self) -> f64 {
        match self.kind {
            CurveKind::Survival => 1.0,
            CurveKind::CumulativeHazard | CurveKind::CumulativeIncidence => 0.0,
        }
    }

    pub fn evaluate(&self, t: f64) -> Evaluation {
        let idx = self.points.partition_point(|p| p.time <= t);
        let (value, variance) = match idx {
            0 => (self.initial_value(), 0.0),
            k => (self.points[k - 1].value, self.points[k - 1].variance),
        };
        Evaluation {
            value,
            variance,
            extrapolated: t > self.horizon,
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        self.evaluate(t).value
    }

    /// Writes `time,value,variance` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "time,value,variance")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", g17(p.time), g17(p.value), g17(p.variance))?;
        }
        Ok(())
    }
}

/// Proportion of the group with a target event at any time (`a / n`).
pub fn crude_rate(ds: &Dataset, group: Group, target: impl Into<EventSet>) -> Result<f64, EstimateError> {
    let target = target.into();
    let recs = group_records(ds, group)?;
    let a = recs.iter().filter(|r| target.contains(r.event)).count();
    Ok(a as f64 / recs.len() as f64)
}

/// Proportion of the group observed to have a target event in `[0, t]`.
pub fn incidence_proportion(
    ds: &Dataset,
    group: Group,
    target: impl Into<EventSet>,
    t: f64,
) -> Result<f64, EstimateError> {
    let target = target.into();
    if !(t >= 0.0) {
        return Err(EstimateError::InvalidTime(t));
    }
    let recs = group_records(ds, group)?;
    let a = recs
        .iter()
        .filter(|r| target.contains(r.event) && r.time <= t)
        .count();
    Ok(a as f64 / recs.len() as f64)
}

/// Product-limit estimate of the probability of no event from `events` yet,
/// with Greenwood variance. Every other code is censoring.
pub fn kaplan_meier(
    ds: &Dataset,
    group: Group,
    events: impl Into<EventSet>,
) -> Result<CurveEstimate, EstimateError> {
    let events = events.into();
    if events.is_empty() {
        return Err(EstimateError::EmptyEventSet);
    }
    let table = risk_table(ds, group, events, EventSet::EMPTY)?;
    let horizon = table.last().map_or(0.0, |p| p.time);
    let mut surv = 1.0;
    let mut greenwood = 0.0;
    let mut points = Vec::new();
    for p in table.iter().filter(|p| p.d_target > 0) {
        let n = p.n_at_risk as f64;
        let d = p.d_target as f64;
        surv *= 1.0 - d / n;
        // n == d drives the curve to zero; the Greenwood term is then irrelevant.
        if p.n_at_risk > p.d_target {
            greenwood += d / (n * (n - d));
        }
        points.push(CurvePoint {
            time: p.time,
            value: surv,
            variance: surv * surv * greenwood,
        });
    }
    Ok(CurveEstimate {
        kind: CurveKind::Survival,
        points,
        horizon,
    })
}

/// Nelson-Aalen cumulative AE hazard. Competing events and end of follow-up
/// both act as censoring.
pub fn nelson_aalen(ds: &Dataset, group: Group) -> Result<CurveEstimate, EstimateError> {
    nelson_aalen_for(ds, group, EventCode::Ae)
}

/// Nelson-Aalen cumulative hazard of the `target` events, with variance
/// `sum d_u / n_u^2`.
pub fn nelson_aalen_for(
    ds: &Dataset,
    group: Group,
    target: impl Into<EventSet>,
) -> Result<CurveEstimate, EstimateError> {
    let target = target.into();
    if target.is_empty() {
        return Err(EstimateError::EmptyEventSet);
    }
    let table = risk_table(ds, group, target, EventSet::EMPTY)?;
    let horizon = table.last().map_or(0.0, |p| p.time);
    let mut cum = 0.0;
    let mut var = 0.0;
    let points = table
        .iter()
        .filter(|p| p.d_target > 0)
        .map(|p| {
            let n = p.n_at_risk as f64;
            let d = p.d_target as f64;
            cum += d / n;
            var += d / (n * n);
            CurvePoint {
                time: p.time,
                value: cum,
                variance: var,
            }
        })
        .collect();
    Ok(CurveEstimate {
        kind: CurveKind::CumulativeHazard,
        points,
        horizon,
    })
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Aalen-Johansen estimate of `P(T <= t, target)` when the `competing` codes
/// preclude the target event.
///
/// The curve has a point at every time with a target or competing event.
/// Variance is Aalen's counting-process estimator; terms whose numerator
/// vanishes (at-risk set exhausted) are taken as zero.
pub fn aalen_johansen(
    ds: &Dataset,
    group: Group,
    target: impl Into<EventSet>,
    competing: impl Into<EventSet>,
) -> Result<CurveEstimate, EstimateError> {
    let target = target.into();
    let competing = competing.into();
    if target.is_empty() {
        return Err(EstimateError::EmptyEventSet);
    }
    let table = risk_table(ds, group, target, competing)?;
    let horizon = table.last().map_or(0.0, |p| p.time);

    // Var F(t) = sum_j (F(t) - F_j)^2 a_j + sum_j c_j - 2 sum_j (F(t) - F_j) b_j
    // with j over event times <= t. The square is expanded so each point
    // costs O(1) using running sums of a_j, F_j a_j, F_j^2 a_j, b_j, F_j b_j.
    let (mut sa, mut sfa, mut sffa, mut sc, mut sb, mut sfb) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut surv_prev = 1.0;
    let mut cif = 0.0;
    let mut points = Vec::new();
    for p in table.iter().filter(|p| p.d_events() > 0) {
        let n = p.n_at_risk as f64;
        let d1 = p.d_target as f64;
        let d = p.d_events() as f64;
        cif += surv_prev * d1 / n;

        let a = ratio_or_zero(d, (n - 1.0) * (n - d));
        let b = ratio_or_zero(surv_prev * d1 * (n - d1), n * (n - d) * (n - 1.0));
        let c = ratio_or_zero(surv_prev * surv_prev * d1 * (n - d1), n * n * (n - 1.0));
        sa += a;
        sfa += cif * a;
        sffa += cif * cif * a;
        sb += b;
        sfb += cif * b;
        sc += c;
        let variance = (cif * cif * sa - 2.0 * cif * sfa + sffa + sc - 2.0 * (cif * sb - sfb)).max(0.0);

        surv_prev *= 1.0 - d / n;
        points.push(CurvePoint {
            time: p.time,
            value: cif,
            variance,
        });
    }
    Ok(CurveEstimate {
        kind: CurveKind::CumulativeIncidence,
        points,
        horizon,
    })
}

/// Events per unit person-time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IncidenceRate {
    pub events: usize,
    pub person_time: f64,
    pub rate: f64,
}

/// Incidence rate `a / sum t_i` over all subjects of the group.
///
/// With `exposure_adjusted`, each subject contributes its exposure time and
/// only target events occurring no later than the end of exposure are counted.
pub fn incidence_rate(
    ds: &Dataset,
    group: Group,
    target: impl Into<EventSet>,
    exposure_adjusted: bool,
) -> Result<IncidenceRate, EstimateError> {
    let target = target.into();
    let recs = group_records(ds, group)?;
    let mut events = 0;
    let mut person_time = 0.0;
    for r in recs {
        let at_risk = if exposure_adjusted { r.exposure() } else { r.time };
        person_time += at_risk;
        if target.contains(r.event) && r.time <= at_risk {
            events += 1;
        }
    }
    if !(person_time > 0.0) {
        return Err(EstimateError::ZeroPersonTime);
    }
    Ok(IncidenceRate {
        events,
        person_time,
        rate: events as f64 / person_time,
    })
}

/// Constant cause-specific hazards of the AE and of the competing event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HazardPair {
    pub alpha_ae: f64,
    pub alpha_ce: f64,
}

impl HazardPair {
    pub fn new(alpha_ae: f64, alpha_ce: f64) -> Result<Self, EstimateError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(ok(alpha_ae) && ok(alpha_ce)) {
            return Err(EstimateError::InvalidHazard);
        }
        Ok(Self { alpha_ae, alpha_ce })
    }

    /// Plug-in estimate from the incidence rates of the target and of the
    /// competing events of a group.
    pub fn from_incidence_rates(
        ds: &Dataset,
        group: Group,
        target: impl Into<EventSet>,
        competing: impl Into<EventSet>,
    ) -> Result<Self, EstimateError> {
        let ae = incidence_rate(ds, group, target, false)?;
        let ce = incidence_rate(ds, group, competing, false)?;
        Self::new(ae.rate, ce.rate)
    }

    pub fn total(&self) -> f64 {
        self.alpha_ae + self.alpha_ce
    }

    /// `alpha_ae / (alpha_ae + alpha_ce)`: the AE probability as t grows.
    pub fn limit(&self) -> Result<f64, EstimateError> {
        if self.total() == 0.0 {
            return Err(EstimateError::BothHazardsZero);
        }
        Ok(self.alpha_ae / self.total())
    }
}

/// Cumulative AE incidence at `t` under constant cause-specific hazards.
pub fn parametric_cif(h: HazardPair, t: f64) -> Result<f64, EstimateError> {
    if !(t >= 0.0) {
        return Err(EstimateError::InvalidTime(t));
    }
    let limit = h.limit()?;
    Ok(limit * -(-h.total() * t).exp_m1())
}
