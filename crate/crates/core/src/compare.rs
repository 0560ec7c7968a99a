//! Two-group comparisons: incidence-rate ratio, cause-specific Cox models and
//! the Fine-Gray subdistribution hazard model.
//!
//! Every model has a single binary covariate, the treatment group, with
//! `Control` as reference. Cox fits use the Breslow partial likelihood,
//! maximised by Newton-Raphson from `beta = 0` with step halving.

use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, EventSet, Group, SubjectRecord};
use crate::estimators::{incidence_rate, EstimateError, IncidenceRate};

const Z95: f64 = 1.959963984540054;
const MAX_ITER: usize = 50;
const SCORE_TOL: f64 = 1e-9;
const STEP_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompareError {
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("reference group has no target events; the rate ratio is undefined")]
    ZeroEventsInReference,
    #[error("no target events in the data")]
    NoTargetEvents,
    #[error("Newton-Raphson did not converge after {iterations} iterations (last step {last_step:e})")]
    NonConvergence { iterations: usize, last_step: f64 },
    #[error("partial likelihood is monotone; the estimate diverges to {direction} infinity")]
    MonotoneLikelihood { direction: Direction },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Positive => "+",
            Direction::Negative => "-",
        })
    }
}

// ---------------------------------------------------------------------------
// Rate ratio
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRatio {
    /// rate(Treatment) / rate(Control).
    pub ratio: f64,
    /// Log-normal interval; `None` when the treatment group has no events.
    pub ci95: Option<(f64, f64)>,
    pub numerator: IncidenceRate,
    pub denominator: IncidenceRate,
}

/// Ratio of the incidence rate in group 1 to the rate in group 0.
pub fn rate_ratio(ds: &Dataset, target: impl Into<EventSet>) -> Result<RateRatio, CompareError> {
    let target = target.into();
    let numerator = incidence_rate(ds, Group::Treatment, target, false)?;
    let denominator = incidence_rate(ds, Group::Control, target, false)?;
    if denominator.events == 0 {
        return Err(CompareError::ZeroEventsInReference);
    }
    let ratio = numerator.rate / denominator.rate;
    let ci95 = (numerator.events > 0).then(|| {
        let se = (1.0 / numerator.events as f64 + 1.0 / denominator.events as f64).sqrt();
        ((ratio.ln() - Z95 * se).exp(), (ratio.ln() + Z95 * se).exp())
    });
    Ok(RateRatio {
        ratio,
        ci95,
        numerator,
        denominator,
    })
}

// ---------------------------------------------------------------------------
// Partial likelihood for one binary covariate
// ---------------------------------------------------------------------------

/// Weighted risk-set sizes and event counts of both groups at one distinct
/// target event time.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TieBlock {
    time: f64,
    at_risk: [f64; 2],
    events: [f64; 2],
}

impl TieBlock {
    fn d(&self) -> f64 {
        self.events[0] + self.events[1]
    }

    /// Weighted share of the risk set in group 1 at coefficient `beta`.
    fn p1(&self, beta: f64) -> f64 {
        let [w0, w1] = self.at_risk;
        if w1 == 0.0 {
            0.0
        } else if w0 == 0.0 {
            1.0
        } else {
            1.0 / (1.0 + (w0 / w1) * (-beta).exp())
        }
    }

    fn log_s0(&self, beta: f64) -> f64 {
        let [w0, w1] = self.at_risk;
        let a = w0.ln();
        let b = w1.ln() + beta;
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

fn log_lik(blocks: &[TieBlock], beta: f64) -> f64 {
    blocks
        .iter()
        .map(|b| b.events[1] * beta - b.d() * b.log_s0(beta))
        .sum()
}

fn score_info(blocks: &[TieBlock], beta: f64) -> (f64, f64) {
    blocks.iter().fold((0.0, 0.0), |(u, i), b| {
        let p = b.p1(beta);
        (u + b.events[1] - b.d() * p, i + b.d() * p * (1.0 - p))
    })
}

#[derive(Debug, Clone, Copy)]
struct Solution {
    beta: f64,
    info: f64,
    score: f64,
    log_lik: f64,
    iterations: usize,
}

fn maximise(blocks: &[TieBlock]) -> Result<Solution, CompareError> {
    let total: f64 = blocks.iter().map(TieBlock::d).sum();
    if total == 0.0 {
        return Err(CompareError::NoTargetEvents);
    }
    // Limits of the score as beta -> +/- infinity. A zero limit means the
    // score never changes sign and the likelihood keeps increasing.
    let d1: f64 = blocks.iter().map(|b| b.events[1]).sum();
    let up: f64 = blocks.iter().filter(|b| b.at_risk[1] > 0.0).map(TieBlock::d).sum();
    let down: f64 = blocks.iter().filter(|b| b.at_risk[0] == 0.0).map(TieBlock::d).sum();
    if d1 - up >= 0.0 {
        return Err(CompareError::MonotoneLikelihood {
            direction: Direction::Positive,
        });
    }
    if d1 - down <= 0.0 {
        return Err(CompareError::MonotoneLikelihood {
            direction: Direction::Negative,
        });
    }

    let mut beta = 0.0;
    let mut ll = log_lik(blocks, beta);
    let mut last_step = f64::INFINITY;
    for iter in 0..MAX_ITER {
        let (u, info) = score_info(blocks, beta);
        if u.abs() < SCORE_TOL || last_step.abs() < STEP_TOL {
            return Ok(Solution {
                beta,
                info,
                score: u,
                log_lik: ll,
                iterations: iter,
            });
        }
        let mut step = u / info;
        let mut next = beta + step;
        let mut next_ll = log_lik(blocks, next);
        let mut halvings = 0;
        while next_ll < ll - 1e-12 * (1.0 + ll.abs()) && halvings < 40 {
            step *= 0.5;
            next = beta + step;
            next_ll = log_lik(blocks, next);
            halvings += 1;
        }
        beta = next;
        ll = next_ll;
        last_step = step;
    }
    let (u, info) = score_info(blocks, beta);
    if u.abs() < SCORE_TOL || last_step.abs() < STEP_TOL {
        return Ok(Solution {
            beta,
            info,
            score: u,
            log_lik: ll,
            iterations: MAX_ITER,
        });
    }
    Err(CompareError::NonConvergence {
        iterations: MAX_ITER,
        last_step,
    })
}

/// What a Cox-type fit models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "events", rename_all = "snake_case")]
pub enum FitTarget {
    /// Hazard of the listed events; all other outcomes censor.
    CauseSpecific(EventSet),
    /// Fine-Gray subdistribution hazard of the listed events.
    Subdistribution(EventSet),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoxFit {
    pub cause: FitTarget,
    /// Log hazard ratio, group 1 versus group 0.
    pub beta: f64,
    pub se: f64,
    pub hr: f64,
    pub ci95: (f64, f64),
    pub iterations: usize,
    pub converged: bool,
    /// Score at the returned estimate.
    pub score: f64,
    pub log_lik: f64,
    pub n_events: usize,
    /// `"model"` (inverse observed information) or `"robust"` (sandwich).
    pub se_kind: &'static str,
}

impl CoxFit {
    fn new(cause: FitTarget, sol: Solution, se: f64, n_events: usize, se_kind: &'static str) -> Self {
        CoxFit {
            cause,
            beta: sol.beta,
            se,
            hr: sol.beta.exp(),
            ci95: ((sol.beta - Z95 * se).exp(), (sol.beta + Z95 * se).exp()),
            iterations: sol.iterations,
            converged: true,
            score: sol.score,
            log_lik: sol.log_lik,
            n_events,
            se_kind,
        }
    }
}

fn sorted_by_time(ds: &Dataset) -> Vec<&SubjectRecord> {
    let mut recs: Vec<_> = ds.records.iter().collect();
    recs.sort_by(|a, b| a.time.total_cmp(&b.time));
    recs
}

fn check_groups(ds: &Dataset) -> Result<(), CompareError> {
    for g in Group::BOTH {
        if ds.group_size(g) == 0 {
            return Err(EstimateError::EmptyGroup(g).into());
        }
    }
    Ok(())
}

/// Tie blocks for an unweighted Cox model of `target` events.
fn cox_blocks(ds: &Dataset, target: EventSet) -> Vec<TieBlock> {
    let recs = sorted_by_time(ds);
    let mut at_risk = [0.0f64; 2];
    for r in &recs {
        at_risk[r.group.index()] += 1.0;
    }
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < recs.len() {
        let t = recs[i].time;
        let mut block = TieBlock {
            time: t,
            at_risk,
            events: [0.0; 2],
        };
        while i < recs.len() && recs[i].time == t {
            let g = recs[i].group.index();
            if target.contains(recs[i].event) {
                block.events[g] += 1.0;
            }
            at_risk[g] -= 1.0;
            i += 1;
        }
        if block.d() > 0.0 {
            blocks.push(block);
        }
    }
    blocks
}

/// Cox model for the cause-specific hazard of `target`. Every other outcome,
/// including competing events, is treated as censoring. The standard error
/// is the inverse observed information.
pub fn cox_cause_specific(ds: &Dataset, target: impl Into<EventSet>) -> Result<CoxFit, CompareError> {
    let target = target.into();
    check_groups(ds)?;
    let blocks = cox_blocks(ds, target);
    let sol = maximise(&blocks)?;
    let n_events = blocks.iter().map(|b| b.d()).sum::<f64>() as usize;
    Ok(CoxFit::new(
        FitTarget::CauseSpecific(target),
        sol,
        (1.0 / sol.info).sqrt(),
        n_events,
        "model",
    ))
}

/// One cause-specific Cox model per event-specific hazard: the AE fit
/// censors at competing events and the competing-event fit censors at AEs.
pub fn cox_both_causes(
    ds: &Dataset,
    ae: impl Into<EventSet>,
    competing: impl Into<EventSet>,
) -> (Result<CoxFit, CompareError>, Result<CoxFit, CompareError>) {
    (cox_cause_specific(ds, ae), cox_cause_specific(ds, competing))
}

// ---------------------------------------------------------------------------
// Fine-Gray
// ---------------------------------------------------------------------------

/// Which Kaplan-Meier estimate of the censoring distribution drives the
/// inverse-probability-of-censoring weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CensoringWeights {
    /// One censoring distribution for both groups.
    #[default]
    Pooled,
    /// A separate censoring distribution per group.
    ByGroup,
}

/// Kaplan-Meier estimate of the censoring survivor function, as a step
/// function stored at censoring times.
#[derive(Clone)]
struct CensoringKm {
    times: Vec<f64>,
    /// Value right after each time.
    values: Vec<f64>,
}

impl CensoringKm {
    fn fit<'a>(recs: impl Iterator<Item = &'a SubjectRecord>, censoring: impl Fn(&SubjectRecord) -> bool) -> Self {
        let mut recs: Vec<_> = recs.collect();
        recs.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut at_risk = recs.len();
        let mut g = 1.0;
        let (mut times, mut values) = (Vec::new(), Vec::new());
        let mut i = 0;
        while i < recs.len() {
            let t = recs[i].time;
            let (mut c, mut all) = (0usize, 0usize);
            while i < recs.len() && recs[i].time == t {
                if censoring(recs[i]) {
                    c += 1;
                }
                all += 1;
                i += 1;
            }
            if c > 0 {
                g *= 1.0 - c as f64 / at_risk as f64;
                times.push(t);
                values.push(g);
            }
            at_risk -= all;
        }
        CensoringKm { times, values }
    }

    /// G(t-): product over censoring times strictly before `t`.
    fn left(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => 1.0,
            k => self.values[k - 1],
        }
    }
}

/// Fine-Gray model for the subdistribution hazard of `target`.
///
/// Subjects with a `competing` event stay in the risk set after their event,
/// weighted by `G(t-) / G(T_i-)` where `G` is the Kaplan-Meier estimate of
/// the censoring distribution. Codes in neither set are censoring. The
/// standard error is the robust sandwich estimate with the weights held fixed.
pub fn fine_gray(
    ds: &Dataset,
    target: impl Into<EventSet>,
    competing: impl Into<EventSet>,
    weights: CensoringWeights,
) -> Result<CoxFit, CompareError> {
    let target = target.into();
    let competing = competing.into();
    if target.intersects(competing) {
        return Err(EstimateError::TargetInCompetingSet.into());
    }
    check_groups(ds)?;
    let is_censoring = |r: &SubjectRecord| !target.contains(r.event) && !competing.contains(r.event);
    let km = match weights {
        CensoringWeights::Pooled => {
            let g = CensoringKm::fit(ds.records.iter(), is_censoring);
            [g.clone(), g]
        }
        CensoringWeights::ByGroup => Group::BOTH.map(|grp| CensoringKm::fit(ds.group(grp), is_censoring)),
    };

    // Ordinary risk sets and event counts at target event times.
    let mut blocks = cox_blocks(ds, target);
    if blocks.is_empty() {
        return Err(CompareError::NoTargetEvents);
    }

    // Competing-event subjects sorted by event time, per group, with their
    // 1 / G(T_i-) factor.
    let mut comp: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
    for r in ds.records.iter().filter(|r| competing.contains(r.event)) {
        let g = r.group.index();
        comp[g].push((r.time, 1.0 / km[g].left(r.time)));
    }
    for c in comp.iter_mut() {
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let mut cursor = [0usize; 2];
    let mut inv_sum = [0.0f64; 2];
    for b in blocks.iter_mut() {
        for g in 0..2 {
            while cursor[g] < comp[g].len() && comp[g][cursor[g]].0 < b.time {
                inv_sum[g] += comp[g][cursor[g]].1;
                cursor[g] += 1;
            }
            b.at_risk[g] += km[g].left(b.time) * inv_sum[g];
        }
    }

    let sol = maximise(&blocks)?;
    let beta = sol.beta;

    // Score residuals. A_g(j) is the compensator increment of a group-g
    // subject with unit weight at block j.
    let nb = blocks.len();
    let mut incr = [vec![0.0; nb], vec![0.0; nb]];
    let mut p_at = vec![0.0; nb];
    for (j, b) in blocks.iter().enumerate() {
        let p = b.p1(beta);
        p_at[j] = p;
        let s0 = b.log_s0(beta).exp();
        for (g, inc) in incr.iter_mut().enumerate() {
            let z = g as f64;
            inc[j] = (beta * z).exp() * (z - p) * b.d() / s0;
        }
    }
    // prefix[g][k] = sum_{j<k} A_g(j); tail[g][k] = sum_{j>=k} G_g(t_j-) A_g(j)
    let mut prefix = [vec![0.0; nb + 1], vec![0.0; nb + 1]];
    let mut tail = [vec![0.0; nb + 1], vec![0.0; nb + 1]];
    for g in 0..2 {
        for j in 0..nb {
            prefix[g][j + 1] = prefix[g][j] + incr[g][j];
        }
        for j in (0..nb).rev() {
            tail[g][j] = tail[g][j + 1] + km[g].left(blocks[j].time) * incr[g][j];
        }
    }
    let mut meat = 0.0;
    for r in &ds.records {
        let g = r.group.index();
        let z = g as f64;
        // blocks at or before this subject's time
        let k = blocks.partition_point(|b| b.time <= r.time);
        let mut eta = -prefix[g][k];
        if target.contains(r.event) {
            eta += z - p_at[k - 1];
        } else if competing.contains(r.event) {
            eta -= tail[g][k] / km[g].left(r.time);
        }
        meat += eta * eta;
    }
    let se = meat.sqrt() / sol.info;
    let n_events = blocks.iter().map(|b| b.d()).sum::<f64>() as usize;
    Ok(CoxFit::new(FitTarget::Subdistribution(target), sol, se, n_events, "robust"))
}
