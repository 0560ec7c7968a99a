//! Constant-hazard competing-risks data and Monte-Carlo bias experiments.
//!
//! Each subject's time to first event is exponential with rate
//! `alpha_ae + alpha_ce`; the event is an AE with probability
//! `alpha_ae / (alpha_ae + alpha_ce)` and a death otherwise. Follow-up may be
//! cut by administrative censoring.
//!
//! Random numbers come from PCG64 ([`RNG_ALGORITHM`]). Replications of a bias
//! experiment use seeds derived from the scenario seed, so results do not
//! depend on the number of worker threads.

use std::io::Write;

use rand::RngExt;
use rand::SeedableRng;
use rand_distr::{Distribution, Exp};
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::{Dataset, DatasetMeta, EventCode, EventSet, Group, SubjectRecord};
use crate::estimators::{
    aalen_johansen, incidence_proportion, kaplan_meier, parametric_cif, CurveEstimate, CurveKind, CurvePoint,
    EstimateError, HazardPair,
};
use crate::fmt::g17;

/// Name of the generator used by [`simulate`], recorded in dataset metadata.
pub const RNG_ALGORITHM: &str = "pcg64 (PCG XSL RR 128/64)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("both hazards are zero in group {0:?} and there is no censoring")]
    BothHazardsZeroInArm(Group),
    #[error("at least one replication is required")]
    NoReplications,
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

/// End of follow-up applied to every simulated subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "mode", content = "time", rename_all = "snake_case")]
pub enum Censoring {
    None,
    /// Everyone still event-free at this time is censored.
    Fixed(f64),
    /// Each subject has its own censoring time, uniform on `(0, max]`.
    Uniform(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub group0: HazardPair,
    pub group1: HazardPair,
    pub n_per_arm: usize,
    pub censoring: Censoring,
    pub seed: u64,
}

impl Scenario {
    pub fn new(
        group0: HazardPair,
        group1: HazardPair,
        n_per_arm: usize,
        censoring: Censoring,
        seed: u64,
    ) -> Result<Self, SimulateError> {
        let s = Scenario {
            group0,
            group1,
            n_per_arm,
            censoring,
            seed,
        };
        s.check()?;
        Ok(s)
    }

    /// Group 1 hazards are the group 0 hazards multiplied by `hr_ae` and `hr_ce`.
    pub fn from_hazard_ratios(
        alpha_ae0: f64,
        alpha_ce0: f64,
        hr_ae: f64,
        hr_ce: f64,
        n_per_arm: usize,
        censoring: Censoring,
        seed: u64,
    ) -> Result<Self, SimulateError> {
        let g0 = HazardPair::new(alpha_ae0, alpha_ce0)?;
        let g1 = HazardPair::new(alpha_ae0 * hr_ae, alpha_ce0 * hr_ce)?;
        Self::new(g0, g1, n_per_arm, censoring, seed)
    }

    pub fn hazards(&self, g: Group) -> HazardPair {
        match g {
            Group::Control => self.group0,
            Group::Treatment => self.group1,
        }
    }

    fn check(&self) -> Result<(), SimulateError> {
        if self.n_per_arm == 0 {
            return Err(SimulateError::InvalidScenario("n_per_arm must be at least 1".into()));
        }
        for g in Group::BOTH {
            let h = self.hazards(g);
            HazardPair::new(h.alpha_ae, h.alpha_ce)?;
            if h.total() == 0.0 && self.censoring == Censoring::None {
                return Err(SimulateError::BothHazardsZeroInArm(g));
            }
        }
        match self.censoring {
            Censoring::Fixed(t) | Censoring::Uniform(t) if !(t.is_finite() && t > 0.0) => Err(
                SimulateError::InvalidScenario(format!("censoring time must be positive and finite, got {t}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Draws a two-arm dataset. Group 0 subjects come first. Identical scenarios
/// give identical datasets.
pub fn simulate(s: &Scenario) -> Result<Dataset, SimulateError> {
    s.check()?;
    let mut rng = Pcg64::seed_from_u64(s.seed);
    let mut records = Vec::with_capacity(2 * s.n_per_arm);
    for g in Group::BOTH {
        let h = s.hazards(g);
        let exp = (h.total() > 0.0).then(|| Exp::new(h.total()).expect("positive rate"));
        let p_ae = if h.total() > 0.0 { h.alpha_ae / h.total() } else { 0.0 };
        for i in 0..s.n_per_arm {
            let (mut time, mut event) = match &exp {
                Some(e) => {
                    let mut t = e.sample(&mut rng);
                    while t <= 0.0 {
                        t = e.sample(&mut rng);
                    }
                    let u: f64 = rng.random();
                    (t, if u < p_ae { EventCode::Ae } else { EventCode::Death })
                }
                None => (f64::INFINITY, EventCode::Censored),
            };
            let c = match s.censoring {
                Censoring::None => f64::INFINITY,
                Censoring::Fixed(c) => c,
                Censoring::Uniform(max) => max * (1.0 - rng.random::<f64>()),
            };
            if time > c {
                time = c;
                event = EventCode::Censored;
            }
            records.push(SubjectRecord::new(format!("{}-{}", g.index(), i + 1), g, time, event));
        }
    }
    Ok(Dataset::new(records).with_meta(DatasetMeta {
        label: format!("simulated; rng={RNG_ALGORITHM}; seed={}", s.seed),
        ..DatasetMeta::default()
    }))
}

/// The constant-hazard cumulative AE incidence evaluated on `grid`.
pub fn theoretical_cif(h: HazardPair, grid: &[f64]) -> Result<CurveEstimate, EstimateError> {
    let ok = grid.first().is_some_and(|&t| t >= 0.0)
        && grid.iter().all(|t| t.is_finite())
        && grid.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(EstimateError::InvalidGrid);
    }
    let points = grid
        .iter()
        .map(|&t| {
            Ok(CurvePoint {
                time: t,
                value: parametric_cif(h, t)?,
                variance: 0.0,
            })
        })
        .collect::<Result<Vec<_>, EstimateError>>()?;
    Ok(CurveEstimate {
        kind: CurveKind::CumulativeIncidence,
        points,
        horizon: *grid.last().expect("nonempty grid"),
    })
}

/// `n` evenly spaced points from `0` to `end` inclusive.
pub fn linear_grid(end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| end * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Time at which the theoretical AE incidence curves of `a` and `b` cross,
/// if they do.
///
/// Under constant hazards the ratio of the two curves is monotone, so there
/// is at most one crossing on `(0, inf)`.
pub fn crossing_time(a: HazardPair, b: HazardPair) -> Result<Option<f64>, EstimateError> {
    let diff = |t: f64| -> Result<f64, EstimateError> { Ok(parametric_cif(b, t)? - parametric_cif(a, t)?) };
    // Sign of b - a just after 0 is set by the AE hazards, and as t grows by
    // the limits.
    let s_lo = (b.alpha_ae - a.alpha_ae).signum();
    let s_inf = (b.limit()? - a.limit()?).signum();
    if b.alpha_ae == a.alpha_ae || b.limit()? == a.limit()? || s_lo == s_inf {
        return Ok(None);
    }
    let scale = 1.0 / a.total().max(b.total());
    let mut lo_t = 1e-9 * scale;
    while diff(lo_t)?.signum() != s_lo && lo_t > f64::MIN_POSITIVE {
        lo_t *= 0.5;
    }
    let mut hi_t = scale;
    while diff(hi_t)?.signum() != s_inf {
        hi_t *= 2.0;
        if !hi_t.is_finite() {
            return Ok(None);
        }
    }
    let (mut lo, mut hi) = (lo_t, hi_t);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let s = diff(mid)?.signum();
        if s == 0.0 {
            return Ok(Some(mid));
        }
        if s == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasEstimator {
    IncidenceProportion,
    /// One minus Kaplan-Meier with competing events treated as censoring.
    OneMinusKm,
    AalenJohansen,
}

impl BiasEstimator {
    pub const ALL: [BiasEstimator; 3] = [
        BiasEstimator::IncidenceProportion,
        BiasEstimator::OneMinusKm,
        BiasEstimator::AalenJohansen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BiasEstimator::IncidenceProportion => "incidence_proportion",
            BiasEstimator::OneMinusKm => "one_minus_km",
            BiasEstimator::AalenJohansen => "aalen_johansen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub group: Group,
    pub estimator: BiasEstimator,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Monte-Carlo standard error of `mean`.
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasTable {
    pub t_eval: f64,
    pub replications: usize,
    pub scenario: Scenario,
    pub rows: Vec<BiasRow>,
}

impl BiasTable {
    pub fn row(&self, group: Group, estimator: BiasEstimator) -> &BiasRow {
        self.rows
            .iter()
            .find(|r| r.group == group && r.estimator == estimator)
            .expect("every group and estimator has a row")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "group,estimator,t_eval,replications,truth,mean,bias,mc_se")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.group.index(),
                r.estimator.name(),
                g17(self.t_eval),
                self.replications,
                g17(r.truth),
                g17(r.mean),
                g17(r.bias),
                g17(r.mc_se)
            )?;
        }
        Ok(())
    }
}

/// SplitMix64 finaliser, used to spread replication indices over the seed space.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replication `rep` of a scenario with seed `seed`.
pub fn replication_seed(seed: u64, rep: usize) -> u64 {
    splitmix64(seed ^ splitmix64(rep as u64))
}

/// Compares estimates of the AE probability at `t_eval` against the
/// constant-hazard truth, averaged over `replications` simulated datasets.
pub fn bias_experiment(s: &Scenario, t_eval: f64, replications: usize) -> Result<BiasTable, SimulateError> {
    if replications == 0 {
        return Err(SimulateError::NoReplications);
    }
    if !(t_eval >= 0.0) {
        return Err(EstimateError::InvalidTime(t_eval).into());
    }
    s.check()?;
    let ae = EventSet::from(EventCode::Ae);
    let death = EventSet::from(EventCode::Death);
    let per_rep: Vec<[[f64; 3]; 2]> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let scen = Scenario {
                seed: replication_seed(s.seed, rep),
                ..s.clone()
            };
            let ds = simulate(&scen)?;
            let mut out = [[0.0; 3]; 2];
            for g in Group::BOTH {
                out[g.index()] = [
                    incidence_proportion(&ds, g, ae, t_eval)?,
                    1.0 - kaplan_meier(&ds, g, ae)?.value_at(t_eval),
                    aalen_johansen(&ds, g, ae, death)?.value_at(t_eval),
                ];
            }
            Ok(out)
        })
        .collect::<Result<_, SimulateError>>()?;

    let r = replications as f64;
    let mut rows = Vec::new();
    for g in Group::BOTH {
        let truth = parametric_cif(s.hazards(g), t_eval)?;
        for (k, est) in BiasEstimator::ALL.into_iter().enumerate() {
            let mean = per_rep.iter().map(|x| x[g.index()][k]).sum::<f64>() / r;
            let ss = per_rep.iter().map(|x| (x[g.index()][k] - mean).powi(2)).sum::<f64>();
            let mc_se = if replications > 1 { (ss / (r - 1.0) / r).sqrt() } else { f64::NAN };
            rows.push(BiasRow {
                group: g,
                estimator: est,
                truth,
                mean,
                bias: mean - truth,
                mc_se,
            });
        }
    }
    Ok(BiasTable {
        t_eval,
        replications,
        scenario: s.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_csv;

    fn reversal(n: usize, censoring: Censoring, seed: u64) -> Scenario {
        Scenario::from_hazard_ratios(0.02, 0.02, 0.5, 0.25, n, censoring, seed).unwrap()
    }

    fn hp(a: f64, c: f64) -> HazardPair {
        HazardPair::new(a, c).unwrap()
    }

    #[test]
    fn no_competing_hazard_gives_only_aes() {
        let s = Scenario::new(hp(0.1, 0.0), hp(0.3, 0.0), 500, Censoring::None, 3).unwrap();
        let ds = simulate(&s).unwrap();
        assert!(ds.records.iter().all(|r| r.event == EventCode::Ae && r.time > 0.0));
        let mean0 = ds.group(Group::Control).map(|r| r.time).sum::<f64>() / 500.0;
        // exponential mean 10, sd of the mean 10/sqrt(500)
        assert!((mean0 - 10.0).abs() < 4.0 * 10.0 / 500f64.sqrt());
    }

    #[test]
    fn tiny_censoring_time_censors_nearly_everyone() {
        let s = Scenario::new(hp(0.01, 0.01), hp(0.01, 0.01), 1000, Censoring::Fixed(1e-4), 5).unwrap();
        let ds = simulate(&s).unwrap();
        let censored = ds.records.iter().filter(|r| r.event == EventCode::Censored).count();
        assert!(censored >= 1995);
        assert!(ds.records.iter().all(|r| r.time <= 1e-4));
    }

    #[test]
    fn zero_hazards_need_censoring() {
        assert_eq!(
            Scenario::new(hp(0.0, 0.0), hp(0.1, 0.1), 10, Censoring::None, 1),
            Err(SimulateError::BothHazardsZeroInArm(Group::Control))
        );
        let s = Scenario::new(hp(0.0, 0.0), hp(0.1, 0.1), 10, Censoring::Fixed(5.0), 1).unwrap();
        let ds = simulate(&s).unwrap();
        assert!(ds.group(Group::Control).all(|r| r.event == EventCode::Censored && r.time == 5.0));
    }

    #[test]
    fn same_seed_same_bytes() {
        let write = |seed| {
            let mut buf = Vec::new();
            write_csv(&simulate(&reversal(200, Censoring::Uniform(50.0), seed)).unwrap(), &mut buf).unwrap();
            buf
        };
        assert_eq!(write(11), write(11));
        assert_ne!(write(11), write(12));
    }

    #[test]
    fn cause_fractions_converge() {
        let ds = simulate(&reversal(100_000, Censoring::None, 2024)).unwrap();
        for (g, p) in [(Group::Control, 0.5), (Group::Treatment, 2.0 / 3.0)] {
            let n = ds.group_size(g) as f64;
            let frac = ds.group(g).filter(|r| r.event == EventCode::Ae).count() as f64 / n;
            let se = (p * (1.0 - p) / n).sqrt();
            assert!((frac - p).abs() < 3.0 * se, "{g:?}: {frac} vs {p}");
        }
    }

    #[test]
    fn theoretical_curve_checks() {
        let zero = theoretical_cif(hp(0.0, 0.3), &[0.0, 1.0, 10.0]).unwrap();
        assert!(zero.points.iter().all(|p| p.value == 0.0 && p.variance == 0.0));
        assert_eq!(theoretical_cif(hp(0.1, 0.1), &[0.0, 2.0, 1.0]), Err(EstimateError::InvalidGrid));
        assert_eq!(theoretical_cif(hp(0.1, 0.1), &[]), Err(EstimateError::InvalidGrid));
        assert_eq!(theoretical_cif(hp(0.0, 0.0), &[1.0]), Err(EstimateError::BothHazardsZero));
    }

    #[test]
    fn crossing_of_sign_reversal_curves() {
        let s = reversal(1, Censoring::None, 0);
        let t = crossing_time(s.group0, s.group1).unwrap().unwrap();
        // independent Newton iteration on 0.5(1-e^{-0.04t}) - (2/3)(1-e^{-0.015t})
        let f = |t: f64| 0.5 * (1.0 - (-0.04 * t).exp()) - 2.0 / 3.0 * (1.0 - (-0.015 * t).exp());
        let df = |t: f64| 0.02 * (-0.04 * t).exp() - 0.01 * (-0.015 * t).exp();
        let mut x = 50.0;
        for _ in 0..50 {
            x -= f(x) / df(x);
        }
        assert!((t - x).abs() < 1e-8, "{t} vs {x}");
        assert!(f(t * 0.999) > 0.0 && f(t * 1.001) < 0.0);
        assert_eq!(crossing_time(hp(0.1, 0.1), hp(0.05, 0.05)).unwrap(), None);
    }

    #[test]
    fn no_censoring_no_competing_means_no_bias() {
        let s = Scenario::new(hp(0.05, 0.0), hp(0.02, 0.0), 200, Censoring::None, 9).unwrap();
        let t = bias_experiment(&s, 10.0, 50).unwrap();
        for r in &t.rows {
            assert!(r.bias.abs() < 4.0 * r.mc_se + 1e-12, "{r:?}");
        }
        // all three coincide replication by replication without censoring
        for g in Group::BOTH {
            let ip = t.row(g, BiasEstimator::IncidenceProportion).mean;
            assert!((ip - t.row(g, BiasEstimator::OneMinusKm).mean).abs() < 1e-12);
            assert!((ip - t.row(g, BiasEstimator::AalenJohansen).mean).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_table_is_deterministic_and_exports() {
        let s = reversal(100, Censoring::Uniform(40.0), 77);
        let a = bias_experiment(&s, 30.0, 20).unwrap();
        let b = bias_experiment(&s, 30.0, 20).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("group,estimator,"));
        assert_eq!(bias_experiment(&s, 30.0, 0), Err(SimulateError::NoReplications));
    }

    #[test]
    fn heavier_censoring_worsens_incidence_proportion() {
        let light = bias_experiment(&reversal(400, Censoring::Uniform(120.0), 4), 40.0, 100).unwrap();
        let heavy = bias_experiment(&reversal(400, Censoring::Uniform(60.0), 4), 40.0, 100).unwrap();
        for g in Group::BOTH {
            let l = light.row(g, BiasEstimator::IncidenceProportion).bias;
            let h = heavy.row(g, BiasEstimator::IncidenceProportion).bias;
            assert!(h < l && l < 0.0, "{g:?}: heavy {h}, light {l}");
        }
    }
}
