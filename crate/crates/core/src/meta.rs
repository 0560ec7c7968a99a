//! Meta-analysis of a handful of studies on the log effect scale.
//!
//! Three combiners are provided: inverse-variance fixed effect, random
//! effects with the modified Knapp-Hartung interval, and a Bayesian
//! normal-normal model with a half-normal prior on the heterogeneity `tau`
//! and a flat prior on the mean `mu`.
//!
//! The Bayesian posterior is computed by quadrature over `tau`. Given `tau`,
//! the posterior of `mu` is normal, so the marginal posterior of `mu` is a
//! finite normal mixture whose quantiles are found by bisection. The `tau`
//! grid covers `[0, 8 * prior_scale]`: 200 log-spaced points between
//! `8e-9 * prior_scale` and `8e-3 * prior_scale`, then 2000 evenly spaced
//! points up to the end, plus `tau = 0`. Integration uses the trapezoid rule.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

use crate::fmt::g17;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("no studies given")]
    EmptyInput,
    #[error("at least two studies are needed")]
    FewerThanTwoStudies,
    #[error("study `{label}`: {reason}")]
    InvalidStudy { label: String, reason: String },
    #[error("prior scale must be positive and finite, got {0}")]
    InvalidPriorScale(f64),
    #[error("posterior weights vanish on the whole tau grid")]
    QuadratureUnderflow,
    #[error("studies file: {0}")]
    Csv(#[from] csv::Error),
}

/// One study's log effect estimate (for example a log hazard ratio) and its
/// standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEffect {
    pub label: String,
    #[serde(rename = "log_effect")]
    pub y: f64,
    pub se: f64,
}

impl StudyEffect {
    pub fn new(label: impl Into<String>, y: f64, se: f64) -> Self {
        StudyEffect {
            label: label.into(),
            y,
            se,
        }
    }

    /// Builds a study from a ratio estimate such as a hazard ratio.
    pub fn from_ratio(label: impl Into<String>, ratio: f64, se_log: f64) -> Self {
        Self::new(label, ratio.ln(), se_log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum MetaMethod {
    FixedEffect,
    ModifiedKnappHartung,
    BayesHalfNormal { scale: f64 },
}

impl MetaMethod {
    pub fn label(&self) -> String {
        match self {
            MetaMethod::FixedEffect => "fixed effect".to_string(),
            MetaMethod::ModifiedKnappHartung => "modified Knapp-Hartung".to_string(),
            MetaMethod::BayesHalfNormal { scale } => format!("Bayes HN({scale})"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Degrees of freedom of the t reference distribution.
    pub df: Option<f64>,
    /// Knapp-Hartung variance factor after flooring at 1.
    pub kh_factor: Option<f64>,
    /// Relative change of the posterior normalising constant when every
    /// other grid point is dropped.
    pub quadrature_error: Option<f64>,
    pub grid_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetaResult {
    pub method: MetaMethod,
    /// Combined log effect; the posterior median for the Bayesian method.
    pub mu_hat: f64,
    pub interval95: (f64, f64),
    /// Heterogeneity: the estimate for random effects, the posterior median
    /// for the Bayesian method, absent for fixed effect.
    pub tau: Option<f64>,
    pub diagnostics: Diagnostics,
}

impl MetaResult {
    pub fn width(&self) -> f64 {
        self.interval95.1 - self.interval95.0
    }
}

fn check(studies: &[StudyEffect]) -> Result<(), MetaError> {
    if studies.is_empty() {
        return Err(MetaError::EmptyInput);
    }
    for s in studies {
        let bad = |reason: &str| MetaError::InvalidStudy {
            label: s.label.clone(),
            reason: reason.to_string(),
        };
        if !s.y.is_finite() {
            return Err(bad("log effect must be finite"));
        }
        if !(s.se.is_finite() && s.se > 0.0) {
            return Err(bad("standard error must be positive and finite"));
        }
    }
    Ok(())
}

fn z975() -> f64 {
    Normal::standard().inverse_cdf(0.975)
}

fn t975(df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("positive df").inverse_cdf(0.975)
}

/// Weighted mean and total weight for weights `1 / (se^2 + tau2)`.
fn weighted(studies: &[StudyEffect], tau2: f64) -> (f64, f64) {
    let (mut sw, mut swy) = (0.0, 0.0);
    for s in studies {
        let w = 1.0 / (s.se * s.se + tau2);
        sw += w;
        swy += w * s.y;
    }
    (swy / sw, sw)
}

pub fn fixed_effect(studies: &[StudyEffect]) -> Result<MetaResult, MetaError> {
    check(studies)?;
    let (mu, sw) = weighted(studies, 0.0);
    let half = z975() / sw.sqrt();
    Ok(MetaResult {
        method: MetaMethod::FixedEffect,
        mu_hat: mu,
        interval95: (mu - half, mu + half),
        tau: None,
        diagnostics: Diagnostics::default(),
    })
}

/// Cochran's Q about the fixed-effect mean.
pub fn cochran_q(studies: &[StudyEffect]) -> Result<f64, MetaError> {
    check(studies)?;
    let (mu, _) = weighted(studies, 0.0);
    Ok(studies.iter().map(|s| (s.y - mu).powi(2) / (s.se * s.se)).sum())
}

/// DerSimonian-Laird estimate of `tau` (not `tau^2`).
pub fn tau_dl(studies: &[StudyEffect]) -> Result<f64, MetaError> {
    check(studies)?;
    if studies.len() < 2 {
        return Err(MetaError::FewerThanTwoStudies);
    }
    let q = cochran_q(studies)?;
    let s1: f64 = studies.iter().map(|s| 1.0 / (s.se * s.se)).sum();
    let s2: f64 = studies.iter().map(|s| 1.0 / s.se.powi(4)).sum();
    let k = studies.len() as f64;
    Ok(((q - (k - 1.0)) / (s1 - s2 / s1)).max(0.0).sqrt())
}

/// Random-effects mean with the Knapp-Hartung variance factor floored at 1
/// and a t interval on `k - 1` degrees of freedom.
pub fn knapp_hartung_modified(studies: &[StudyEffect]) -> Result<MetaResult, MetaError> {
    let tau = tau_dl(studies)?;
    let tau2 = tau * tau;
    let (mu, sw) = weighted(studies, tau2);
    let k = studies.len() as f64;
    let spread: f64 = studies
        .iter()
        .map(|s| (s.y - mu).powi(2) / (s.se * s.se + tau2))
        .sum::<f64>()
        / (k - 1.0);
    let q = spread.max(1.0);
    let half = t975(k - 1.0) * (q / sw).sqrt();
    Ok(MetaResult {
        method: MetaMethod::ModifiedKnappHartung,
        mu_hat: mu,
        interval95: (mu - half, mu + half),
        tau: Some(tau),
        diagnostics: Diagnostics {
            df: Some(k - 1.0),
            kh_factor: Some(q),
            ..Diagnostics::default()
        },
    })
}

/// Normalised posterior of `tau` on the quadrature grid, with the
/// conditional posterior of `mu` at each node.
#[derive(Debug, Clone)]
pub struct TauPosterior {
    pub grid: Vec<f64>,
    /// Posterior density at each grid point; integrates to 1 by the
    /// trapezoid rule.
    pub density: Vec<f64>,
    /// Trapezoid weight times density: the mixture weight of each node.
    pub mass: Vec<f64>,
    pub cond_mean: Vec<f64>,
    pub cond_sd: Vec<f64>,
    pub quadrature_error: f64,
}

fn tau_grid(scale: f64) -> Vec<f64> {
    let top = 8.0 * scale;
    let (n_log, n_lin) = (200usize, 2000usize);
    let (a, b) = (top * 1e-9, top * 1e-3);
    let mut g = Vec::with_capacity(1 + n_log + n_lin);
    g.push(0.0);
    for i in 0..n_log {
        g.push(a * (b / a).powf(i as f64 / n_log as f64));
    }
    for i in 0..n_lin {
        g.push(b + (top - b) * i as f64 / (n_lin - 1) as f64);
    }
    g
}

fn trapezoid_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut w = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = 0.5 * (x[i + 1] - x[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// Log of the marginal likelihood of `tau` with `mu` integrated out under a
/// flat prior, up to a constant.
pub fn log_marginal_likelihood(studies: &[StudyEffect], tau: f64) -> f64 {
    let tau2 = tau * tau;
    let (mu, sw) = weighted(studies, tau2);
    let mut lp = -0.5 * sw.ln();
    for s in studies {
        let v = s.se * s.se + tau2;
        lp -= 0.5 * v.ln() + 0.5 * (s.y - mu).powi(2) / v;
    }
    lp
}

pub fn tau_posterior(studies: &[StudyEffect], prior_scale: f64) -> Result<TauPosterior, MetaError> {
    check(studies)?;
    if !(prior_scale.is_finite() && prior_scale > 0.0) {
        return Err(MetaError::InvalidPriorScale(prior_scale));
    }
    let grid = tau_grid(prior_scale);
    let logp: Vec<f64> = grid
        .iter()
        .map(|&t| log_marginal_likelihood(studies, t) - 0.5 * (t / prior_scale).powi(2))
        .collect();
    let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(MetaError::QuadratureUnderflow);
    }
    let unnorm: Vec<f64> = logp.iter().map(|l| (l - top).exp()).collect();
    let tw = trapezoid_weights(&grid);
    let z: f64 = unnorm.iter().zip(&tw).map(|(d, w)| d * w).sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(MetaError::QuadratureUnderflow);
    }
    let (coarse_x, coarse_d): (Vec<f64>, Vec<f64>) = grid
        .iter()
        .zip(&unnorm)
        .enumerate()
        .filter(|(i, _)| i % 2 == 0 || *i == grid.len() - 1)
        .map(|(_, (x, d))| (*x, *d))
        .unzip();
    let z_coarse: f64 = trapezoid_weights(&coarse_x).iter().zip(&coarse_d).map(|(w, d)| w * d).sum();

    let density: Vec<f64> = unnorm.iter().map(|d| d / z).collect();
    let mass: Vec<f64> = density.iter().zip(&tw).map(|(d, w)| d * w).collect();
    let (cond_mean, cond_sd) = grid
        .iter()
        .map(|&t| {
            let (m, sw) = weighted(studies, t * t);
            (m, sw.powf(-0.5))
        })
        .unzip();
    Ok(TauPosterior {
        grid,
        density,
        mass,
        cond_mean,
        cond_sd,
        quadrature_error: ((z_coarse - z) / z).abs(),
    })
}

impl TauPosterior {
    /// Posterior CDF of `mu` at `x`.
    pub fn mu_cdf(&self, x: f64) -> f64 {
        let n = Normal::standard();
        self.mass
            .iter()
            .zip(self.cond_mean.iter().zip(&self.cond_sd))
            .map(|(w, (m, s))| w * n.cdf((x - m) / s))
            .sum()
    }

    pub fn mu_quantile(&self, p: f64) -> f64 {
        let spread = self.cond_sd.iter().cloned().fold(0.0, f64::max);
        let lo_m = self.cond_mean.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi_m = self.cond_mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut lo, mut hi) = (lo_m - 40.0 * spread, hi_m + 40.0 * spread);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.mu_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Posterior quantile of `tau`, interpolating the cumulative trapezoid sums.
    pub fn tau_quantile(&self, p: f64) -> f64 {
        let mut acc = 0.0;
        for i in 1..self.grid.len() {
            let step = 0.5 * (self.density[i - 1] + self.density[i]) * (self.grid[i] - self.grid[i - 1]);
            if acc + step >= p && step > 0.0 {
                let f = (p - acc) / step;
                return self.grid[i - 1] + f * (self.grid[i] - self.grid[i - 1]);
            }
            acc += step;
        }
        *self.grid.last().expect("nonempty grid")
    }
}

/// Bayesian random-effects meta-analysis with `tau ~ HalfNormal(prior_scale)`
/// and a flat prior on `mu`. Reports the posterior median of `mu` with its
/// central 95% credible interval, and the posterior median of `tau`.
pub fn bayes_half_normal(studies: &[StudyEffect], prior_scale: f64) -> Result<MetaResult, MetaError> {
    let post = tau_posterior(studies, prior_scale)?;
    Ok(MetaResult {
        method: MetaMethod::BayesHalfNormal { scale: prior_scale },
        mu_hat: post.mu_quantile(0.5),
        interval95: (post.mu_quantile(0.025), post.mu_quantile(0.975)),
        tau: Some(post.tau_quantile(0.5)),
        diagnostics: Diagnostics {
            quadrature_error: Some(post.quadrature_error),
            grid_points: Some(post.grid.len()),
            ..Diagnostics::default()
        },
    })
}

/// Half-normal prior scales used when none is given.
pub const DEFAULT_PRIOR_SCALES: [f64; 2] = [0.5, 1.0];

/// Synthetic two-study set with strong heterogeneity whose fixed-effect
/// hazard ratio is close to 1.97. Not real trial data.
pub fn synthetic_two_study_fixture() -> Vec<StudyEffect> {
    vec![
        StudyEffect::from_ratio("synthetic study A", 3.0, 0.22),
        StudyEffect::from_ratio("synthetic study B", 1.15, 0.25),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestRowKind {
    Study,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForestRow {
    pub label: String,
    pub kind: ForestRowKind,
    pub log_effect: f64,
    pub log_lo: f64,
    pub log_hi: f64,
}

impl ForestRow {
    pub fn ratio(&self) -> f64 {
        self.log_effect.exp()
    }

    pub fn ratio_interval(&self) -> (f64, f64) {
        (self.log_lo.exp(), self.log_hi.exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForestTable {
    pub rows: Vec<ForestRow>,
}

impl ForestTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "label,kind,log_effect,log_lo,log_hi,ratio,ratio_lo,ratio_hi")?;
        for r in &self.rows {
            let (lo, hi) = r.ratio_interval();
            let kind = match r.kind {
                ForestRowKind::Study => "study",
                ForestRowKind::Combined => "combined",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                csv_field(&r.label),
                kind,
                g17(r.log_effect),
                g17(r.log_lo),
                g17(r.log_hi),
                g17(r.ratio()),
                g17(lo),
                g17(hi)
            )?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-study rows (estimate with normal 95% interval) followed by one row per
/// combined result.
pub fn forest_data(studies: &[StudyEffect], results: &[MetaResult]) -> ForestTable {
    let z = z975();
    let mut rows: Vec<ForestRow> = studies
        .iter()
        .map(|s| ForestRow {
            label: s.label.clone(),
            kind: ForestRowKind::Study,
            log_effect: s.y,
            log_lo: s.y - z * s.se,
            log_hi: s.y + z * s.se,
        })
        .collect();
    rows.extend(results.iter().map(|r| ForestRow {
        label: r.method.label(),
        kind: ForestRowKind::Combined,
        log_effect: r.mu_hat,
        log_lo: r.interval95.0,
        log_hi: r.interval95.1,
    }));
    ForestTable { rows }
}

/// Reads `label,log_effect,se` rows.
pub fn read_studies<R: Read>(input: R) -> Result<Vec<StudyEffect>, MetaError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);
    let studies = rdr.deserialize().collect::<Result<Vec<StudyEffect>, _>>()?;
    check(&studies)?;
    Ok(studies)
}

pub fn write_studies<W: Write>(studies: &[StudyEffect], mut out: W) -> std::io::Result<()> {
    writeln!(out, "label,log_effect,se")?;
    for s in studies {
        writeln!(out, "{},{},{}", csv_field(&s.label), g17(s.y), g17(s.se))?;
    }
    Ok(())
}
