//! Survival analysis: Cox proportional hazards (Breslow ties), risk
//! stratification, Kaplan-Meier estimation, log-rank testing, and Harrell's
//! concordance index.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{ExpressionMatrix, GeneId};
use crate::error::{Error, Result};
use crate::linalg::lu_solve;

/// One subject: follow-up time in months and whether the event was observed
/// (false = censored at `time`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::InvalidInput(format!(
                "survival time must be positive and finite, got {time}"
            )));
        }
        Ok(SurvivalRecord { time, event })
    }
}

/// Proportional-hazards fit. Coefficients are reported in the original
/// feature scale; the standardization used during Newton iterations is
/// recorded so scores reproduce exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub coefficients: Array1<f64>,
    pub feature_means: Array1<f64>,
    /// Indices of zero-variance features that were excluded (coefficient 0).
    pub excluded: Vec<usize>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Always "breslow"; recorded so serialized models name their tie rule.
    pub tie_method: String,
}

/// Product-limit estimate: survival probability after each event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi2: f64,
    pub p: f64,
    pub df: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskGroup {
    High,
    Low,
}

/// Breslow partial log-likelihood, its gradient, and (optionally) the
/// negated Hessian, all in the standardized feature space.
fn breslow_loglik(
    z: &Array2<f64>,
    order: &[usize],
    records: &[SurvivalRecord],
    beta: &Array1<f64>,
    want_hessian: bool,
) -> Result<(f64, Array1<f64>, Option<Array2<f64>>)> {
    let p = z.ncols();
    let eta = z.dot(beta);
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cox linear predictor".into()));
    }
    let w = eta.mapv(f64::exp);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cox hazard weights".into()));
    }

    let mut loglik = 0.0;
    let mut grad: Array1<f64> = Array1::zeros(p);
    let mut neg_hess: Option<Array2<f64>> = want_hessian.then(|| Array2::zeros((p, p)));

    // walk times descending, growing the risk-set sums; each unique time's
    // contribution uses the risk set of everyone with time >= t
    let mut s0 = 0.0;
    let mut s1: Array1<f64> = Array1::zeros(p);
    let mut s2: Option<Array2<f64>> = want_hessian.then(|| Array2::zeros((p, p)));
    let mut i = order.len();
    while i > 0 {
        // consume the tie group [j, i)
        let t = records[order[i - 1]].time;
        let mut j = i;
        while j > 0 && records[order[j - 1]].time == t {
            let idx = order[j - 1];
            let wi = w[idx];
            s0 += wi;
            let zi = z.row(idx);
            s1.scaled_add(wi, &zi);
            if let Some(s2) = s2.as_mut() {
                for a in 0..p {
                    let wa = wi * zi[a];
                    for b in 0..p {
                        s2[[a, b]] += wa * zi[b];
                    }
                }
            }
            j -= 1;
        }
        let mut d = 0usize;
        for &idx in &order[j..i] {
            if records[idx].event {
                d += 1;
                loglik += eta[idx];
                grad += &z.row(idx);
            }
        }
        if d > 0 {
            let dt = d as f64;
            loglik -= dt * s0.ln();
            let mean = &s1 / s0;
            grad.scaled_add(-dt, &mean);
            if let (Some(h), Some(s2)) = (neg_hess.as_mut(), s2.as_ref()) {
                for a in 0..p {
                    for b in 0..p {
                        h[[a, b]] += dt * (s2[[a, b]] / s0 - mean[a] * mean[b]);
                    }
                }
            }
        }
        i = j;
    }
    Ok((loglik, grad, neg_hess))
}

/// Fit a Cox proportional-hazards model by Newton-Raphson on the Breslow
/// partial log-likelihood with step-halving.
///
/// Features are standardized internally; zero-variance features are excluded
/// with a warning and reported with coefficient 0. Convergence is a gradient
/// norm below 1e-6 (in standardized space) within 100 iterations.
pub fn fit_cox(x: ArrayView2<'_, f64>, records: &[SurvivalRecord]) -> Result<CoxModel> {
    let n = x.nrows();
    let p_all = x.ncols();
    if records.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} feature rows but {} survival records",
            records.len()
        )));
    }
    let n_events = records.iter().filter(|r| r.event).count();
    if n_events < 2 {
        return Err(Error::InvalidInput(format!(
            "cox regression needs at least 2 events, got {n_events}"
        )));
    }

    let means = x.mean_axis(Axis(0)).expect("n >= 2");
    let sds = x.map_axis(Axis(0), |col| {
        let m = col.mean().expect("n >= 2");
        (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
    });
    let kept: Vec<usize> = (0..p_all).filter(|&j| sds[j] > 0.0).collect();
    let excluded: Vec<usize> = (0..p_all).filter(|&j| sds[j] == 0.0).collect();
    if !excluded.is_empty() {
        log::warn!(
            "cox regression: excluding {} zero-variance feature(s): {:?}",
            excluded.len(),
            excluded
        );
    }
    if kept.is_empty() {
        return Err(Error::InvalidInput(
            "cox regression: all features have zero variance".into(),
        ));
    }

    let p = kept.len();
    let mut z = Array2::zeros((n, p));
    for (c, &j) in kept.iter().enumerate() {
        for r in 0..n {
            z[[r, c]] = (x[[r, j]] - means[j]) / sds[j];
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .time
            .partial_cmp(&records[b].time)
            .expect("times are finite")
    });

    let mut beta = Array1::zeros(p);
    let (mut loglik, mut grad, _) = breslow_loglik(&z, &order, records, &beta, false)?;
    let mut grad_norm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut converged = grad_norm < 1e-6;
    let mut iterations = 0;

    while !converged && iterations < 100 {
        iterations += 1;
        let (_, _, neg_hess) = breslow_loglik(&z, &order, records, &beta, true)?;
        let neg_hess = neg_hess.expect("requested");
        let delta = lu_solve(&neg_hess, &grad)?;

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + &(&delta * step);
            match breslow_loglik(&z, &order, records, &candidate, false) {
                Ok((ll, g, _)) if ll >= loglik => {
                    beta = candidate;
                    loglik = ll;
                    grad = g;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
        if beta.iter().any(|b| b.abs() > 50.0) {
            return Err(Error::Numerical(
                "monotone likelihood: coefficients diverged (|beta| > 50)".into(),
            ));
        }
        grad_norm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        converged = grad_norm < 1e-6;
    }

    let mut coefficients = Array1::zeros(p_all);
    for (c, &j) in kept.iter().enumerate() {
        coefficients[j] = beta[c] / sds[j];
    }
    Ok(CoxModel {
        coefficients,
        feature_means: means,
        excluded,
        iterations,
        gradient_norm: grad_norm,
        converged,
        tie_method: "breslow".into(),
    })
}

impl CoxModel {
    /// Centered linear predictor (x − mean)·β: the log relative hazard
    /// against the training-cohort average. Centering reproduces the scores
    /// of the internal standardized fit exactly.
    pub fn risk_scores(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.coefficients.len() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} features, matrix has {} columns",
                self.coefficients.len(),
                x.ncols()
            )));
        }
        let mut scores = Array1::zeros(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut s = 0.0;
            for j in 0..row.len() {
                s += (row[j] - self.feature_means[j]) * self.coefficients[j];
            }
            scores[i] = s;
        }
        Ok(scores)
    }
}

/// Split scores at the median: strictly above → High, at or below → Low.
/// For even n the median is the mean of the two middle order statistics.
pub fn median_split(scores: &[f64]) -> Result<Vec<RiskGroup>> {
    if scores.len() < 2 {
        return Err(Error::InvalidInput(
            "median split needs at least 2 scores".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("risk score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let median = if n % 2 == 0 {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    } else {
        sorted[n / 2]
    };
    if sorted[0] == sorted[n - 1] {
        log::warn!("median split: all scores identical; assigning everyone to Low");
    }
    Ok(scores
        .iter()
        .map(|&s| if s > median { RiskGroup::High } else { RiskGroup::Low })
        .collect())
}

/// Kaplan-Meier product-limit curve. Censored subjects leave the risk set
/// after their time; steps occur at event times only.
pub fn km_curve(records: &[SurvivalRecord]) -> Result<KmCurve> {
    if records.is_empty() {
        return Err(Error::InvalidInput("empty survival records".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[a]
            .time
            .partial_cmp(&records[b].time)
            .expect("times are finite")
    });

    let mut times = Vec::new();
    let mut survival = Vec::new();
    let mut at_risk = Vec::new();
    let mut events = Vec::new();
    let mut s = 1.0;
    let mut i = 0;
    while i < order.len() {
        let t = records[order[i]].time;
        let n_risk = records.len() - i;
        let mut d = 0;
        let mut j = i;
        while j < order.len() && records[order[j]].time == t {
            if records[order[j]].event {
                d += 1;
            }
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / n_risk as f64;
            times.push(t);
            survival.push(s);
            at_risk.push(n_risk);
            events.push(d);
        }
        i = j;
    }
    Ok(KmCurve {
        times,
        survival,
        at_risk,
        events,
    })
}

/// Two-group log-rank test (1 degree of freedom), hypergeometric variance,
/// skipping event times where only one subject remains at risk.
pub fn log_rank_test(a: &[SurvivalRecord], b: &[SurvivalRecord]) -> Result<LogRankResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("log-rank needs two non-empty groups".into()));
    }
    let total_events = a.iter().chain(b).filter(|r| r.event).count();
    if total_events == 0 {
        return Err(Error::InvalidInput("log-rank needs at least one event".into()));
    }

    let mut event_times: BTreeSet<u64> = BTreeSet::new();
    for r in a.iter().chain(b) {
        if r.event {
            event_times.insert(r.time.to_bits());
        }
    }

    let mut observed_a = 0.0;
    let mut expected_a = 0.0;
    let mut variance = 0.0;
    for bits in event_times {
        let t = f64::from_bits(bits);
        let n_a = a.iter().filter(|r| r.time >= t).count() as f64;
        let n_b = b.iter().filter(|r| r.time >= t).count() as f64;
        let n = n_a + n_b;
        let d_a = a.iter().filter(|r| r.event && r.time == t).count() as f64;
        let d_b = b.iter().filter(|r| r.event && r.time == t).count() as f64;
        let d = d_a + d_b;
        observed_a += d_a;
        expected_a += d * n_a / n;
        if n > 1.0 {
            variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
        }
    }

    if variance <= 0.0 {
        log::warn!("log-rank: zero variance; reporting chi2 = 0");
        return Ok(LogRankResult {
            chi2: 0.0,
            p: 1.0,
            df: 1,
        });
    }
    let diff = observed_a - expected_a;
    let chi2 = diff * diff / variance;
    let dist = ChiSquared::new(1.0).expect("df = 1 is valid");
    let p = dist.sf(chi2).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(LogRankResult { chi2, p, df: 1 })
}

/// Harrell's concordance index. A pair is admissible when one subject has an
/// observed event strictly before the other's time; equal times are never
/// admissible. Score ties count 0.5.
pub fn c_index(scores: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if scores.len() != records.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} records",
            scores.len(),
            records.len()
        )));
    }
    let mut concordant = 0.0;
    let mut admissible = 0usize;
    for i in 0..records.len() {
        if !records[i].event {
            continue;
        }
        for j in 0..records.len() {
            if i == j || records[j].time <= records[i].time {
                continue;
            }
            admissible += 1;
            if scores[i] > scores[j] {
                concordant += 1.0;
            } else if scores[i] == scores[j] {
                concordant += 0.5;
            }
        }
    }
    if admissible == 0 {
        return Err(Error::InvalidInput(
            "no admissible pairs for concordance".into(),
        ));
    }
    Ok(concordant / admissible as f64)
}

/// Full risk evaluation for one gene signature on one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalEval {
    pub model: String,
    pub n_samples: usize,
    pub n_genes_used: usize,
    pub c_index: f64,
    pub log_rank: LogRankResult,
    pub km_high: KmCurve,
    pub km_low: KmCurve,
}

/// Survival records for every sample of the matrix that carries them, with
/// their row indices.
pub fn records_from_matrix(bulk: &ExpressionMatrix) -> (Vec<usize>, Vec<SurvivalRecord>) {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (i, s) in bulk.samples().iter().enumerate() {
        if let (Some(t), Some(e)) = (s.survival_time, s.survival_event) {
            match SurvivalRecord::new(t, e) {
                Ok(r) => {
                    rows.push(i);
                    records.push(r);
                }
                Err(_) => log::warn!(
                    "sample {}: non-positive survival time {t}, skipped",
                    s.sample_id
                ),
            }
        }
    }
    (rows, records)
}

/// Per-signature survival validation: subset the bulk matrix to the
/// signature's genes (deduplicated; missing genes dropped with a warning),
/// fit Cox, stratify at the median risk, and report KM curves, the log-rank
/// test, and the concordance index.
pub fn survival_pipeline(
    signatures: &[(String, Vec<GeneId>)],
    bulk: &ExpressionMatrix,
) -> Result<Vec<SurvivalEval>> {
    let (rows, records) = records_from_matrix(bulk);
    if records.is_empty() {
        return Err(Error::InvalidInput(
            "no samples with survival annotations".into(),
        ));
    }
    let cohort = bulk.subset_samples(&rows)?;

    let mut evals = Vec::with_capacity(signatures.len());
    for (name, genes) in signatures {
        let unique: Vec<GeneId> = genes
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let present: Vec<GeneId> = unique
            .iter()
            .filter(|g| cohort.gene_position(g).is_some())
            .cloned()
            .collect();
        let missing = unique.len() - present.len();
        if missing > 0 {
            log::warn!("{name}: {missing} signature gene(s) absent from the matrix, dropped");
        }
        if present.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{name}: no signature genes present in the matrix"
            )));
        }
        let sub = cohort.subset_genes(&present)?;
        let model = fit_cox(sub.values(), &records)?;
        let scores = model.risk_scores(sub.values())?;
        let groups = median_split(scores.as_slice().expect("contiguous"))?;

        let split = |want: RiskGroup| -> Vec<SurvivalRecord> {
            records
                .iter()
                .zip(&groups)
                .filter(|(_, g)| **g == want)
                .map(|(r, _)| *r)
                .collect()
        };
        let high = split(RiskGroup::High);
        let low = split(RiskGroup::Low);
        let log_rank = log_rank_test(&high, &low)?;
        let km_high = km_curve(&high)?;
        let km_low = km_curve(&low)?;
        let ci = c_index(scores.as_slice().expect("contiguous"), &records)?;
        evals.push(SurvivalEval {
            model: name.clone(),
            n_samples: records.len(),
            n_genes_used: present.len(),
            c_index: ci,
            log_rank,
            km_high,
            km_low,
        });
    }
    Ok(evals)
}
