//! Downstream classification protocol: multinomial logistic regression,
//! stratified k-fold cross-validation with majority-vote ensembling,
//! macro-F1 scoring, and the dilution robustness benchmark.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{dilution_series_stream, DilutionSpec};
use crate::data::{ExpressionMatrix, SampleKind, StratifyField};
use crate::error::{Error, Result};

/// Anything that maps expression rows to embedding rows. Implementations
/// must be frozen (inference only) and expect the gene order they were
/// trained on.
pub trait Embed {
    fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// Softmax regression over a fixed category vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultinomialLr {
    /// d_features x n_categories.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub l2: f64,
    pub vocabulary: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
}

/// Mean cross-entropy + (l2/2)·‖W‖² (bias unregularized), with gradients.
fn lr_objective(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    w: &Array2<f64>,
    b: &Array1<f64>,
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let logits = x.dot(w) + b;
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss -= row[y[i]] - lse;
    }
    loss /= n;
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();

    let mut probs = logits;
    softmax_rows(&mut probs);
    for (i, &yi) in y.iter().enumerate() {
        probs[[i, yi]] -= 1.0;
    }
    let mut d_w = x.t().dot(&probs) / n;
    d_w.scaled_add(l2, w);
    let d_b = probs.sum_axis(Axis(0)) / n;
    (loss, d_w, d_b)
}

/// Fit from explicit initial parameters by full-batch gradient descent with
/// backtracking (Armijo) line search, to gradient norm < 1e-6 or 5000
/// iterations (warn and return the final iterate on cap).
pub fn fit_multinomial_lr_from(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    vocabulary: Vec<String>,
    l2: f64,
    w0: Array2<f64>,
    b0: Array1<f64>,
) -> Result<MultinomialLr> {
    let k = vocabulary.len();
    if x.nrows() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows but {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if l2 < 0.0 {
        return Err(Error::InvalidInput("l2 strength must be non-negative".into()));
    }
    if y.iter().any(|&yi| yi >= k) {
        return Err(Error::InvalidInput(format!(
            "label index out of vocabulary (size {k})"
        )));
    }
    let mut seen = vec![false; k];
    for &yi in y {
        seen[yi] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InvalidInput(
            "classification needs at least 2 categories with samples".into(),
        ));
    }
    if w0.dim() != (x.ncols(), k) || b0.len() != k {
        return Err(Error::ShapeMismatch("initial parameters have wrong shape".into()));
    }

    let mut w = w0;
    let mut b = b0;
    let (mut loss, mut d_w, mut d_b) = lr_objective(x, y, &w, &b, l2);
    let grad_norm = |d_w: &Array2<f64>, d_b: &Array1<f64>| {
        (d_w.iter().map(|v| v * v).sum::<f64>() + d_b.iter().map(|v| v * v).sum::<f64>()).sqrt()
    };
    let mut gnorm = grad_norm(&d_w, &d_b);
    let mut step = 1.0f64;
    let mut iterations = 0;
    let mut converged = gnorm < 1e-6;

    while !converged && iterations < 5000 {
        iterations += 1;
        let g2 = gnorm * gnorm;
        let mut t = (step * 2.0).min(1e6);
        let mut accepted = false;
        for _ in 0..60 {
            let w_new = &w - &(&d_w * t);
            let b_new = &b - &(&d_b * t);
            let (l_new, dw_new, db_new) = lr_objective(x, y, &w_new, &b_new, l2);
            if l_new.is_finite() && l_new <= loss - 1e-4 * t * g2 {
                w = w_new;
                b = b_new;
                loss = l_new;
                d_w = dw_new;
                d_b = db_new;
                accepted = true;
                step = t;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        gnorm = grad_norm(&d_w, &d_b);
        converged = gnorm < 1e-6;
    }
    if !converged {
        log::warn!(
            "multinomial regression stopped at iteration {iterations} with gradient norm {gnorm:e}"
        );
    }
    Ok(MultinomialLr {
        weights: w,
        bias: b,
        l2,
        vocabulary,
        converged,
        iterations,
    })
}

/// [`fit_multinomial_lr_from`] starting at zero parameters.
pub fn fit_multinomial_lr(
    x: ArrayView2<'_, f64>,
    y: &[usize],
    vocabulary: Vec<String>,
    l2: f64,
) -> Result<MultinomialLr> {
    let k = vocabulary.len();
    let d = x.ncols();
    fit_multinomial_lr_from(x, y, vocabulary, l2, Array2::zeros((d, k)), Array1::zeros(k))
}

impl MultinomialLr {
    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weights.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} features, got {}",
                self.weights.nrows(),
                x.ncols()
            )));
        }
        let mut logits = x.dot(&self.weights) + &self.bias;
        softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Argmax prediction; probability ties resolve to the lower category
    /// index (lexicographically first label).
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let probs = self.predict_proba(x)?;
        Ok(argmax_rows(&probs))
    }
}

fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Deterministic stratified fold assignment: per-category counts across
/// folds differ by at most one.
pub fn stratified_kfold(y: &[usize], n_categories: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidInput("need at least 2 folds".into()));
    }
    let mut by_cat: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &yi) in y.iter().enumerate() {
        if yi >= n_categories {
            return Err(Error::InvalidInput(format!(
                "label index {yi} out of vocabulary (size {n_categories})"
            )));
        }
        by_cat.entry(yi).or_default().push(i);
    }
    for (cat, members) in &by_cat {
        if members.len() < k {
            return Err(Error::InvalidInput(format!(
                "category {cat} has {} sample(s); need at least {k} for {k}-fold splits",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0usize; y.len()];
    for members in by_cat.values() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            folds[i] = pos % k;
        }
    }
    Ok(folds)
}

/// Majority vote over per-model predictions, with ties broken by highest
/// mean predicted probability, then by lowest category index.
pub fn majority_vote(votes: &[Vec<usize>], mean_probs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let n = mean_probs.nrows();
    let k = mean_probs.ncols();
    if votes.is_empty() {
        return Err(Error::InvalidInput("no vote lists".into()));
    }
    for v in votes {
        if v.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "vote list has {} entries, probabilities have {n} rows",
                v.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut counts = vec![0usize; k];
        for v in votes {
            let label = v[i];
            if label >= k {
                return Err(Error::InvalidInput(format!(
                    "vote {label} out of vocabulary (size {k})"
                )));
            }
            counts[label] += 1;
        }
        let top = *counts.iter().max().expect("k >= 1");
        let mut winner = None;
        for j in 0..k {
            if counts[j] != top {
                continue;
            }
            winner = match winner {
                None => Some(j),
                Some(w) if mean_probs[[i, j]] > mean_probs[[i, w]] => Some(j),
                other => other,
            };
        }
        out.push(winner.expect("some category has the top count"));
    }
    Ok(out)
}

/// Per-category F1. `None` marks categories absent from both truth and
/// prediction (excluded from the macro average); a category that is never
/// predicted but does occur scores 0.
pub fn per_category_f1(
    y_true: &[usize],
    y_pred: &[usize],
    n_categories: usize,
) -> Result<Vec<Option<f64>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&l| l >= n_categories) {
        return Err(Error::InvalidInput(format!(
            "label index {bad} out of vocabulary (size {n_categories})"
        )));
    }
    let mut tp = vec![0usize; n_categories];
    let mut fp = vec![0usize; n_categories];
    let mut fn_ = vec![0usize; n_categories];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    Ok((0..n_categories)
        .map(|c| {
            if tp[c] + fp[c] + fn_[c] == 0 {
                return None;
            }
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            Some(2.0 * tp[c] as f64 / denom as f64)
        })
        .collect())
}

/// Unweighted mean of per-category F1 over categories present in truth or
/// prediction.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], n_categories: usize) -> Result<f64> {
    let per = per_category_f1(y_true, y_pred, n_categories)?;
    let present: Vec<f64> = per.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::InvalidInput("no categories present to score".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Cross-validated ensemble: one regression per fold, each trained on the
/// other folds with its l2 strength chosen on an internal validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEnsemble {
    pub models: Vec<MultinomialLr>,
    pub fold_of: Vec<usize>,
    pub vocabulary: Vec<String>,
    pub chosen_l2: Vec<f64>,
    pub seed: u64,
}

/// Knobs for ensemble fitting and the dilution benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_folds: usize,
    pub l2_grid: Vec<f64>,
    /// Share of each fold's training data kept for fitting during l2
    /// selection; the rest is the internal validation portion.
    pub inner_train_fraction: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_folds: 5,
            l2_grid: vec![1e-4, 1e-3, 1e-2],
            inner_train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Build the sorted label vocabulary and index labels against it.
pub fn index_labels(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut vocab: Vec<String> = labels.to_vec();
    vocab.sort();
    vocab.dedup();
    let idx = labels
        .iter()
        .map(|l| vocab.binary_search(l).expect("built from these labels"))
        .collect();
    (vocab, idx)
}

impl CvEnsemble {
    /// Stratified k-fold fit. Per fold: hold out the fold, split the rest
    /// into an inner train/validation pair, pick the l2 with the best
    /// validation macro-F1 (first maximizer in grid order), then refit on
    /// the full fold-training set.
    pub fn fit(
        x: ArrayView2<'_, f64>,
        labels: &[String],
        cfg: &EvalConfig,
    ) -> Result<CvEnsemble> {
        if x.nrows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows but {} labels",
                x.nrows(),
                labels.len()
            )));
        }
        if cfg.l2_grid.is_empty() {
            return Err(Error::InvalidInput("empty l2 grid".into()));
        }
        if !(cfg.inner_train_fraction > 0.0 && cfg.inner_train_fraction < 1.0) {
            return Err(Error::InvalidInput(
                "inner train fraction must lie in (0,1)".into(),
            ));
        }
        let (vocabulary, y) = index_labels(labels);
        if vocabulary.len() < 2 {
            return Err(Error::InvalidInput(
                "classification needs at least 2 categories".into(),
            ));
        }
        let fold_of = stratified_kfold(&y, vocabulary.len(), cfg.k_folds, cfg.seed)?;

        let mut models = Vec::with_capacity(cfg.k_folds);
        let mut chosen_l2 = Vec::with_capacity(cfg.k_folds);
        for fold in 0..cfg.k_folds {
            let train_idx: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] != fold).collect();
            let rows = |idx: &[usize]| -> Array2<f64> {
                let mut m = Array2::zeros((idx.len(), x.ncols()));
                for (r, &i) in idx.iter().enumerate() {
                    m.row_mut(r).assign(&x.row(i));
                }
                m
            };
            let labels_of = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| y[i]).collect() };

            // inner split for l2 selection, stratified and seeded per fold
            let inner_folds = stratified_inner_split(
                &labels_of(&train_idx),
                vocabulary.len(),
                cfg.inner_train_fraction,
                cfg.seed.wrapping_add(1 + fold as u64),
            )?;
            let inner_train: Vec<usize> = train_idx
                .iter()
                .zip(&inner_folds)
                .filter(|(_, &is_train)| is_train)
                .map(|(&i, _)| i)
                .collect();
            let inner_val: Vec<usize> = train_idx
                .iter()
                .zip(&inner_folds)
                .filter(|(_, &is_train)| !is_train)
                .map(|(&i, _)| i)
                .collect();

            let mut best: Option<(f64, f64)> = None; // (f1, l2)
            for &l2 in &cfg.l2_grid {
                let m = fit_multinomial_lr(
                    rows(&inner_train).view(),
                    &labels_of(&inner_train),
                    vocabulary.clone(),
                    l2,
                )?;
                let pred = m.predict(rows(&inner_val).view())?;
                let f1 = macro_f1(&labels_of(&inner_val), &pred, vocabulary.len())?;
                if best.map_or(true, |(bf, _)| f1 > bf) {
                    best = Some((f1, l2));
                }
            }
            let (_, l2) = best.expect("grid non-empty");
            let model = fit_multinomial_lr(
                rows(&train_idx).view(),
                &labels_of(&train_idx),
                vocabulary.clone(),
                l2,
            )?;
            chosen_l2.push(l2);
            models.push(model);
        }
        Ok(CvEnsemble {
            models,
            fold_of,
            vocabulary,
            chosen_l2,
            seed: cfg.seed,
        })
    }

    /// Per-model argmax votes, their mean probabilities, and the
    /// majority-vote outcome.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<EnsemblePrediction> {
        let mut votes = Vec::with_capacity(self.models.len());
        let mut mean = Array2::zeros((x.nrows(), self.vocabulary.len()));
        for m in &self.models {
            let probs = m.predict_proba(x)?;
            votes.push(argmax_rows(&probs));
            mean += &probs;
        }
        mean /= self.models.len() as f64;
        let labels = majority_vote(&votes, mean.view())?;
        Ok(EnsemblePrediction {
            labels,
            votes,
            mean_probs: mean,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub labels: Vec<usize>,
    pub votes: Vec<Vec<usize>>,
    pub mean_probs: Array2<f64>,
}

/// Boolean per-sample flags: true = inner-train, false = validation.
/// Stratified: every category contributes to both sides.
fn stratified_inner_split(
    y: &[usize],
    n_categories: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<Vec<bool>> {
    let mut by_cat: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &yi) in y.iter().enumerate() {
        by_cat.entry(yi).or_default().push(i);
    }
    let _ = n_categories;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_train = vec![false; y.len()];
    for members in by_cat.values() {
        if members.len() < 2 {
            return Err(Error::InvalidInput(
                "internal validation needs at least 2 samples per category".into(),
            ));
        }
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let n_train = ((train_fraction * members.len() as f64).round() as usize)
            .clamp(1, members.len() - 1);
        for (pos, &i) in members.iter().enumerate() {
            is_train[i] = pos < n_train;
        }
    }
    Ok(is_train)
}

/// Dilution benchmark output: ensemble macro-F1 per rate, per-fold scores
/// for error bars, per-category detail, and each test sample's predicted
/// label trajectory across rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilutionReport {
    pub rates: Vec<f64>,
    pub vocabulary: Vec<String>,
    pub macro_f1: Vec<f64>,
    /// [rate][fold]
    pub fold_f1: Vec<Vec<f64>>,
    /// [rate][category], `None` when the category was absent from truth and
    /// prediction at that rate.
    pub category_f1: Vec<Vec<Option<f64>>>,
    pub sample_ids: Vec<String>,
    pub true_labels: Vec<String>,
    /// [sample][rate], predicted label strings.
    pub trajectories: Vec<Vec<String>>,
}

/// The reference category that pure adjacent-normal tissue carries for each
/// label field.
pub fn reference_label(field: StratifyField) -> &'static str {
    match field {
        StratifyField::Subtype => "PN",
        StratifyField::Grade => "0",
        StratifyField::Kind => "normal",
    }
}

fn labels_for(m: &ExpressionMatrix, field: StratifyField) -> Result<Vec<String>> {
    m.samples()
        .iter()
        .map(|s| {
            let l = field.label_of(s);
            if l.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "sample {} lacks a label for the classification task",
                    s.sample_id
                )));
            }
            Ok(l)
        })
        .collect()
}

/// Run the full dilution protocol for one frozen embedding model.
///
/// The fold ensemble is trained once on undiluted training embeddings. For
/// each dilution rate, tumor test samples are mixed toward fresh synthetic
/// normals (one RNG stream per sample, so results are order-independent)
/// while adjacent-normal test samples pass through unchanged; everything is
/// embedded and scored against the original labels.
pub fn dilution_eval(
    embedder: &dyn Embed,
    train: &ExpressionMatrix,
    test: &ExpressionMatrix,
    normal_pool: ArrayView2<'_, f64>,
    spec: &DilutionSpec,
    field: StratifyField,
    cfg: &EvalConfig,
) -> Result<DilutionReport> {
    spec.validate()?;
    let train_labels = labels_for(train, field)?;
    let test_labels = labels_for(test, field)?;
    let reference = reference_label(field);
    if !test_labels.iter().any(|l| l == reference) {
        return Err(Error::InvalidInput(format!(
            "test cohort has no \"{reference}\" reference samples"
        )));
    }

    let train_emb = embedder.embed(train.values())?;
    let ensemble = CvEnsemble::fit(train_emb.view(), &train_labels, cfg)?;
    let vocab = ensemble.vocabulary.clone();
    let y_true: Vec<usize> = test_labels
        .iter()
        .map(|l| {
            vocab.binary_search(l).map_err(|_| {
                Error::InvalidInput(format!(
                    "test label {l:?} missing from the training vocabulary"
                ))
            })
        })
        .collect::<Result<_>>()?;

    // dilute every tumor test sample across all rates up front
    let n_test = test.n_samples();
    let mut diluted: Vec<Option<Vec<(f64, Array1<f64>)>>> = Vec::with_capacity(n_test);
    for (i, s) in test.samples().iter().enumerate() {
        if s.kind == SampleKind::Tumor {
            let series =
                dilution_series_stream(test.row(i), normal_pool, spec, i as u64)?;
            diluted.push(Some(series));
        } else {
            diluted.push(None);
        }
    }

    let mut macro_scores = Vec::with_capacity(spec.rates.len());
    let mut fold_scores = Vec::with_capacity(spec.rates.len());
    let mut category_scores = Vec::with_capacity(spec.rates.len());
    let mut trajectories = vec![Vec::with_capacity(spec.rates.len()); n_test];
    for (r_idx, &rate) in spec.rates.iter().enumerate() {
        let mut values = Array2::zeros((n_test, test.n_genes()));
        for i in 0..n_test {
            match &diluted[i] {
                Some(series) => values.row_mut(i).assign(&series[r_idx].1),
                None => values.row_mut(i).assign(&test.row(i)),
            }
        }
        let emb = embedder.embed(values.view())?;
        let pred = ensemble.predict(emb.view())?;

        macro_scores.push(macro_f1(&y_true, &pred.labels, vocab.len())?);
        let per_fold: Vec<f64> = pred
            .votes
            .iter()
            .map(|v| macro_f1(&y_true, v, vocab.len()))
            .collect::<Result<_>>()?;
        fold_scores.push(per_fold);
        category_scores.push(per_category_f1(&y_true, &pred.labels, vocab.len())?);
        for (i, &label) in pred.labels.iter().enumerate() {
            trajectories[i].push(vocab[label].clone());
        }
        let _ = rate;
    }

    Ok(DilutionReport {
        rates: spec.rates.clone(),
        vocabulary: vocab,
        macro_f1: macro_scores,
        fold_f1: fold_scores,
        category_f1: category_scores,
        sample_ids: test
            .samples()
            .iter()
            .map(|s| s.sample_id.clone())
            .collect(),
        true_labels: test_labels,
        trajectories,
    })
}
