//! Per-subcommand configs and executors. Config structs deserialize from
//! TOML (partial tables fall back to the defaults shown here) and are echoed
//! in full into each run's manifest. CSV files are the normative outputs;
//! the survival SVG is decorative and off by default.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_manifest, CommandIo};
use crate::augment::DilutionSpec;
use crate::classify::{
    dilution_eval, fit_multinomial_lr, index_labels, macro_f1, per_category_f1, CvEnsemble,
    EvalConfig,
};
use crate::data::{split_cohort, ExpressionMatrix, GeneId, StratifyField, TableFormat};
use crate::error::{Error, Result};
use crate::interpret::{
    dim_gene_correlation, export_rnk, signature_genes, signature_union,
    uniqueness_permutation_test, Signature,
};
use crate::model::{
    full_chain_gradcheck, load_checkpoint, pca_fit, save_checkpoint, train_autoencoder,
    train_bt_noise, train_twin, AeVariant, GradcheckSpec, TrainConfig, TrainedModel,
    DEFAULT_EMBED_DIM,
};
use crate::survival::{survival_pipeline, SurvivalEval};
use crate::synth::{generate_cohort, SynthConfig};

/// Where a cohort comes from and how to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub expression: PathBuf,
    pub metadata: PathBuf,
    pub format: TableFormat,
    /// Apply log2(v+1) after loading. Synthetic cohorts arrive already
    /// transformed; raw counts need this exactly once.
    pub log2: bool,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource {
            expression: "expression.tsv".into(),
            metadata: "metadata.tsv".into(),
            format: TableFormat::Tsv,
            log2: false,
        }
    }
}

impl DataSource {
    pub fn load(&self) -> Result<ExpressionMatrix> {
        let m = ExpressionMatrix::load(&self.expression, self.format, &self.metadata)?;
        if self.log2 {
            m.log2_transform()
        } else {
            Ok(m)
        }
    }
}

/// Which embedding family `train` fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Twin,
    BtNoise,
    Ae,
    Vae,
    Pca,
}

fn field_name(field: StratifyField) -> &'static str {
    match field {
        StratifyField::Kind => "kind",
        StratifyField::Subtype => "subtype",
        StratifyField::Grade => "grade",
    }
}

/// Labels for one metadata field, with absence an error: classification
/// commands must not silently train on empty categories.
fn field_labels(m: &ExpressionMatrix, field: StratifyField) -> Result<Vec<String>> {
    m.samples()
        .iter()
        .map(|s| {
            let label = field.label_of(s);
            if label.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "sample {} lacks a {} label",
                    s.sample_id,
                    field_name(field)
                )));
            }
            Ok(label)
        })
        .collect()
}

fn csv_push(buf: &mut String, fields: &[String]) {
    for (i, field) in fields.iter().enumerate() {
        if i > 0 {
            buf.push(',');
        }
        if field.contains([',', '"', '\n', '\r']) {
            buf.push('"');
            buf.push_str(&field.replace('"', "\"\""));
            buf.push('"');
        } else {
            buf.push_str(field);
        }
    }
    buf.push('\n');
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCmd {
    pub cohort: SynthConfig,
    pub format: TableFormat,
}

pub(crate) fn synth(cfg: &SynthCmd, io: &CommandIo<'_>) -> Result<()> {
    let (matrix, _truth) = generate_cohort(&cfg.cohort)?;
    let ext = match cfg.format {
        TableFormat::Tsv => "tsv",
        TableFormat::Csv => "csv",
    };
    matrix.save(io.out.join(format!("expression.{ext}")), cfg.format)?;
    matrix.save_metadata(io.out.join(format!("metadata.{ext}")), cfg.format)?;
    write_manifest(io, "synth", cfg.cohort.seed, cfg)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmd {
    pub data: DataSource,
    pub model: ModelKind,
    pub train: TrainConfig,
    /// bt-noise only: one shared noise standard deviation. Omitted = half
    /// of each gene's training standard deviation.
    pub noise_sd: Option<f64>,
    /// pca only: number of components.
    pub pca_dim: usize,
}

impl Default for TrainCmd {
    fn default() -> Self {
        TrainCmd {
            data: DataSource::default(),
            model: ModelKind::Twin,
            train: TrainConfig::default(),
            noise_sd: None,
            pca_dim: DEFAULT_EMBED_DIM,
        }
    }
}

pub(crate) fn train(cfg: &TrainCmd, io: &CommandIo<'_>) -> Result<()> {
    if cfg.noise_sd.is_some() && cfg.model != ModelKind::BtNoise {
        return Err(Error::InvalidInput(
            "noise_sd only applies to the bt-noise model".into(),
        ));
    }
    let m = cfg.data.load()?;
    let (model, trace) = match cfg.model {
        ModelKind::Twin => {
            let pool = m.normal_pool();
            train_twin(&m, pool.view(), &cfg.train)?
        }
        ModelKind::BtNoise => train_bt_noise(&m, &cfg.train, cfg.noise_sd)?,
        ModelKind::Ae => train_autoencoder(&m, &cfg.train, AeVariant::Ae)?,
        ModelKind::Vae => train_autoencoder(&m, &cfg.train, AeVariant::Vae)?,
        ModelKind::Pca => (pca_fit(&m, cfg.pca_dim)?, Vec::new()),
    };
    save_checkpoint(&model, &io.out.join("model.json"))?;
    let mut buf = String::from("epoch,loss\n");
    for (epoch, loss) in trace.iter().enumerate() {
        csv_push(&mut buf, &[(epoch + 1).to_string(), loss.to_string()]);
    }
    write_text(&io.out.join("trace.csv"), &buf)?;
    write_manifest(io, "train", cfg.train.seed, cfg)
}

// ---------------------------------------------------------------- tune

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneCmd {
    pub data: DataSource,
    pub n_trials: usize,
    /// Seeds the hyperparameter draws (one RNG stream per trial) and the
    /// internal train/validation split.
    pub seed: u64,
    pub alpha_range: [f64; 2],
    pub lambda_range: [f64; 2],
    /// Base training config; each trial overrides mixing fraction and
    /// decorrelation weight.
    pub train: TrainConfig,
    /// Share of the cohort held out as the internal validation split.
    pub val_fraction: f64,
    /// l2 strength of the trial-scoring classifier.
    pub l2: f64,
}

impl Default for TuneCmd {
    fn default() -> Self {
        TuneCmd {
            data: DataSource::default(),
            n_trials: 16,
            seed: 0,
            alpha_range: [0.05, 0.95],
            lambda_range: [10.0, 100.0],
            train: TrainConfig::default(),
            val_fraction: 0.2,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct Trial {
    trial: usize,
    alpha: f64,
    lambda: f64,
    macro_f1: f64,
}

#[derive(Serialize)]
struct BestTrial<'a> {
    trial: usize,
    alpha: f64,
    lambda: f64,
    macro_f1: f64,
    /// The base config with the winning values substituted, ready to train.
    train: &'a TrainConfig,
}

pub(crate) fn tune(cfg: &TuneCmd, io: &CommandIo<'_>) -> Result<()> {
    if cfg.n_trials == 0 {
        return Err(Error::InvalidInput("n_trials must be at least 1".into()));
    }
    let [a_lo, a_hi] = cfg.alpha_range;
    if !(a_lo > 0.0 && a_lo <= a_hi && a_hi <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha range [{a_lo}, {a_hi}] must satisfy 0 < low <= high <= 1"
        )));
    }
    let [l_lo, l_hi] = cfg.lambda_range;
    if !(l_lo > 0.0 && l_lo <= l_hi && l_hi.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "lambda range [{l_lo}, {l_hi}] must satisfy 0 < low <= high"
        )));
    }
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        return Err(Error::InvalidInput(
            "val_fraction must lie in (0,1)".into(),
        ));
    }

    let m = cfg.data.load()?;
    let split = split_cohort(&m, 1.0 - cfg.val_fraction, Some(StratifyField::Subtype), cfg.seed)?;
    let train_m = m.subset_samples(&split.train_indices)?;
    let val_m = m.subset_samples(&split.test_indices)?;
    let pool = train_m.normal_pool();
    let train_labels = field_labels(&train_m, StratifyField::Subtype)?;
    let val_labels = field_labels(&val_m, StratifyField::Subtype)?;
    let (vocab, y_train) = index_labels(&train_labels);
    let y_val: Vec<usize> = val_labels
        .iter()
        .map(|l| {
            vocab.binary_search(l).map_err(|_| {
                Error::InvalidInput(format!(
                    "validation label {l:?} missing from the training split"
                ))
            })
        })
        .collect::<Result<_>>()?;

    let trials: Vec<Trial> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| -> Result<Trial> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            let alpha = a_lo + rng.random::<f64>() * (a_hi - a_lo);
            let lambda = l_lo + rng.random::<f64>() * (l_hi - l_lo);
            let mut tc = cfg.train.clone();
            tc.mixture.alpha = alpha;
            tc.loss.lambda = lambda;
            let (model, _) = train_twin(&train_m, pool.view(), &tc)?;
            let emb_train = model.encode(&train_m)?;
            let emb_val = model.encode(&val_m)?;
            let lr = fit_multinomial_lr(emb_train.view(), &y_train, vocab.clone(), cfg.l2)?;
            let pred = lr.predict(emb_val.view())?;
            let macro_f1 = macro_f1(&y_val, &pred, vocab.len())?;
            Ok(Trial {
                trial: t,
                alpha,
                lambda,
                macro_f1,
            })
        })
        .collect::<Result<_>>()?;

    let mut buf = String::from("trial,alpha,lambda,macro_f1\n");
    for t in &trials {
        csv_push(
            &mut buf,
            &[
                t.trial.to_string(),
                t.alpha.to_string(),
                t.lambda.to_string(),
                t.macro_f1.to_string(),
            ],
        );
    }
    write_text(&io.out.join("trials.csv"), &buf)?;

    // ties keep the earliest trial
    let best = trials
        .iter()
        .max_by(|a, b| {
            a.macro_f1
                .partial_cmp(&b.macro_f1)
                .expect("macro-F1 is finite")
                .then(b.trial.cmp(&a.trial))
        })
        .expect("n_trials >= 1");
    let mut best_train = cfg.train.clone();
    best_train.mixture.alpha = best.alpha;
    best_train.loss.lambda = best.lambda;
    let best_out = BestTrial {
        trial: best.trial,
        alpha: best.alpha,
        lambda: best.lambda,
        macro_f1: best.macro_f1,
        train: &best_train,
    };
    let path = io.out.join("best.json");
    let mut text = serde_json::to_string_pretty(&best_out)
        .map_err(|e| Error::Parse(format!("best trial: {e}")))?;
    text.push('\n');
    write_text(&path, &text)?;
    write_manifest(io, "tune", cfg.seed, cfg)
}

// ---------------------------------------------------------------- embed

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedCmd {
    pub data: DataSource,
    pub checkpoint: PathBuf,
}

impl Default for EmbedCmd {
    fn default() -> Self {
        EmbedCmd {
            data: DataSource::default(),
            checkpoint: "model.json".into(),
        }
    }
}

pub(crate) fn embed(cfg: &EmbedCmd, io: &CommandIo<'_>) -> Result<()> {
    let m = cfg.data.load()?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let emb = model.encode(&m)?;
    let mut buf = String::from("sample_id");
    for k in 0..emb.ncols() {
        buf.push_str(&format!(",e{k}"));
    }
    buf.push('\n');
    for (i, s) in m.samples().iter().enumerate() {
        let mut fields = vec![s.sample_id.clone()];
        fields.extend(emb.row(i).iter().map(|v| v.to_string()));
        csv_push(&mut buf, &fields);
    }
    write_text(&io.out.join("embedding.csv"), &buf)?;
    write_manifest(io, "embed", 0, cfg)
}

// ---------------------------------------------------------------- classify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyCmd {
    pub data: DataSource,
    pub checkpoint: PathBuf,
    pub field: StratifyField,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub eval: EvalConfig,
}

impl Default for ClassifyCmd {
    fn default() -> Self {
        ClassifyCmd {
            data: DataSource::default(),
            checkpoint: "model.json".into(),
            field: StratifyField::Subtype,
            train_fraction: 0.7,
            split_seed: 0,
            eval: EvalConfig::default(),
        }
    }
}

pub(crate) fn classify(cfg: &ClassifyCmd, io: &CommandIo<'_>) -> Result<()> {
    let m = cfg.data.load()?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let split = split_cohort(&m, cfg.train_fraction, Some(cfg.field), cfg.split_seed)?;
    let train_m = m.subset_samples(&split.train_indices)?;
    let test_m = m.subset_samples(&split.test_indices)?;
    let train_labels = field_labels(&train_m, cfg.field)?;
    let test_labels = field_labels(&test_m, cfg.field)?;

    let ensemble = CvEnsemble::fit(model.encode(&train_m)?.view(), &train_labels, &cfg.eval)?;
    let pred = ensemble.predict(model.encode(&test_m)?.view())?;

    let mut buf = String::from("sample_id,truth,predicted\n");
    for (i, s) in test_m.samples().iter().enumerate() {
        csv_push(
            &mut buf,
            &[
                s.sample_id.clone(),
                test_labels[i].clone(),
                ensemble.vocabulary[pred.labels[i]].clone(),
            ],
        );
    }
    write_text(&io.out.join("predictions.csv"), &buf)?;

    // test-only categories are reported above but cannot be scored
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    for (i, label) in test_labels.iter().enumerate() {
        if let Ok(k) = ensemble.vocabulary.binary_search(label) {
            y_true.push(k);
            y_pred.push(pred.labels[i]);
        }
    }
    if y_true.is_empty() {
        return Err(Error::InvalidInput(
            "no test sample carries a label seen in training".into(),
        ));
    }
    let k = ensemble.vocabulary.len();
    let overall = macro_f1(&y_true, &y_pred, k)?;
    let per_category = per_category_f1(&y_true, &y_pred, k)?;
    let mut buf = String::from("metric,category,value\n");
    csv_push(
        &mut buf,
        &["macro_f1".into(), String::new(), overall.to_string()],
    );
    for (c, f1) in per_category.iter().enumerate() {
        csv_push(
            &mut buf,
            &[
                "category_f1".into(),
                ensemble.vocabulary[c].clone(),
                f1.map(|v| v.to_string()).unwrap_or_default(),
            ],
        );
    }
    write_text(&io.out.join("metrics.csv"), &buf)?;
    write_manifest(io, "classify", cfg.eval.seed, cfg)
}

// ---------------------------------------------------------------- dilute

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedCheckpoint {
    pub name: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiluteCmd {
    pub data: DataSource,
    pub models: Vec<NamedCheckpoint>,
    pub field: StratifyField,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Strictly increasing normal-share grid in [0,1].
    pub rates: Vec<f64>,
    pub dilution_seed: u64,
    pub eval: EvalConfig,
}

impl Default for DiluteCmd {
    fn default() -> Self {
        DiluteCmd {
            data: DataSource::default(),
            models: vec![NamedCheckpoint {
                name: "twin".into(),
                checkpoint: "model.json".into(),
            }],
            field: StratifyField::Subtype,
            train_fraction: 0.7,
            split_seed: 0,
            rates: (0..=10).map(|i| i as f64 / 10.0).collect(),
            dilution_seed: 0,
            eval: EvalConfig::default(),
        }
    }
}

pub(crate) fn dilute(cfg: &DiluteCmd, io: &CommandIo<'_>) -> Result<()> {
    if cfg.models.is_empty() {
        return Err(Error::InvalidInput("dilute needs at least one model".into()));
    }
    for pair in cfg.models.iter().enumerate() {
        if pair.1.name.is_empty() {
            return Err(Error::InvalidInput(format!(
                "model {} has an empty name",
                pair.0
            )));
        }
    }
    let mut names: Vec<&str> = cfg.models.iter().map(|m| m.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("model names must be unique".into()));
    }

    let m = cfg.data.load()?;
    let split = split_cohort(&m, cfg.train_fraction, Some(cfg.field), cfg.split_seed)?;
    let train_m = m.subset_samples(&split.train_indices)?;
    let test_m = m.subset_samples(&split.test_indices)?;
    let pool = train_m.normal_pool();
    let spec = DilutionSpec {
        rates: cfg.rates.clone(),
        seed: cfg.dilution_seed,
    };

    let mut d_buf = String::from("model,rate,macro_f1\n");
    let mut f_buf = String::from("model,rate,fold,macro_f1\n");
    let mut c_buf = String::from("model,rate,category,f1\n");
    let mut t_buf = String::from("model,sample_id,true_label,rate,predicted\n");
    for named in &cfg.models {
        let model: TrainedModel = load_checkpoint(&named.checkpoint)?;
        let report = dilution_eval(
            &model,
            &train_m,
            &test_m,
            pool.view(),
            &spec,
            cfg.field,
            &cfg.eval,
        )?;
        for (ri, &rate) in report.rates.iter().enumerate() {
            csv_push(
                &mut d_buf,
                &[
                    named.name.clone(),
                    rate.to_string(),
                    report.macro_f1[ri].to_string(),
                ],
            );
            for (fold, f1) in report.fold_f1[ri].iter().enumerate() {
                csv_push(
                    &mut f_buf,
                    &[
                        named.name.clone(),
                        rate.to_string(),
                        fold.to_string(),
                        f1.to_string(),
                    ],
                );
            }
            for (c, f1) in report.category_f1[ri].iter().enumerate() {
                csv_push(
                    &mut c_buf,
                    &[
                        named.name.clone(),
                        rate.to_string(),
                        report.vocabulary[c].clone(),
                        f1.map(|v| v.to_string()).unwrap_or_default(),
                    ],
                );
            }
        }
        for (si, id) in report.sample_ids.iter().enumerate() {
            for (ri, &rate) in report.rates.iter().enumerate() {
                csv_push(
                    &mut t_buf,
                    &[
                        named.name.clone(),
                        id.clone(),
                        report.true_labels[si].clone(),
                        rate.to_string(),
                        report.trajectories[si][ri].clone(),
                    ],
                );
            }
        }
    }
    write_text(&io.out.join("dilution.csv"), &d_buf)?;
    write_text(&io.out.join("fold_f1.csv"), &f_buf)?;
    write_text(&io.out.join("category_f1.csv"), &c_buf)?;
    write_text(&io.out.join("trajectories.csv"), &t_buf)?;
    write_manifest(io, "dilute", cfg.dilution_seed, cfg)
}

// ---------------------------------------------------------------- rank

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankCmd {
    pub data: DataSource,
    pub checkpoint: PathBuf,
    pub n_top: usize,
    pub n_bottom: usize,
}

impl Default for RankCmd {
    fn default() -> Self {
        RankCmd {
            data: DataSource::default(),
            checkpoint: "model.json".into(),
            n_top: 20,
            n_bottom: 20,
        }
    }
}

pub(crate) fn rank(cfg: &RankCmd, io: &CommandIo<'_>) -> Result<()> {
    let m = cfg.data.load()?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let emb = model.encode(&m)?;
    let lists = dim_gene_correlation(emb.view(), &m)?;
    if let Some(first) = lists.first() {
        if !first.constant_genes.is_empty() {
            log::warn!(
                "{} constant gene(s) have correlation pinned to 0",
                first.constant_genes.len()
            );
        }
    }
    let mut signatures = Vec::with_capacity(lists.len());
    for list in &lists {
        if list.constant_dimension {
            log::warn!(
                "dimension {} is constant; its ranking is purely lexicographic",
                list.dimension
            );
        }
        export_rnk(list, &io.out.join(format!("dim{}.rnk", list.dimension)))?;
        signatures.push(signature_genes(list, cfg.n_top, cfg.n_bottom)?);
    }

    let mut buf = String::from("dimension,side,rank,gene\n");
    for sig in &signatures {
        for (side, genes) in [("top", &sig.top), ("bottom", &sig.bottom)] {
            for (rank, gene) in genes.iter().enumerate() {
                csv_push(
                    &mut buf,
                    &[
                        sig.dimension.to_string(),
                        side.to_string(),
                        rank.to_string(),
                        gene.as_str().to_string(),
                    ],
                );
            }
        }
    }
    write_text(&io.out.join("signatures.csv"), &buf)?;

    let mut buf = String::from("gene\n");
    for gene in signature_union(&signatures) {
        csv_push(&mut buf, &[gene.as_str().to_string()]);
    }
    write_text(&io.out.join("union.csv"), &buf)?;
    write_manifest(io, "rank", 0, cfg)
}

// ---------------------------------------------------------------- uniqueness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniquenessCmd {
    pub data: DataSource,
    pub checkpoint: PathBuf,
    /// Extreme-set half-width: each dimension's set holds the top_n highest
    /// plus top_n lowest correlated genes.
    pub top_n: usize,
    pub n_permutations: usize,
    pub seed: u64,
}

impl Default for UniquenessCmd {
    fn default() -> Self {
        UniquenessCmd {
            data: DataSource::default(),
            checkpoint: "model.json".into(),
            top_n: 1000,
            n_permutations: 1000,
            seed: 0,
        }
    }
}

pub(crate) fn uniqueness(cfg: &UniquenessCmd, io: &CommandIo<'_>) -> Result<()> {
    let m = cfg.data.load()?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let emb = model.encode(&m)?;
    let lists = dim_gene_correlation(emb.view(), &m)?;
    let results = uniqueness_permutation_test(&lists, cfg.top_n, cfg.n_permutations, cfg.seed)?;
    let mut buf = String::from("dimension,uniqueness,p_value,n_permutations,top_n,seed\n");
    for r in &results {
        csv_push(
            &mut buf,
            &[
                r.dimension.to_string(),
                r.uniqueness.to_string(),
                r.p_value.to_string(),
                r.n_permutations.to_string(),
                r.top_n.to_string(),
                r.seed.to_string(),
            ],
        );
    }
    write_text(&io.out.join("uniqueness.csv"), &buf)?;
    write_manifest(io, "uniqueness", cfg.seed, cfg)
}

// ---------------------------------------------------------------- survival

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalCmd {
    pub data: DataSource,
    pub checkpoint: PathBuf,
    pub n_top: usize,
    pub n_bottom: usize,
    /// Also evaluate the union of all per-dimension signatures.
    pub include_union: bool,
    /// Decorative Kaplan-Meier SVG per signature; CSV stays normative.
    pub svg: bool,
}

impl Default for SurvivalCmd {
    fn default() -> Self {
        SurvivalCmd {
            data: DataSource::default(),
            checkpoint: "model.json".into(),
            n_top: 20,
            n_bottom: 20,
            include_union: true,
            svg: false,
        }
    }
}

pub(crate) fn survival(cfg: &SurvivalCmd, io: &CommandIo<'_>) -> Result<()> {
    let m = cfg.data.load()?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let emb = model.encode(&m)?;
    let lists = dim_gene_correlation(emb.view(), &m)?;
    let signatures: Vec<Signature> = lists
        .iter()
        .map(|l| signature_genes(l, cfg.n_top, cfg.n_bottom))
        .collect::<Result<_>>()?;
    let mut named: Vec<(String, Vec<GeneId>)> = signatures
        .iter()
        .map(|s| {
            let genes: Vec<GeneId> = s.top.iter().chain(&s.bottom).cloned().collect();
            (format!("dim{}", s.dimension), genes)
        })
        .collect();
    if cfg.include_union {
        named.push(("union".into(), signature_union(&signatures)));
    }

    let evals = survival_pipeline(&named, &m)?;
    let mut buf = String::from(
        "model,n_samples,n_genes_used,c_index,log_rank_chi2,log_rank_p\n",
    );
    for e in &evals {
        csv_push(
            &mut buf,
            &[
                e.model.clone(),
                e.n_samples.to_string(),
                e.n_genes_used.to_string(),
                e.c_index.to_string(),
                e.log_rank.chi2.to_string(),
                e.log_rank.p.to_string(),
            ],
        );
    }
    write_text(&io.out.join("survival.csv"), &buf)?;

    let mut buf = String::from("model,group,time,survival,at_risk,events\n");
    for e in &evals {
        for (group, curve) in [("high", &e.km_high), ("low", &e.km_low)] {
            for i in 0..curve.times.len() {
                csv_push(
                    &mut buf,
                    &[
                        e.model.clone(),
                        group.to_string(),
                        curve.times[i].to_string(),
                        curve.survival[i].to_string(),
                        curve.at_risk[i].to_string(),
                        curve.events[i].to_string(),
                    ],
                );
            }
        }
    }
    write_text(&io.out.join("km.csv"), &buf)?;

    if cfg.svg {
        for e in &evals {
            write_text(&io.out.join(format!("km_{}.svg", e.model)), &km_svg(e))?;
        }
    }
    write_manifest(io, "survival", 0, cfg)
}

/// Decorative step plot of the two risk groups' survival curves.
fn km_svg(eval: &SurvivalEval) -> String {
    let t_max = eval
        .km_high
        .times
        .iter()
        .chain(&eval.km_low.times)
        .fold(1.0f64, |m, &t| m.max(t));
    let x = |t: f64| 50.0 + 410.0 * t / t_max;
    let y = |s: f64| 20.0 + 250.0 * (1.0 - s);
    let path = |curve: &crate::survival::KmCurve| {
        let mut d = format!("M {} {}", x(0.0), y(1.0));
        let mut s_prev = 1.0;
        for (&t, &s) in curve.times.iter().zip(&curve.survival) {
            d.push_str(&format!(" H {}", x(t)));
            if s != s_prev {
                d.push_str(&format!(" V {}", y(s)));
                s_prev = s;
            }
        }
        d
    };
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 480 320\">\n",
            "<rect width=\"480\" height=\"320\" fill=\"white\"/>\n",
            "<line x1=\"50\" y1=\"270\" x2=\"460\" y2=\"270\" stroke=\"black\"/>\n",
            "<line x1=\"50\" y1=\"20\" x2=\"50\" y2=\"270\" stroke=\"black\"/>\n",
            "<text x=\"255\" y=\"300\" text-anchor=\"middle\" font-size=\"12\">time ",
            "(max {tmax})</text>\n",
            "<text x=\"20\" y=\"145\" text-anchor=\"middle\" font-size=\"12\" ",
            "transform=\"rotate(-90 20 145)\">survival</text>\n",
            "<text x=\"255\" y=\"14\" text-anchor=\"middle\" font-size=\"13\">{title}</text>\n",
            "<path d=\"{high}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n",
            "<path d=\"{low}\" fill=\"none\" stroke=\"#2980b9\" stroke-width=\"2\"/>\n",
            "<text x=\"380\" y=\"40\" font-size=\"11\" fill=\"#c0392b\">high risk</text>\n",
            "<text x=\"380\" y=\"55\" font-size=\"11\" fill=\"#2980b9\">low risk</text>\n",
            "</svg>\n",
        ),
        tmax = t_max,
        title = eval.model,
        high = path(&eval.km_high),
        low = path(&eval.km_low),
    )
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckCmd {
    pub spec: GradcheckSpec,
    pub tolerance: f64,
}

impl Default for GradcheckCmd {
    fn default() -> Self {
        GradcheckCmd {
            spec: GradcheckSpec::default(),
            tolerance: 1e-4,
        }
    }
}

pub(crate) fn gradcheck(cfg: &GradcheckCmd, io: &CommandIo<'_>) -> Result<()> {
    if !(cfg.tolerance.is_finite() && cfg.tolerance > 0.0) {
        return Err(Error::InvalidInput(format!(
            "tolerance must be positive, got {}",
            cfg.tolerance
        )));
    }
    let rel = full_chain_gradcheck(&cfg.spec)?;
    println!("max relative error: {rel}");
    let mut buf = String::from("metric,value\n");
    csv_push(&mut buf, &["max_relative_error".into(), rel.to_string()]);
    csv_push(&mut buf, &["tolerance".into(), cfg.tolerance.to_string()]);
    write_text(&io.out.join("gradcheck.csv"), &buf)?;
    write_manifest(io, "gradcheck", cfg.spec.seed, cfg)?;
    if !(rel < cfg.tolerance) {
        return Err(Error::Numerical(format!(
            "gradient check failed: max relative error {rel} is not below {}",
            cfg.tolerance
        )));
    }
    Ok(())
}
