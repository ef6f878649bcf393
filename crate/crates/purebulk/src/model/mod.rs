//! Embedding models: the twin decorrelation objective trained on
//! tumor/normal mixture views, plus the four baselines (autoencoder,
//! variational autoencoder, noise-view twin, PCA). All trained models share
//! one container that embeds expression matrices and round-trips through a
//! versioned checkpoint bit-exactly.

mod ae;
mod pca;
mod twin;

pub use ae::{train_autoencoder, vae_kl, AeModel, AeVariant, VaeModel};
pub use pca::{pca_fit, Pca, PcaModel};
pub use twin::{
    batch_normalize_columns, cross_correlation, full_chain_gradcheck, train_bt_noise,
    train_twin, twin_loss, twin_objective, GradcheckSpec, TwinModel, TwinObjective,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::augment::MixtureSpec;
use crate::classify::Embed;
use crate::data::{ExpressionMatrix, GeneId};
use crate::error::{Error, Result};
use crate::nn::Mode;

/// Off-diagonal weight the decorrelation objective defaults to.
pub const DEFAULT_LAMBDA: f64 = 54.9;

/// Width of the embedding every model family produces by default.
pub const DEFAULT_EMBED_DIM: usize = 4;

/// Decorrelation loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight on squared off-diagonal cross-correlation entries.
    pub lambda: f64,
    /// Variance guard added inside the column normalization.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            eps: 1e-9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidInput(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.eps > 0.0 && self.eps <= 1e-6) {
            return Err(Error::InvalidInput(format!(
                "eps must lie in (0, 1e-6], got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Shared training hyperparameters for every gradient-trained family.
///
/// `encoder_widths` lists hidden widths plus the final embedding width; the
/// input width is taken from the data. The projector (twin families) starts
/// at the embedding width. Autoencoder decoders mirror the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder_widths: Vec<usize>,
    pub projector_widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mixture: MixtureSpec,
    pub loss: LossConfig,
    /// KL weight for the variational autoencoder.
    pub vae_beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder_widths: vec![512, 128, DEFAULT_EMBED_DIM],
            projector_widths: vec![64, 64],
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            mixture: MixtureSpec::default(),
            loss: LossConfig::default(),
            vae_beta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(Error::InvalidInput("encoder needs at least one layer".into()));
        }
        if self.projector_widths.is_empty() {
            return Err(Error::InvalidInput(
                "projector needs at least one layer".into(),
            ));
        }
        if self.encoder_widths.iter().any(|&w| w == 0)
            || self.projector_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidInput(
                "batch size must be at least 2 (batch statistics need two rows)".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.vae_beta.is_finite() && self.vae_beta >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "vae beta must be non-negative, got {}",
                self.vae_beta
            )));
        }
        self.loss.validate()
    }

    pub(crate) fn embed_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated non-empty")
    }
}

/// A fitted model of any family, ready to embed expression data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainedModel {
    Twin(TwinModel),
    BtNoise(TwinModel),
    Ae(AeModel),
    Vae(VaeModel),
    Pca(PcaModel),
}

impl TrainedModel {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TrainedModel::Twin(_) => "twin",
            TrainedModel::BtNoise(_) => "bt-noise",
            TrainedModel::Ae(_) => "ae",
            TrainedModel::Vae(_) => "vae",
            TrainedModel::Pca(_) => "pca",
        }
    }

    /// Gene order the model was trained on; inputs must match it exactly.
    pub fn genes(&self) -> &[GeneId] {
        match self {
            TrainedModel::Twin(m) | TrainedModel::BtNoise(m) => &m.genes,
            TrainedModel::Ae(m) => &m.genes,
            TrainedModel::Vae(m) => &m.genes,
            TrainedModel::Pca(m) => &m.genes,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            TrainedModel::Twin(m) | TrainedModel::BtNoise(m) => {
                m.encoder.spec().output_width()
            }
            TrainedModel::Ae(m) => m.encoder.spec().output_width(),
            TrainedModel::Vae(m) => m.encoder.spec().output_width() / 2,
            TrainedModel::Pca(m) => m.pca.components.ncols(),
        }
    }

    /// Embed a matrix whose columns are already in training gene order.
    pub fn embed_values(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.genes().len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} gene columns, model was trained on {}",
                x.ncols(),
                self.genes().len()
            )));
        }
        match self {
            TrainedModel::Twin(m) | TrainedModel::BtNoise(m) => {
                Ok(m.encoder.forward(x, Mode::Eval)?.0)
            }
            TrainedModel::Ae(m) => Ok(m.encoder.forward(x, Mode::Eval)?.0),
            TrainedModel::Vae(m) => {
                let h = m.encoder.forward(x, Mode::Eval)?.0;
                let d = h.ncols() / 2;
                Ok(h.slice(ndarray::s![.., ..d]).to_owned())
            }
            TrainedModel::Pca(m) => m.pca.transform(x),
        }
    }

    /// Embed an expression matrix, refusing any gene-order mismatch.
    pub fn encode(&self, m: &ExpressionMatrix) -> Result<Array2<f64>> {
        if m.genes() != self.genes() {
            return Err(Error::InvalidInput(
                "gene list does not match the training gene order; \
                 reorder or subset the matrix first"
                    .into(),
            ));
        }
        self.embed_values(m.values().view())
    }
}

impl Embed for TrainedModel {
    fn embed(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.embed_values(x)
    }
}

/// Checkpoint container version; bumped on any layout change.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: TrainedModel,
}

/// Write a model checkpoint. JSON with full-precision floats, so
/// save → load → save is byte-identical.
pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let cp = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    serde_json::to_writer_pretty(&mut out, &cp)
        .map_err(|e| Error::Parse(format!("{}: serialize checkpoint: {e}", path.display())))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let cp: Checkpoint = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Parse(format!("{}: parse checkpoint: {e}", path.display())))?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "{}: checkpoint version {} not supported (expected {})",
            path.display(),
            cp.version,
            CHECKPOINT_VERSION
        )));
    }
    Ok(cp.model)
}
