//! The decorrelation objective and its training loop. Two views of each
//! sample pass through a shared encoder and projector; projector outputs are
//! normalized along the batch, cross-correlated, and pushed toward the
//! identity matrix. View construction distinguishes the two twin families:
//! tumor/normal mixtures for the main model, additive Gaussian noise for the
//! noise baseline.

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, MixtureSpec};
use crate::data::{ExpressionMatrix, GeneId, SampleKind};
use crate::error::{Error, Result};
use crate::model::{LossConfig, TrainConfig, TrainedModel};
use crate::nn::{Activation, AdamState, Mlp, MlpSpec, Mode};

/// How training views were built; recorded in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ViewConfig {
    Mixture(MixtureSpec),
    GaussianNoise { sigma: Vec<f64> },
}

/// Encoder plus projector trained under the decorrelation objective.
/// Embeddings come from the encoder alone; the projector exists only to
/// carry the loss during training and is kept for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinModel {
    pub genes: Vec<GeneId>,
    pub encoder: Mlp,
    pub projector: Mlp,
    pub loss: LossConfig,
    pub views: ViewConfig,
}

/// Normalize each column to mean 0 and unit population variance, guarded by
/// `eps` inside the square root. A constant column cannot be normalized; it
/// comes back as zeros with its flag set, which signals a degenerate batch.
pub fn batch_normalize_columns(
    z: ArrayView2<'_, f64>,
    eps: f64,
) -> Result<(Array2<f64>, Vec<bool>)> {
    let (y, flags, _) = bn_columns_full(z, eps)?;
    Ok((y, flags))
}

/// Normalization plus per-column scales, for the backward pass.
fn bn_columns_full(
    z: ArrayView2<'_, f64>,
    eps: f64,
) -> Result<(Array2<f64>, Vec<bool>, Vec<f64>)> {
    if z.nrows() < 2 {
        return Err(Error::InvalidInput(format!(
            "batch statistics need at least 2 rows, got {}",
            z.nrows()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    let b = z.nrows() as f64;
    let mut y = z.to_owned();
    let mut flags = vec![false; z.ncols()];
    let mut scales = vec![0.0; z.ncols()];
    for (j, mut col) in y.columns_mut().into_iter().enumerate() {
        let mean = col.sum() / b;
        col.mapv_inplace(|v| v - mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / b;
        if var == 0.0 {
            flags[j] = true;
            col.fill(0.0);
            continue;
        }
        let s = (var + eps).sqrt();
        scales[j] = s;
        col.mapv_inplace(|v| v / s);
    }
    Ok((y, flags, scales))
}

/// Cross-correlation of two equally shaped view batches: entry (i, j) is
/// the inner product of column i of `z1` with column j of `z2`, divided by
/// the two column norms. Inputs are expected batch-normalized; with
/// identical inputs the diagonal is exactly 1 regardless of the variance
/// convention, because the norms cancel.
pub fn cross_correlation(
    z1: ArrayView2<'_, f64>,
    z2: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if z1.dim() != z2.dim() {
        return Err(Error::ShapeMismatch(format!(
            "view shapes {:?} and {:?} differ",
            z1.dim(),
            z2.dim()
        )));
    }
    if z1.nrows() < 2 {
        return Err(Error::InvalidInput(format!(
            "cross-correlation needs at least 2 rows, got {}",
            z1.nrows()
        )));
    }
    let norms = |z: &ArrayView2<'_, f64>, which: &str| -> Result<Array1<f64>> {
        let n = z.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum::<f64>().sqrt());
        if let Some(j) = n.iter().position(|&v| v == 0.0) {
            return Err(Error::Numerical(format!(
                "degenerate batch: {which} column {j} has zero norm"
            )));
        }
        Ok(n)
    };
    let n1 = norms(&z1, "first view")?;
    let n2 = norms(&z2, "second view")?;
    let mut c = z1.t().dot(&z2);
    for ((i, j), v) in c.indexed_iter_mut() {
        *v /= n1[i] * n2[j];
    }
    Ok(c)
}

/// Loss pulling the cross-correlation toward the identity: squared distance
/// of the diagonal from 1, plus `lambda` times the squared off-diagonal
/// mass. Returns the scalar and its gradient with respect to `c`.
pub fn twin_loss(c: ArrayView2<'_, f64>, lambda: f64) -> Result<(f64, Array2<f64>)> {
    if c.nrows() != c.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "cross-correlation matrix must be square, got {:?}",
            c.dim()
        )));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidInput(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(c.raw_dim());
    for ((i, j), &v) in c.indexed_iter() {
        if i == j {
            loss += (1.0 - v) * (1.0 - v);
            grad[[i, j]] = -2.0 * (1.0 - v);
        } else {
            loss += lambda * v * v;
            grad[[i, j]] = 2.0 * lambda * v;
        }
    }
    Ok((loss, grad))
}

/// Loss of one view pair plus its gradients with respect to the raw
/// projector outputs (before column normalization).
#[derive(Debug, Clone)]
pub struct TwinObjective {
    pub loss: f64,
    pub cross_corr: Array2<f64>,
    pub d_z1: Array2<f64>,
    pub d_z2: Array2<f64>,
}

/// Evaluate the full objective on raw projector outputs: normalize columns,
/// cross-correlate, score. Returns `None` when either view has a constant
/// column, since the normalization (and hence the gradient) is undefined
/// there; callers skip such batches.
pub fn twin_objective(
    z1: ArrayView2<'_, f64>,
    z2: ArrayView2<'_, f64>,
    cfg: &LossConfig,
) -> Result<Option<TwinObjective>> {
    cfg.validate()?;
    if z1.dim() != z2.dim() {
        return Err(Error::ShapeMismatch(format!(
            "view shapes {:?} and {:?} differ",
            z1.dim(),
            z2.dim()
        )));
    }
    let (y1, f1, s1) = bn_columns_full(z1, cfg.eps)?;
    let (y2, f2, s2) = bn_columns_full(z2, cfg.eps)?;
    if f1.iter().chain(&f2).any(|&f| f) {
        return Ok(None);
    }
    let c = cross_correlation(y1.view(), y2.view())?;
    let (loss, g) = twin_loss(c.view(), cfg.lambda)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("twin loss".into()));
    }

    // Gradients through the explicit renormalization: with u_i = column i
    // of y1 (norm n1_i, unit direction u_hat), dC_ij/du_i =
    // (v_hat_j - C_ij u_hat_i)/n1_i, so
    // dL/du_i = (sum_j G_ij v_hat_j - u_hat_i sum_j G_ij C_ij)/n1_i.
    let n1 = y1.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum::<f64>().sqrt());
    let n2 = y2.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum::<f64>().sqrt());
    let u_hat = &y1 / &n1;
    let v_hat = &y2 / &n2;
    let gc = &g * &c;
    let r1 = gc.sum_axis(Axis(1));
    let r2 = gc.sum_axis(Axis(0));
    let mut d_y1 = v_hat.dot(&g.t());
    for (mut col, (&r, (&n, u_col))) in d_y1
        .columns_mut()
        .into_iter()
        .zip(r1.iter().zip(n1.iter().zip(u_hat.columns())))
    {
        col.zip_mut_with(&u_col, |d, &u| *d = (*d - u * r) / n);
    }
    let mut d_y2 = u_hat.dot(&g);
    for (mut col, (&r, (&n, v_col))) in d_y2
        .columns_mut()
        .into_iter()
        .zip(r2.iter().zip(n2.iter().zip(v_hat.columns())))
    {
        col.zip_mut_with(&v_col, |d, &v| *d = (*d - v * r) / n);
    }

    // Batch-norm backward per column: with y = (z - mean)/s and incoming
    // gradient h, dL/dz = (h - mean(h) - y * mean(h * y))/s.
    let b = z1.nrows() as f64;
    let bn_back = |d_y: &mut Array2<f64>, y: &Array2<f64>, scales: &[f64]| {
        for ((mut h, y_col), &s) in d_y
            .columns_mut()
            .into_iter()
            .zip(y.columns())
            .zip(scales)
        {
            let mean_h = h.sum() / b;
            let mean_hy = h.iter().zip(y_col.iter()).map(|(a, c)| a * c).sum::<f64>() / b;
            for (d, &yv) in h.iter_mut().zip(y_col.iter()) {
                *d = (*d - mean_h - yv * mean_hy) / s;
            }
        }
    };
    bn_back(&mut d_y1, &y1, &s1);
    bn_back(&mut d_y2, &y2, &s2);

    Ok(Some(TwinObjective {
        loss,
        cross_corr: c,
        d_z1: d_y1,
        d_z2: d_y2,
    }))
}

/// Per-batch view construction during training.
pub(crate) enum ViewSource<'a> {
    Mixture {
        pool: ArrayView2<'a, f64>,
        spec: MixtureSpec,
    },
    Noise {
        sigma: Array1<f64>,
    },
}

impl ViewSource<'_> {
    fn views(
        &self,
        x: ArrayView2<'_, f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        match self {
            ViewSource::Mixture { pool, spec } => {
                let mut v1 = Array2::zeros(x.raw_dim());
                let mut v2 = Array2::zeros(x.raw_dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let (a, b) = make_views(row, *pool, spec, rng)?;
                    v1.row_mut(i).assign(&a);
                    v2.row_mut(i).assign(&b);
                }
                Ok((v1, v2))
            }
            ViewSource::Noise { sigma } => {
                let draw = |rng: &mut ChaCha8Rng| {
                    let mut v = x.to_owned();
                    for mut row in v.rows_mut() {
                        for (val, &s) in row.iter_mut().zip(sigma.iter()) {
                            let n: f64 = rng.sample(StandardNormal);
                            *val += s * n;
                        }
                    }
                    v
                };
                let v1 = draw(rng);
                let v2 = draw(rng);
                Ok((v1, v2))
            }
        }
    }
}

/// Shared optimization loop: shuffled mini-batches, two views per batch
/// through the same encoder and projector, Adam on the joint parameter
/// vector. Returns the nets and the per-epoch mean loss trace.
pub(crate) fn train_core(
    x: ArrayView2<'_, f64>,
    source: &ViewSource<'_>,
    cfg: &TrainConfig,
) -> Result<(Mlp, Mlp, Vec<f64>)> {
    cfg.validate()?;
    let n = x.nrows();
    if cfg.batch_size > n {
        return Err(Error::InvalidInput(format!(
            "batch size {} exceeds the {n} training samples",
            cfg.batch_size
        )));
    }

    let mut enc_widths = vec![x.ncols()];
    enc_widths.extend(&cfg.encoder_widths);
    // the embedding itself is rectified; the projector output stays linear
    let enc_spec = MlpSpec::new(enc_widths, Activation::Relu)?.with_output_activation();
    let mut proj_widths = vec![cfg.embed_dim()];
    proj_widths.extend(&cfg.projector_widths);
    let proj_spec = MlpSpec::new(proj_widths, Activation::Relu)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(0);
    let mut encoder = Mlp::init(enc_spec, &mut init_rng)?;
    let mut projector = Mlp::init(proj_spec, &mut init_rng)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut view_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    view_rng.set_stream(2);

    let n_enc = encoder.n_params();
    let n_all = n_enc + projector.n_params();
    let mut adam = AdamState::new(n_all, cfg.learning_rate);
    let mut delta = vec![0.0; n_all];

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0usize;
    let mut total = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            // a trailing singleton has no batch statistics
            if chunk.len() < 2 {
                continue;
            }
            total += 1;
            let xb = x.select(Axis(0), chunk);
            let (v1, v2) = source.views(xb.view(), &mut view_rng)?;
            let (h1, ce1) = encoder.forward(v1.view(), Mode::Train)?;
            let (z1, cp1) = projector.forward(h1.view(), Mode::Train)?;
            let (h2, ce2) = encoder.forward(v2.view(), Mode::Train)?;
            let (z2, cp2) = projector.forward(h2.view(), Mode::Train)?;
            let Some(obj) = twin_objective(z1.view(), z2.view(), &cfg.loss)? else {
                skipped += 1;
                warn!("epoch {epoch}: skipped a degenerate batch (constant projector column)");
                continue;
            };
            let (gp1, dh1) = projector.backward(&cp1, obj.d_z1.view())?;
            let (ge1, _) = encoder.backward(&ce1, dh1.view())?;
            let (gp2, dh2) = projector.backward(&cp2, obj.d_z2.view())?;
            let (ge2, _) = encoder.backward(&ce2, dh2.view())?;
            let mut ge = ge1;
            ge.add(&ge2);
            let mut gp = gp1;
            gp.add(&gp2);
            let mut flat = ge.flat();
            flat.extend(gp.flat());
            adam.step(&flat, &mut delta)?;
            encoder.apply_flat_delta(&delta[..n_enc])?;
            projector.apply_flat_delta(&delta[n_enc..])?;
            encoder.update_running_stats(&ce1);
            encoder.update_running_stats(&ce2);
            projector.update_running_stats(&cp1);
            projector.update_running_stats(&cp2);
            epoch_loss += obj.loss;
            counted += 1;
        }
        if counted == 0 {
            return Err(Error::Numerical(format!(
                "every batch in epoch {epoch} was degenerate"
            )));
        }
        trace.push(epoch_loss / counted as f64);
    }
    if skipped * 10 > total {
        return Err(Error::Numerical(format!(
            "{skipped} of {total} batches were degenerate (over 10%)"
        )));
    }
    Ok((encoder, projector, trace))
}

pub(crate) fn tumor_rows(data: &ExpressionMatrix) -> Result<Array2<f64>> {
    let anchors: Vec<usize> = data
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == SampleKind::Tumor)
        .map(|(i, _)| i)
        .collect();
    if anchors.is_empty() {
        return Err(Error::InvalidInput("no tumor samples to train on".into()));
    }
    Ok(data.values().select(Axis(0), &anchors))
}

/// Train the mixture-view model: each batch pairs every tumor profile with
/// two independently drawn synthetic-normal admixtures from `pool`.
pub fn train_twin(
    data: &ExpressionMatrix,
    pool: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, Vec<f64>)> {
    if pool.ncols() != data.n_genes() {
        return Err(Error::ShapeMismatch(format!(
            "normal pool has {} genes, data has {}",
            pool.ncols(),
            data.n_genes()
        )));
    }
    cfg.mixture.validate(pool.nrows())?;
    let x = tumor_rows(data)?;
    let source = ViewSource::Mixture {
        pool,
        spec: cfg.mixture,
    };
    let (encoder, projector, trace) = train_core(x.view(), &source, cfg)?;
    let model = TwinModel {
        genes: data.genes().to_vec(),
        encoder,
        projector,
        loss: cfg.loss,
        views: ViewConfig::Mixture(cfg.mixture),
    };
    Ok((TrainedModel::Twin(model), trace))
}

/// Shape of the synthetic problem [`full_chain_gradcheck`] probes: a fresh
/// random encoder and projector on random view pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSpec {
    pub n_samples: usize,
    pub n_genes: usize,
    /// Encoder hidden widths plus embedding width (input comes from n_genes).
    pub encoder_widths: Vec<usize>,
    /// Projector widths after the embedding input.
    pub projector_widths: Vec<usize>,
    pub loss: LossConfig,
    /// Seeds network init; views use seed+100 and seed+200.
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            n_samples: 4,
            n_genes: 8,
            encoder_widths: vec![6, 2],
            projector_widths: vec![4, 4],
            loss: LossConfig::default(),
            // this seed keeps every pre-activation clear of its ReLU kink
            // at the step size below; a kink inside the central-difference
            // window would poison the comparison
            seed: 18,
            // wide enough that single-ulp noise in a loss of magnitude
            // ~100 divides out, small enough to stay clear of kinks
            step: 1e-4,
        }
    }
}

/// Compare analytic gradients of the whole objective chain (views through
/// encoder, projector, normalization, and loss) against central finite
/// differences over every parameter. Returns the maximum relative error.
pub fn full_chain_gradcheck(spec: &GradcheckSpec) -> Result<f64> {
    if spec.n_samples < 2 {
        return Err(Error::InvalidInput(
            "gradient check needs at least 2 samples for batch statistics".into(),
        ));
    }
    spec.loss.validate()?;
    let mut enc_widths = vec![spec.n_genes];
    enc_widths.extend(&spec.encoder_widths);
    let enc_spec = MlpSpec::new(enc_widths, Activation::Relu)?.with_output_activation();
    let d = enc_spec.output_width();
    let mut proj_widths = vec![d];
    proj_widths.extend(&spec.projector_widths);
    let proj_spec = MlpSpec::new(proj_widths, Activation::Relu)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let encoder = Mlp::init(enc_spec, &mut rng)?;
    let projector = Mlp::init(proj_spec, &mut rng)?;
    let draw = |seed: u64| -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((spec.n_samples, spec.n_genes), |_| {
            rng.sample::<f64, _>(StandardNormal)
        })
    };
    let v1 = draw(spec.seed + 100);
    let v2 = draw(spec.seed + 200);
    let cfg = spec.loss;
    let n_enc = encoder.n_params();

    let forward = |enc: &Mlp, proj: &Mlp| -> Result<(Array2<f64>, Array2<f64>)> {
        let (h1, _) = enc.forward(v1.view(), Mode::Train)?;
        let (z1, _) = proj.forward(h1.view(), Mode::Train)?;
        let (h2, _) = enc.forward(v2.view(), Mode::Train)?;
        let (z2, _) = proj.forward(h2.view(), Mode::Train)?;
        Ok((z1, z2))
    };

    let analytic = {
        let (h1, ce1) = encoder.forward(v1.view(), Mode::Train)?;
        let (z1, cp1) = projector.forward(h1.view(), Mode::Train)?;
        let (h2, ce2) = encoder.forward(v2.view(), Mode::Train)?;
        let (z2, cp2) = projector.forward(h2.view(), Mode::Train)?;
        let obj = twin_objective(z1.view(), z2.view(), &cfg)?.ok_or_else(|| {
            Error::Numerical("gradient-check batch is degenerate".into())
        })?;
        let (gp1, dh1) = projector.backward(&cp1, obj.d_z1.view())?;
        let (ge1, _) = encoder.backward(&ce1, dh1.view())?;
        let (gp2, dh2) = projector.backward(&cp2, obj.d_z2.view())?;
        let (ge2, _) = encoder.backward(&ce2, dh2.view())?;
        let mut ge = ge1;
        ge.add(&ge2);
        let mut gp = gp1;
        gp.add(&gp2);
        let mut flat = ge.flat();
        flat.extend(gp.flat());
        flat
    };

    let mut params = encoder.params_flat();
    params.extend(projector.params_flat());
    crate::nn::finite_diff_check(
        |p| {
            let mut enc = encoder.clone();
            let mut proj = projector.clone();
            enc.set_params_flat(&p[..n_enc])?;
            proj.set_params_flat(&p[n_enc..])?;
            let (z1, z2) = forward(&enc, &proj)?;
            Ok(twin_objective(z1.view(), z2.view(), &cfg)?
                .ok_or_else(|| Error::Numerical("degenerate batch".into()))?
                .loss)
        },
        &params,
        &analytic,
        spec.step,
    )
}

/// Train the noise baseline: views are the profile plus independent
/// Gaussian noise per gene. `noise_sd` fixes one standard deviation for all
/// genes; `None` defaults to half of each gene's training standard
/// deviation.
pub fn train_bt_noise(
    data: &ExpressionMatrix,
    cfg: &TrainConfig,
    noise_sd: Option<f64>,
) -> Result<(TrainedModel, Vec<f64>)> {
    let x = tumor_rows(data)?;
    let sigma = match noise_sd {
        Some(s) => {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "noise standard deviation must be positive, got {s}"
                )));
            }
            Array1::from_elem(x.ncols(), s)
        }
        None => {
            let n = x.nrows() as f64;
            x.map_axis(Axis(0), |col| {
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
                0.5 * var.sqrt()
            })
        }
    };
    let source = ViewSource::Noise {
        sigma: sigma.clone(),
    };
    let (encoder, projector, trace) = train_core(x.view(), &source, cfg)?;
    let model = TwinModel {
        genes: data.genes().to_vec(),
        encoder,
        projector,
        loss: cfg.loss,
        views: ViewConfig::GaussianNoise {
            sigma: sigma.to_vec(),
        },
    };
    Ok((TrainedModel::BtNoise(model), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_check;
    use crate::synth::{generate_cohort, SynthConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn bn_keeps_already_normalized_column() {
        let z = array![[1.0], [-1.0]];
        let (y, flags) = batch_normalize_columns(z.view(), 1e-9).unwrap();
        assert!(!flags[0]);
        assert_abs_diff_eq!(y[[0, 0]], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(y[[1, 0]], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn bn_zeroes_and_flags_constant_column() {
        let z = array![[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]];
        let (y, flags) = batch_normalize_columns(z.view(), 1e-9).unwrap();
        assert_eq!(flags, vec![true, false]);
        assert_eq!(y.column(0).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn bn_output_means_vanish() {
        let z = random_matrix(17, 6, 1);
        let (y, flags) = batch_normalize_columns(z.view(), 1e-9).unwrap();
        assert!(flags.iter().all(|&f| !f));
        for col in y.columns() {
            assert_abs_diff_eq!(col.sum() / 17.0, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bn_rejects_single_row() {
        let z = array![[1.0, 2.0]];
        assert!(batch_normalize_columns(z.view(), 1e-9).is_err());
    }

    #[test]
    fn cross_corr_of_orthogonal_self_is_identity() {
        let z = array![[1.0, 1.0], [-1.0, 1.0]];
        let c = cross_correlation(z.view(), z.view()).unwrap();
        let expect = array![[1.0, 0.0], [0.0, 1.0]];
        for (a, b) in c.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_corr_sign_flips_with_negated_view() {
        let z = random_matrix(9, 4, 2);
        let c_self = cross_correlation(z.view(), z.view()).unwrap();
        let neg = -&z;
        let c_neg = cross_correlation(z.view(), neg.view()).unwrap();
        for (a, b) in c_self.iter().zip(c_neg.iter()) {
            assert_abs_diff_eq!(*a, -b, epsilon = 1e-14);
        }
        for i in 0..4 {
            assert_abs_diff_eq!(c_neg[[i, i]], -1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn cross_corr_two_row_fixture() {
        let z1 = array![[1.0, 1.0], [-1.0, -1.0]];
        let z2 = array![[1.0, -1.0], [-1.0, 1.0]];
        let c = cross_correlation(z1.view(), z2.view()).unwrap();
        let expect = array![[1.0, -1.0], [1.0, -1.0]];
        for (a, b) in c.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_corr_self_diagonal_is_unit_after_bn() {
        for seed in 0..10 {
            let z = random_matrix(13, 5, 100 + seed);
            let (y, _) = batch_normalize_columns(z.view(), 1e-9).unwrap();
            let c = cross_correlation(y.view(), y.view()).unwrap();
            for i in 0..5 {
                assert_abs_diff_eq!(c[[i, i]], 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn cross_corr_rejects_zero_norm_column() {
        let z1 = array![[0.0, 1.0], [0.0, -1.0]];
        let z2 = array![[1.0, 1.0], [-1.0, 1.0]];
        let err = cross_correlation(z1.view(), z2.view()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn loss_fixtures() {
        let eye: Array2<f64> = Array2::eye(4);
        let (l, _) = twin_loss(eye.view(), 54.9).unwrap();
        assert_eq!(l, 0.0);

        let zero: Array2<f64> = Array2::zeros((4, 4));
        let (l, _) = twin_loss(zero.view(), 54.9).unwrap();
        assert_abs_diff_eq!(l, 4.0, epsilon = 1e-12);

        let c = array![[1.0, 0.5], [0.5, 1.0]];
        let (l, _) = twin_loss(c.view(), 54.9).unwrap();
        assert_abs_diff_eq!(l, 27.45, epsilon = 1e-12);
    }

    #[test]
    fn loss_rejects_non_square() {
        let c = Array2::<f64>::zeros((2, 3));
        assert!(twin_loss(c.view(), 1.0).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let c = random_matrix(3, 3, 4);
        let (_, grad) = twin_loss(c.view(), 54.9).unwrap();
        let flat: Vec<f64> = c.iter().cloned().collect();
        let grad_flat: Vec<f64> = grad.iter().cloned().collect();
        let rel = finite_diff_check(
            |p| {
                let m = Array2::from_shape_vec((3, 3), p.to_vec()).unwrap();
                Ok(twin_loss(m.view(), 54.9)?.0)
            },
            &flat,
            &grad_flat,
            1e-6,
        )
        .unwrap();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn loss_is_invariant_under_shared_dimension_permutation() {
        let z1 = random_matrix(11, 5, 5);
        let z2 = random_matrix(11, 5, 6);
        let cfg = LossConfig::default();
        let base = twin_objective(z1.view(), z2.view(), &cfg)
            .unwrap()
            .unwrap()
            .loss;
        let perm = [3usize, 0, 4, 1, 2];
        let p1 = z1.select(Axis(1), &perm);
        let p2 = z2.select(Axis(1), &perm);
        let permuted = twin_objective(p1.view(), p2.view(), &cfg)
            .unwrap()
            .unwrap()
            .loss;
        assert_abs_diff_eq!(base, permuted, epsilon = 1e-12);
    }

    #[test]
    fn objective_flags_degenerate_view() {
        let mut z1 = random_matrix(6, 3, 7);
        z1.column_mut(1).fill(2.5);
        let z2 = random_matrix(6, 3, 8);
        let out = twin_objective(z1.view(), z2.view(), &LossConfig::default()).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let z1 = random_matrix(6, 3, 9);
        let z2 = random_matrix(6, 3, 10);
        let cfg = LossConfig::default();
        let obj = twin_objective(z1.view(), z2.view(), &cfg).unwrap().unwrap();

        let mut params: Vec<f64> = z1.iter().cloned().collect();
        params.extend(z2.iter().cloned());
        let mut grad: Vec<f64> = obj.d_z1.iter().cloned().collect();
        grad.extend(obj.d_z2.iter().cloned());
        let rel = finite_diff_check(
            |p| {
                let a = Array2::from_shape_vec((6, 3), p[..18].to_vec()).unwrap();
                let b = Array2::from_shape_vec((6, 3), p[18..].to_vec()).unwrap();
                Ok(twin_objective(a.view(), b.view(), &cfg)?
                    .expect("non-degenerate")
                    .loss)
            },
            &params,
            &grad,
            1e-6,
        )
        .unwrap();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    /// Gradient of the entire chain (encoder, projector, normalization,
    /// cross-correlation, loss) with respect to every network parameter.
    #[test]
    fn full_chain_gradient_matches_finite_differences() {
        let rel = full_chain_gradcheck(&GradcheckSpec::default()).unwrap();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn gradcheck_rejects_single_sample() {
        let spec = GradcheckSpec {
            n_samples: 1,
            ..GradcheckSpec::default()
        };
        assert!(full_chain_gradcheck(&spec).is_err());
    }


    fn train_cohort(seed: u64) -> crate::data::ExpressionMatrix {
        let cfg = SynthConfig {
            n_genes: 30,
            n_tumor: 48,
            n_normal: 12,
            n_subtypes: 3,
            seed,
            ..SynthConfig::default()
        };
        generate_cohort(&cfg).unwrap().0
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            encoder_widths: vec![16, 4],
            projector_widths: vec![8, 8],
            epochs: 10,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_reduces_the_loss() {
        let data = train_cohort(20);
        let pool = data.normal_pool();
        let (_, trace) = train_twin(&data, pool.view(), &quick_config()).unwrap();
        assert_eq!(trace.len(), 10);
        assert!(
            trace.last().unwrap() < trace.first().unwrap(),
            "trace did not improve: {trace:?}"
        );
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = train_cohort(21);
        let pool = data.normal_pool();
        let cfg = quick_config();
        let (m1, t1) = train_twin(&data, pool.view(), &cfg).unwrap();
        let (m2, t2) = train_twin(&data, pool.view(), &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let data = train_cohort(22);
        let pool = data.normal_pool();
        let cfg = TrainConfig {
            batch_size: 1000,
            ..quick_config()
        };
        let err = train_twin(&data, pool.view(), &cfg).unwrap_err();
        assert!(err.to_string().contains("batch size"), "{err}");
    }

    #[test]
    fn constant_data_fails_as_degenerate() {
        let genes: Vec<GeneId> = (0..5)
            .map(|g| GeneId::new(format!("G{g}")).unwrap())
            .collect();
        let samples: Vec<crate::data::SampleMeta> = (0..8)
            .map(|i| crate::data::SampleMeta::new(format!("T{i}"), SampleKind::Tumor))
            .collect();
        let data =
            ExpressionMatrix::new(genes, samples, Array2::zeros((8, 5))).unwrap();
        let pool = Array2::zeros((6, 5));
        let cfg = TrainConfig {
            encoder_widths: vec![4, 2],
            projector_widths: vec![3],
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = train_twin(&data, pool.view(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn noise_views_train_and_are_deterministic() {
        let data = train_cohort(23);
        let cfg = quick_config();
        let (m1, t1) = train_bt_noise(&data, &cfg, None).unwrap();
        let (m2, t2) = train_bt_noise(&data, &cfg, None).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        assert!(t1.last().unwrap() < t1.first().unwrap());
    }

    #[test]
    fn noise_sd_must_be_positive() {
        let data = train_cohort(24);
        let cfg = quick_config();
        assert!(train_bt_noise(&data, &cfg, Some(0.0)).is_err());
        assert!(train_bt_noise(&data, &cfg, Some(-1.0)).is_err());
    }

    #[test]
    fn vanishing_noise_drives_diagonal_to_one() {
        // with views nearly equal, C(Z,Z) is essentially a self-correlation
        let data = train_cohort(25);
        let cfg = TrainConfig {
            epochs: 3,
            ..quick_config()
        };
        let (model, _) = train_bt_noise(&data, &cfg, Some(1e-12)).unwrap();
        let TrainedModel::BtNoise(tm) = &model else {
            panic!("wrong family")
        };
        let x = tumor_rows(&data).unwrap();
        let (h, _) = tm.encoder.forward(x.view(), Mode::Eval).unwrap();
        let (z, _) = tm.projector.forward(h.view(), Mode::Eval).unwrap();
        let (y, flags) = batch_normalize_columns(z.view(), tm.loss.eps).unwrap();
        assert!(flags.iter().all(|&f| !f));
        let c = cross_correlation(y.view(), y.view()).unwrap();
        for i in 0..c.nrows() {
            assert_abs_diff_eq!(c[[i, i]], 1.0, epsilon = 1e-9);
        }
    }
}
