//! Reconstruction baselines: a plain autoencoder and a variational
//! autoencoder with a Gaussian prior. Both share the twin families'
//! encoder shape and emit embeddings of the same width, so downstream
//! comparisons differ only in the training objective.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionMatrix, GeneId};
use crate::error::{Error, Result};
use crate::model::{TrainConfig, TrainedModel};
use crate::nn::{Activation, Gradients, AdamState, Mlp, MlpSpec, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AeVariant {
    Ae,
    Vae,
}

/// Plain autoencoder; embeddings are the bottleneck activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeModel {
    pub genes: Vec<GeneId>,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Variational autoencoder. The encoder's output is the concatenation
/// [mean | log-variance]; embeddings are the posterior mean half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub genes: Vec<GeneId>,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub beta: f64,
}

/// KL divergence from the diagonal-Gaussian posterior to the standard
/// normal prior, averaged over the batch:
/// 0.5 * sum_k (exp(logvar) + mu^2 - 1 - logvar). Zero exactly at the prior.
pub fn vae_kl(mu: ArrayView2<'_, f64>, logvar: ArrayView2<'_, f64>) -> Result<f64> {
    if mu.dim() != logvar.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mean shape {:?} does not match log-variance shape {:?}",
            mu.dim(),
            logvar.dim()
        )));
    }
    let b = mu.nrows() as f64;
    let total: f64 = mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum();
    Ok(total / b)
}

/// One reconstruction step: loss (squared error summed over genes, averaged
/// over the batch) and gradients for both nets.
fn ae_step(
    enc: &Mlp,
    dec: &Mlp,
    x: ArrayView2<'_, f64>,
) -> Result<(f64, Gradients, Gradients)> {
    let b = x.nrows() as f64;
    let (h, ce) = enc.forward(x, Mode::Train)?;
    let (xhat, cd) = dec.forward(h.view(), Mode::Train)?;
    let resid = &xhat - &x;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / b;
    let d_xhat = resid.mapv(|r| 2.0 * r / b);
    let (gd, dh) = dec.backward(&cd, d_xhat.view())?;
    let (ge, _) = enc.backward(&ce, dh.view())?;
    Ok((loss, ge, gd))
}

/// One variational step with the noise draw supplied, so the gradient is an
/// exact derivative of a deterministic function (the reparameterization
/// trick): z = mu + exp(logvar/2) * eps.
fn vae_step(
    enc: &Mlp,
    dec: &Mlp,
    x: ArrayView2<'_, f64>,
    eps: &Array2<f64>,
    beta: f64,
) -> Result<(f64, Gradients, Gradients)> {
    let b = x.nrows() as f64;
    let (head, ce) = enc.forward(x, Mode::Train)?;
    let d = head.ncols() / 2;
    let mu = head.slice(s![.., ..d]);
    let logvar = head.slice(s![.., d..]);
    if eps.dim() != mu.dim() {
        return Err(Error::ShapeMismatch("noise shape mismatch".into()));
    }
    let sd = logvar.mapv(|lv| (0.5 * lv).exp());
    let z = &mu + &(&sd * eps);
    let (xhat, cd) = dec.forward(z.view(), Mode::Train)?;
    let resid = &xhat - &x;
    let recon = resid.iter().map(|r| r * r).sum::<f64>() / b;
    let kl = vae_kl(mu, logvar)?;
    let loss = recon + beta * kl;
    if !loss.is_finite() {
        return Err(Error::NonFinite("variational loss".into()));
    }

    let d_xhat = resid.mapv(|r| 2.0 * r / b);
    let (gd, dz) = dec.backward(&cd, d_xhat.view())?;
    let mut d_head = Array2::zeros(head.raw_dim());
    {
        let mut d_mu = d_head.slice_mut(s![.., ..d]);
        d_mu.assign(&dz);
        d_mu.zip_mut_with(&mu, |g, &m| *g += beta * m / b);
    }
    {
        // dz/dlogvar = 0.5 * sd * eps; dKL/dlogvar = (exp(logvar) - 1)/(2b)
        let mut d_lv = d_head.slice_mut(s![.., d..]);
        for ((g, (&dzv, &sdv)), (&e, &lv)) in d_lv
            .iter_mut()
            .zip(dz.iter().zip(sd.iter()))
            .zip(eps.iter().zip(logvar.iter()))
        {
            *g = dzv * 0.5 * sdv * e + beta * 0.5 * (lv.exp() - 1.0) / b;
        }
    }
    let (ge, _) = enc.backward(&ce, d_head.view())?;
    Ok((loss, ge, gd))
}

/// Train either reconstruction baseline on the tumor rows of `data`.
pub fn train_autoencoder(
    data: &ExpressionMatrix,
    cfg: &TrainConfig,
    variant: AeVariant,
) -> Result<(TrainedModel, Vec<f64>)> {
    cfg.validate()?;
    let x = super::twin::tumor_rows(data)?;
    let n = x.nrows();
    if cfg.batch_size > n {
        return Err(Error::InvalidInput(format!(
            "batch size {} exceeds the {n} training samples",
            cfg.batch_size
        )));
    }
    let g = x.ncols();
    let d = cfg.embed_dim();
    let hidden = &cfg.encoder_widths[..cfg.encoder_widths.len() - 1];

    let mut enc_widths = vec![g];
    enc_widths.extend(hidden);
    enc_widths.push(match variant {
        AeVariant::Ae => d,
        AeVariant::Vae => 2 * d,
    });
    let mut dec_widths = vec![d];
    dec_widths.extend(hidden.iter().rev());
    dec_widths.push(g);
    let enc_spec = MlpSpec::new(enc_widths, Activation::Relu)?;
    let dec_spec = MlpSpec::new(dec_widths, Activation::Relu)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(0);
    let mut enc = Mlp::init(enc_spec, &mut init_rng)?;
    let mut dec = Mlp::init(dec_spec, &mut init_rng)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(2);

    let n_enc = enc.n_params();
    let n_all = n_enc + dec.n_params();
    let mut adam = AdamState::new(n_all, cfg.learning_rate);
    let mut delta = vec![0.0; n_all];

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for chunk in indices.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let (loss, ge, gd) = match variant {
                AeVariant::Ae => ae_step(&enc, &dec, xb.view())?,
                AeVariant::Vae => {
                    let eps = Array2::from_shape_fn((chunk.len(), d), |_| {
                        sample_rng.sample::<f64, _>(StandardNormal)
                    });
                    vae_step(&enc, &dec, xb.view(), &eps, cfg.vae_beta)?
                }
            };
            let mut flat = ge.flat();
            flat.extend(gd.flat());
            adam.step(&flat, &mut delta)?;
            enc.apply_flat_delta(&delta[..n_enc])?;
            dec.apply_flat_delta(&delta[n_enc..])?;
            epoch_loss += loss;
            counted += 1;
        }
        trace.push(epoch_loss / counted as f64);
    }

    let genes = data.genes().to_vec();
    let model = match variant {
        AeVariant::Ae => TrainedModel::Ae(AeModel {
            genes,
            encoder: enc,
            decoder: dec,
        }),
        AeVariant::Vae => TrainedModel::Vae(VaeModel {
            genes,
            encoder: enc,
            decoder: dec,
            beta: cfg.vae_beta,
        }),
    };
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SampleKind, SampleMeta};
    use crate::nn::finite_diff_check;
    use crate::synth::{generate_cohort, SynthConfig};
    use ndarray::Array1;

    fn matrix_from(values: Array2<f64>) -> ExpressionMatrix {
        let genes: Vec<GeneId> = (0..values.ncols())
            .map(|g| GeneId::new(format!("G{g:03}")).unwrap())
            .collect();
        let samples: Vec<SampleMeta> = (0..values.nrows())
            .map(|i| SampleMeta::new(format!("T{i:03}"), SampleKind::Tumor))
            .collect();
        ExpressionMatrix::new(genes, samples, values).unwrap()
    }

    #[test]
    fn kl_is_zero_at_the_prior() {
        let mu = Array2::zeros((5, 4));
        let lv = Array2::zeros((5, 4));
        assert_eq!(vae_kl(mu.view(), lv.view()).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_positive_away_from_the_prior() {
        let mu = Array2::from_elem((3, 2), 1.0);
        let lv = Array2::from_elem((3, 2), -0.5);
        assert!(vae_kl(mu.view(), lv.view()).unwrap() > 0.0);
    }

    #[test]
    fn ae_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Mlp::init(
            MlpSpec::new(vec![6, 5, 2], Activation::Relu).unwrap(),
            &mut rng,
        )
        .unwrap();
        let dec = Mlp::init(
            MlpSpec::new(vec![2, 5, 6], Activation::Relu).unwrap(),
            &mut rng,
        )
        .unwrap();
        let x = Array2::from_shape_fn((4, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let (_, ge, gd) = ae_step(&enc, &dec, x.view()).unwrap();
        let mut analytic = ge.flat();
        analytic.extend(gd.flat());
        let mut params = enc.params_flat();
        let n_enc = params.len();
        params.extend(dec.params_flat());
        let rel = finite_diff_check(
            |p| {
                let mut e = enc.clone();
                let mut d = dec.clone();
                e.set_params_flat(&p[..n_enc])?;
                d.set_params_flat(&p[n_enc..])?;
                Ok(ae_step(&e, &d, x.view())?.0)
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn vae_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Mlp::init(
            MlpSpec::new(vec![6, 5, 4], Activation::Relu).unwrap(),
            &mut rng,
        )
        .unwrap();
        let dec = Mlp::init(
            MlpSpec::new(vec![2, 5, 6], Activation::Relu).unwrap(),
            &mut rng,
        )
        .unwrap();
        let x = Array2::from_shape_fn((4, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let eps = Array2::from_shape_fn((4, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let (_, ge, gd) = vae_step(&enc, &dec, x.view(), &eps, 1.0).unwrap();
        let mut analytic = ge.flat();
        analytic.extend(gd.flat());
        let mut params = enc.params_flat();
        let n_enc = params.len();
        params.extend(dec.params_flat());
        let rel = finite_diff_check(
            |p| {
                let mut e = enc.clone();
                let mut d = dec.clone();
                e.set_params_flat(&p[..n_enc])?;
                d.set_params_flat(&p[n_enc..])?;
                Ok(vae_step(&e, &d, x.view(), &eps, 1.0)?.0)
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-5, "relative error {rel}");
    }

    #[test]
    fn ae_drives_rank_one_reconstruction_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Array1::from_shape_fn(32, |_| 0.5 + rng.random::<f64>());
        let v = Array1::from_shape_fn(10, |_| 0.5 + rng.random::<f64>());
        let values = Array2::from_shape_fn((32, 10), |(i, j)| u[i] * v[j]);
        let data = matrix_from(values);
        let cfg = TrainConfig {
            encoder_widths: vec![8, 2],
            epochs: 400,
            batch_size: 32,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (_, trace) = train_autoencoder(&data, &cfg, AeVariant::Ae).unwrap();
        let per_entry = trace.last().unwrap() / 10.0;
        assert!(
            per_entry < 1e-2,
            "per-entry reconstruction error {per_entry} too high"
        );
    }

    #[test]
    fn both_variants_are_seed_deterministic_and_improve() {
        let cfg = SynthConfig {
            n_genes: 30,
            n_tumor: 48,
            n_normal: 12,
            n_subtypes: 3,
            seed: 40,
            ..SynthConfig::default()
        };
        let (data, _) = generate_cohort(&cfg).unwrap();
        let tc = TrainConfig {
            encoder_widths: vec![16, 4],
            epochs: 10,
            batch_size: 16,
            ..TrainConfig::default()
        };
        for variant in [AeVariant::Ae, AeVariant::Vae] {
            let (m1, t1) = train_autoencoder(&data, &tc, variant).unwrap();
            let (m2, t2) = train_autoencoder(&data, &tc, variant).unwrap();
            assert_eq!(t1, t2);
            assert_eq!(m1, m2);
            assert!(
                t1.last().unwrap() < t1.first().unwrap(),
                "{variant:?} loss did not improve: {t1:?}"
            );
        }
    }

    #[test]
    fn vae_embedding_is_the_posterior_mean_half() {
        let values = Array2::from_shape_fn((12, 8), |(i, j)| ((i * 13 + j * 7) % 10) as f64);
        let data = matrix_from(values);
        let tc = TrainConfig {
            encoder_widths: vec![6, 3],
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (model, _) = train_autoencoder(&data, &tc, AeVariant::Vae).unwrap();
        assert_eq!(model.embedding_dim(), 3);
        let e = model.encode(&data).unwrap();
        assert_eq!(e.dim(), (12, 3));
        let TrainedModel::Vae(vm) = &model else {
            panic!("wrong family")
        };
        let (head, _) = vm.encoder.forward(data.values().view(), Mode::Eval).unwrap();
        assert_eq!(e, head.slice(s![.., ..3]).to_owned());
    }
}
