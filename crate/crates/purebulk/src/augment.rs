//! Contamination-structured augmentation: synthetic-normal mixtures,
//! tumor/normal mixing, paired training views, and dilution series.
//!
//! All mixing happens in whatever space the caller's matrices live in; the
//! pipeline applies it to log2-transformed values by default (a linear-space
//! toggle exists at the CLI level).

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normal profiles drawn per synthetic mixture.
pub const DEFAULT_POOL_DRAWS: usize = 5;

/// Tumor share kept when mixing in a synthetic normal.
pub const DEFAULT_TUMOR_FRACTION: f64 = 0.27;

/// How training views are contaminated: tumor fraction `alpha`, number of
/// normal profiles per synthetic mixture, and the seed anchoring all draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSpec {
    pub alpha: f64,
    pub m_normals: usize,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            alpha: DEFAULT_TUMOR_FRACTION,
            m_normals: DEFAULT_POOL_DRAWS,
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self, pool_rows: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "tumor fraction must lie in (0,1], got {}",
                self.alpha
            )));
        }
        if self.m_normals == 0 {
            return Err(Error::InvalidInput("m_normals must be at least 1".into()));
        }
        if self.m_normals > pool_rows {
            return Err(Error::InvalidInput(format!(
                "m_normals = {} exceeds normal pool of {pool_rows} rows",
                self.m_normals
            )));
        }
        Ok(())
    }
}

/// Dilution grid: each rate is the normal share (1 − tumor content).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilutionSpec {
    pub rates: Vec<f64>,
    pub seed: u64,
}

impl DilutionSpec {
    /// Rates 0.0, 0.1, ..., 1.0.
    pub fn ten_percent_grid(seed: u64) -> Self {
        DilutionSpec {
            rates: (0..=10).map(|i| i as f64 / 10.0).collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::InvalidInput("dilution needs at least one rate".into()));
        }
        for w in self.rates.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidInput(format!(
                    "dilution rates must strictly increase, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if self.rates.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::InvalidInput(
                "dilution rates must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform draw from the probability simplex: m standard exponentials,
/// normalized.
pub fn simplex_weights(m: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Convex mixture of `m` distinct rows of the normal pool, with weights
/// uniform on the simplex.
pub fn synth_normal(
    pool: ArrayView2<'_, f64>,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    if m == 0 {
        return Err(Error::InvalidInput("mixture needs at least 1 profile".into()));
    }
    if pool.nrows() < m {
        return Err(Error::InvalidInput(format!(
            "normal pool has {} rows, need at least {m}",
            pool.nrows()
        )));
    }
    let picks = rand::seq::index::sample(rng, pool.nrows(), m);
    let weights = simplex_weights(m, rng);
    let mut out = Array1::zeros(pool.ncols());
    for (idx, w) in picks.iter().zip(weights) {
        out.scaled_add(w, &pool.row(idx));
    }
    Ok(out)
}

/// Componentwise convex combination `alpha * tumor + (1 - alpha) * normal`.
/// The endpoints return the corresponding input bit-exactly.
pub fn mix(
    tumor: ArrayView1<'_, f64>,
    normal: ArrayView1<'_, f64>,
    alpha: f64,
) -> Result<Array1<f64>> {
    if tumor.len() != normal.len() {
        return Err(Error::ShapeMismatch(format!(
            "tumor has {} genes, normal has {}",
            tumor.len(),
            normal.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "mixing coefficient must lie in [0,1], got {alpha}"
        )));
    }
    if alpha == 1.0 {
        return Ok(tumor.to_owned());
    }
    if alpha == 0.0 {
        return Ok(normal.to_owned());
    }
    let mut out = tumor.to_owned();
    out.zip_mut_with(&normal, |t, &n| *t = alpha * *t + (1.0 - alpha) * n);
    Ok(out)
}

/// Two views of one tumor profile: the tumor component is shared, the
/// synthetic-normal admixture is drawn independently per view.
pub fn make_views(
    x_tumor: ArrayView1<'_, f64>,
    pool: ArrayView2<'_, f64>,
    spec: &MixtureSpec,
    rng: &mut impl Rng,
) -> Result<(Array1<f64>, Array1<f64>)> {
    spec.validate(pool.nrows())?;
    let n1 = synth_normal(pool, spec.m_normals, rng)?;
    let n2 = synth_normal(pool, spec.m_normals, rng)?;
    let v1 = mix(x_tumor, n1.view(), spec.alpha)?;
    let v2 = mix(x_tumor, n2.view(), spec.alpha)?;
    Ok((v1, v2))
}

/// Dilute one tumor profile along the rate grid. Rate r keeps tumor share
/// 1 − r; rate 0 is the tumor itself, bit-exactly, and rate 1 is a pure
/// synthetic normal.
pub fn dilution_series(
    x_tumor: ArrayView1<'_, f64>,
    pool: ArrayView2<'_, f64>,
    spec: &DilutionSpec,
) -> Result<Vec<(f64, Array1<f64>)>> {
    dilution_series_stream(x_tumor, pool, spec, 0)
}

/// [`dilution_series`] on a dedicated RNG stream, so batches of samples can
/// be diluted independently (one stream per sample) in any order with
/// identical results.
pub fn dilution_series_stream(
    x_tumor: ArrayView1<'_, f64>,
    pool: ArrayView2<'_, f64>,
    spec: &DilutionSpec,
    stream: u64,
) -> Result<Vec<(f64, Array1<f64>)>> {
    spec.validate()?;
    if pool.nrows() < DEFAULT_POOL_DRAWS {
        return Err(Error::InvalidInput(format!(
            "normal pool has {} rows, need at least {DEFAULT_POOL_DRAWS}",
            pool.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(spec.rates.len());
    for &rate in &spec.rates {
        let vec = if rate == 0.0 {
            x_tumor.to_owned()
        } else {
            let normal = synth_normal(pool, DEFAULT_POOL_DRAWS, &mut rng)?;
            mix(x_tumor, normal.view(), 1.0 - rate)?
        };
        out.push((rate, vec));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn constant_pool(rows: usize, v: &[f64]) -> Array2<f64> {
        let mut pool = Array2::zeros((rows, v.len()));
        for mut row in pool.rows_mut() {
            row.assign(&Array1::from(v.to_vec()));
        }
        pool
    }

    #[test]
    fn simplex_weights_sum_to_one() {
        let mut r = rng(1);
        for m in [1, 2, 5, 20] {
            for _ in 0..200 {
                let w = simplex_weights(m, &mut r);
                assert!(w.iter().all(|&x| x >= 0.0));
                assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identical_pool_rows_reproduce_the_row() {
        let pool = constant_pool(5, &[1.0, 2.0, 3.0]);
        let out = synth_normal(pool.view(), 5, &mut rng(2)).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn single_draw_returns_a_pool_row() {
        let pool = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let out = synth_normal(pool.view(), 1, &mut rng(3)).unwrap();
        let is_row = pool.rows().into_iter().any(|r| r == out.view());
        assert!(is_row, "output {out:?} is not a pool row");
    }

    #[test]
    fn mixture_stays_in_convex_hull() {
        let mut r = rng(4);
        let pool = Array2::from_shape_fn((8, 6), |_| r.random::<f64>() * 10.0);
        for _ in 0..100 {
            let out = synth_normal(pool.view(), 5, &mut r).unwrap();
            for (j, &v) in out.iter().enumerate() {
                let col = pool.column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn pool_smaller_than_m_errors() {
        let pool = constant_pool(3, &[1.0]);
        assert!(synth_normal(pool.view(), 4, &mut rng(5)).is_err());
    }

    #[test]
    fn mix_endpoints_are_exact() {
        let t = array![2.0, 0.0];
        let n = array![0.0, 2.0];
        assert_eq!(mix(t.view(), n.view(), 1.0).unwrap(), t);
        assert_eq!(mix(t.view(), n.view(), 0.0).unwrap(), n);
    }

    #[test]
    fn mix_at_default_fraction() {
        let t = array![2.0, 0.0];
        let n = array![0.0, 2.0];
        let out = mix(t.view(), n.view(), 0.27).unwrap();
        assert_abs_diff_eq!(out[0], 0.54, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 1.46, epsilon = 1e-12);
    }

    #[test]
    fn mix_rejects_length_mismatch() {
        let t = array![1.0];
        let n = array![1.0, 2.0];
        assert!(mix(t.view(), n.view(), 0.5).is_err());
    }

    #[test]
    fn views_share_tumor_and_differ_in_normals() {
        let mut r = rng(6);
        let pool = Array2::from_shape_fn((10, 4), |_| r.random::<f64>() * 5.0);
        let tumor = array![9.0, 8.0, 7.0, 6.0];
        let spec = MixtureSpec {
            alpha: 0.4,
            ..MixtureSpec::default()
        };
        let (v1, v2) = make_views(tumor.view(), pool.view(), &spec, &mut r).unwrap();
        assert_ne!(v1, v2);
        // after removing the shared tumor term, both residues lie in the
        // scaled convex hull of the pool
        for v in [&v1, &v2] {
            for j in 0..4 {
                let resid = v[j] - spec.alpha * tumor[j];
                let col = pool.column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min) * (1.0 - spec.alpha);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * (1.0 - spec.alpha);
                assert!(resid >= lo - 1e-10 && resid <= hi + 1e-10);
            }
        }
    }

    #[test]
    fn identical_pool_makes_identical_views() {
        let pool = constant_pool(6, &[2.0, 4.0]);
        let tumor = array![1.0, 1.0];
        let spec = MixtureSpec::default();
        let (v1, v2) = make_views(tumor.view(), pool.view(), &spec, &mut rng(7)).unwrap();
        assert_abs_diff_eq!(v1[0], v2[0], epsilon = 1e-12);
        assert_abs_diff_eq!(v1[1], v2[1], epsilon = 1e-12);
    }

    #[test]
    fn alpha_one_returns_tumor_twice() {
        let pool = constant_pool(6, &[2.0, 4.0]);
        let tumor = array![1.0, 3.0];
        let spec = MixtureSpec {
            alpha: 1.0,
            ..MixtureSpec::default()
        };
        let (v1, v2) = make_views(tumor.view(), pool.view(), &spec, &mut rng(8)).unwrap();
        assert_eq!(v1, tumor);
        assert_eq!(v2, tumor);
    }

    #[test]
    fn views_are_reproducible() {
        let mut r = rng(9);
        let pool = Array2::from_shape_fn((10, 3), |_| r.random::<f64>());
        let tumor = array![1.0, 2.0, 3.0];
        let spec = MixtureSpec::default();
        let a = make_views(tumor.view(), pool.view(), &spec, &mut rng(10)).unwrap();
        let b = make_views(tumor.view(), pool.view(), &spec, &mut rng(10)).unwrap();
        for (x, y) in a.0.iter().zip(b.0.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.1.iter().zip(b.1.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn dilution_rate_zero_is_bit_exact_tumor() {
        let mut r = rng(11);
        let pool = Array2::from_shape_fn((8, 3), |_| r.random::<f64>());
        let tumor = array![0.1 + 0.2, 1.0 / 3.0, 7.0];
        let spec = DilutionSpec {
            rates: vec![0.0],
            seed: 1,
        };
        let out = dilution_series(tumor.view(), pool.view(), &spec).unwrap();
        assert_eq!(out.len(), 1);
        for (a, b) in out[0].1.iter().zip(tumor.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dilution_rate_one_ignores_tumor() {
        let mut r = rng(12);
        let pool = Array2::from_shape_fn((8, 3), |_| r.random::<f64>());
        let spec = DilutionSpec {
            rates: vec![1.0],
            seed: 2,
        };
        let t1 = array![1.0, 2.0, 3.0];
        let t2 = array![-5.0, 0.0, 100.0];
        let a = dilution_series(t1.view(), pool.view(), &spec).unwrap();
        let b = dilution_series(t2.view(), pool.view(), &spec).unwrap();
        assert_eq!(a[0].1, b[0].1);
    }

    #[test]
    fn dilution_midpoint_with_constant_pool() {
        let pool = constant_pool(6, &[4.0, 0.0]);
        let tumor = array![0.0, 4.0];
        let spec = DilutionSpec {
            rates: vec![0.0, 0.5, 1.0],
            seed: 3,
        };
        let out = dilution_series(tumor.view(), pool.view(), &spec).unwrap();
        assert_abs_diff_eq!(out[1].1[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1].1[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn dilution_rates_must_increase() {
        let spec = DilutionSpec {
            rates: vec![0.5, 0.5],
            seed: 0,
        };
        assert!(spec.validate().is_err());
        let spec = DilutionSpec {
            rates: vec![0.0, 1.1],
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn mixture_spec_bounds() {
        let mut spec = MixtureSpec::default();
        spec.alpha = 0.0;
        assert!(spec.validate(10).is_err());
        spec.alpha = 1.0;
        assert!(spec.validate(10).is_ok());
        spec.alpha = 0.27;
        spec.m_normals = 11;
        assert!(spec.validate(10).is_err());
    }
}
