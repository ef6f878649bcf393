//! Principal components via an exact eigendecomposition. The usual shape
//! here is far more genes than samples, so the fit works on whichever of
//! the covariance or Gram matrix is smaller; both routes yield the same
//! components up to floating-point error.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionMatrix, GeneId};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::model::TrainedModel;

/// Mean vector plus top-d orthonormal components (genes x d), with the
/// variance each component explains (the covariance eigenvalues, n-1
/// convention). Component signs are fixed so the largest-magnitude loading
/// is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Array1<f64>,
    pub components: Array2<f64>,
    pub explained_variance: Array1<f64>,
}

impl Pca {
    pub fn fit(x: ArrayView2<'_, f64>, d: usize) -> Result<Pca> {
        let (n, g) = x.dim();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 samples to fit, got {n}"
            )));
        }
        let max_d = (n - 1).min(g);
        if d == 0 || d > max_d {
            return Err(Error::InvalidInput(format!(
                "requested {d} components, but {n} samples x {g} genes supports 1..={max_d}"
            )));
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let centered = &x - &mean;
        let denom = (n - 1) as f64;

        let (components, explained_variance) = if g <= n {
            let cov = centered.t().dot(&centered) / denom;
            let (eigenvalues, eigenvectors) = symmetric_eigen(&cov)?;
            let comps = eigenvectors.slice(ndarray::s![.., ..d]).to_owned();
            let vars = eigenvalues.slice(ndarray::s![..d]).mapv(|v| v.max(0.0));
            (comps, vars)
        } else {
            // Gram route: eigenvectors u of X Xᵀ map to components Xᵀu/√μ.
            let gram = centered.dot(&centered.t());
            let (mu, u) = symmetric_eigen(&gram)?;
            let tol = 1e-12 * mu[0].max(1.0);
            let mut comps = Array2::zeros((g, d));
            let mut vars = Array1::zeros(d);
            for k in 0..d {
                if mu[k] <= tol {
                    return Err(Error::Numerical(format!(
                        "component {k} exceeds the data rank"
                    )));
                }
                let w = centered.t().dot(&u.column(k)) / mu[k].sqrt();
                comps.column_mut(k).assign(&w);
                vars[k] = mu[k] / denom;
            }
            fix_signs(&mut comps);
            (comps, vars)
        };
        Ok(Pca {
            mean,
            components,
            explained_variance,
        })
    }

    /// Project rows onto the components: (x - mean) W.
    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        let centered = &x - &self.mean;
        Ok(centered.dot(&self.components))
    }
}

/// Make the largest-magnitude entry of each column positive (ties broken by
/// the first such entry), so fits are reproducible across routes.
fn fix_signs(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        let mut best = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
}

/// PCA baseline bound to a gene order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub genes: Vec<GeneId>,
    pub pca: Pca,
}

/// Fit the PCA baseline on every sample row of `data`.
pub fn pca_fit(data: &ExpressionMatrix, d: usize) -> Result<TrainedModel> {
    let pca = Pca::fit(data.values().view(), d)?;
    Ok(TrainedModel::Pca(PcaModel {
        genes: data.genes().to_vec(),
        pca,
    }))
}
