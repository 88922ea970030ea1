//! Frechet distance between feature Gaussians and the Vendi diversity score.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imageio::GrayImage;

const SQRT_NEG_TOL: f64 = -1e-6;
const VENDI_NEG_TOL: f64 = -1e-8;

/// Deterministic image -> feature map.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, images: &[GrayImage]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

/// Sample mean and unbiased, symmetrised covariance.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(invalid(format!("need at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

fn symmetric_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

/// Square root of a PSD matrix; eigenvalues in [-1e-6, 0) are clamped.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(m);
    if let Some(&min) = eig.eigenvalues.iter().find(|&&l| l < SQRT_NEG_TOL) {
        return Err(Error::NotPsd(min));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.mean.len(), b.mean.len())));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov)?;
    let inner = &sa * &b.cov * &sa;
    let eig = symmetric_eigen(&inner);
    if let Some(&min) = eig.eigenvalues.iter().find(|&&l| l < SQRT_NEG_TOL) {
        return Err(Error::NotPsd(min));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityKernel {
    k: DMatrix<f64>,
}

impl SimilarityKernel {
    pub fn new(k: DMatrix<f64>) -> Result<Self> {
        if !k.is_square() || k.nrows() == 0 {
            return Err(Error::Shape("kernel must be a non-empty square matrix".into()));
        }
        let n = k.nrows();
        for i in 0..n {
            if (k[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("kernel diagonal entry {i} is {}", k[(i, i)])));
            }
            for j in 0..i {
                if (k[(i, j)] - k[(j, i)]).abs() > 1e-9 {
                    return Err(invalid(format!("kernel is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { k })
    }

    /// Cosine similarities clamped to [0, 1]; zero vectors are only similar
    /// to themselves.
    pub fn cosine(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        let norms: Vec<f64> = features.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let k = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                return 1.0;
            }
            let d = norms[i] * norms[j];
            if d == 0.0 {
                return 0.0;
            }
            let dot: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| a * b).sum();
            (dot / d).clamp(0.0, 1.0)
        });
        Self::new(k)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }
}

/// exp(-sum l ln l) over eigenvalues of K / n.
pub fn vendi_score(kernel: &SimilarityKernel) -> Result<f64> {
    let n = kernel.len() as f64;
    let eig = symmetric_eigen(&(kernel.matrix() / n));
    let mut entropy = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l < VENDI_NEG_TOL {
            return Err(Error::NotPsd(l));
        }
        if l > 0.0 {
            entropy -= l * l.ln();
        }
    }
    Ok(entropy.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    /// Class name, or "pooled".
    pub class: String,
    pub value: f64,
    pub n_real: usize,
    pub n_synth: usize,
    pub extractor: String,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn get(&self, metric: &str, class: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.metric == metric && e.class == class).map(|e| e.value)
    }

    pub fn with_config_hash(mut self, hash: &str) -> Self {
        for e in &mut self.entries {
            e.config_hash = Some(hash.to_string());
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }
}

pub const POOLED: &str = "pooled";

/// Per-class and pooled FID (real vs synth) and Vendi score of synth.
/// Classes present on only one side are skipped.
pub fn evaluate_generation(
    real: &BTreeMap<String, Vec<GrayImage>>,
    synth: &BTreeMap<String, Vec<GrayImage>>,
    extractor: &dyn FeatureExtractor,
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    let mut all_real = Vec::new();
    let mut all_synth = Vec::new();
    let mut push = |metric: &str, class: &str, value: f64, nr: usize, ns: usize| {
        report.entries.push(MetricEntry {
            metric: metric.into(),
            class: class.into(),
            value,
            n_real: nr,
            n_synth: ns,
            extractor: extractor.name().into(),
            config_hash: None,
        });
    };
    for (class, r) in real {
        let Some(s) = synth.get(class) else { continue };
        if r.len() < 2 || s.len() < 2 {
            return Err(invalid(format!("class `{class}` needs at least 2 real and 2 synthetic images")));
        }
        let fr = extractor.extract(r)?;
        let fs = extractor.extract(s)?;
        let fid = frechet_distance(&fit_gaussian(&fr)?, &fit_gaussian(&fs)?)?;
        let vs = vendi_score(&SimilarityKernel::cosine(&fs)?)?;
        push("fid", class, fid, r.len(), s.len());
        push("vendi", class, vs, 0, s.len());
        all_real.extend(fr);
        all_synth.extend(fs);
    }
    if all_real.is_empty() {
        return Err(invalid("no class has both real and synthetic images"));
    }
    let fid = frechet_distance(&fit_gaussian(&all_real)?, &fit_gaussian(&all_synth)?)?;
    let vs = vendi_score(&SimilarityKernel::cosine(&all_synth)?)?;
    push("fid", POOLED, fid, all_real.len(), all_synth.len());
    push("vendi", POOLED, vs, 0, all_synth.len());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_1d(mu: f64, var: f64) -> GaussianStats {
        GaussianStats { mean: DVector::from_element(1, mu), cov: DMatrix::from_element(1, 1, var), n: 2 }
    }

    #[test]
    fn fit_examples() {
        let s = fit_gaussian(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
        let z = fit_gaussian(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(z.cov.iter().all(|v| *v == 0.0));
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
    }

    #[test]
    fn frechet_closed_forms() {
        assert!((frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(3.0, 1.0)).unwrap() - 9.0).abs() < 1e-8);
        let a = GaussianStats { mean: DVector::zeros(2), cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])), n: 2 };
        let b = GaussianStats { mean: DVector::zeros(2), cov: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])), n: 2 };
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-8);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        assert!(frechet_distance(&a, &stats_1d(0.0, 1.0)).is_err());
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let bad = GaussianStats { mean: DVector::zeros(1), cov: DMatrix::from_element(1, 1, -1.0), n: 2 };
        assert!(matches!(frechet_distance(&bad, &stats_1d(0.0, 1.0)), Err(Error::NotPsd(_))));
    }

    #[test]
    fn vendi_examples() {
        let ones = SimilarityKernel::new(DMatrix::from_element(5, 5, 1.0)).unwrap();
        assert!((vendi_score(&ones).unwrap() - 1.0).abs() < 1e-9);
        let eye = SimilarityKernel::new(DMatrix::identity(5, 5)).unwrap();
        assert!((vendi_score(&eye).unwrap() - 5.0).abs() < 1e-9);
        let half = SimilarityKernel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let want = (-(0.75f64 * 0.75f64.ln()) - 0.25 * 0.25f64.ln()).exp();
        assert!((vendi_score(&half).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.7548).abs() < 1e-4);
    }

    #[test]
    fn kernel_validation() {
        assert!(SimilarityKernel::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0])).is_err());
        assert!(SimilarityKernel::new(DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 1.0])).is_err());
        // pairwise similar but jointly impossible: not PSD
        let k = SimilarityKernel::new(DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0])).unwrap();
        assert!(matches!(vendi_score(&k), Err(Error::NotPsd(_))));
        let c = SimilarityKernel::cosine(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(c.matrix()[(0, 1)], 0.0);
        assert_eq!(c.matrix()[(2, 2)], 1.0);
    }
}
