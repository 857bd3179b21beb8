//! Proxy-scale metrics. Features come from the frozen proxy classifier
//! (spatially pooled last stage), so the numbers are only comparable within
//! this crate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autoenc::Tokenizer;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::ProxyNet;

/// Default number of generated samples for generation metrics.
pub const DEFAULT_GFID_SAMPLES: usize = 2048;

/// Mean and covariance of a feature sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
    /// Covariance was shrunk toward a scaled identity because there were
    /// fewer samples than feature dimensions.
    pub shrunk: bool,
}

impl FeatureMoments {
    /// Moments of `rows` (n x d, row-major). With `n <= d` the covariance is
    /// shrunk by `d / (n + d)` toward `tr(S)/d * I`.
    pub fn from_rows(rows: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 || rows.is_empty() {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", rows.len())));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature".into()));
        }
        let n = rows.len() / dim;
        let x = DMatrix::from_row_slice(n, dim, rows);
        let mean = DVector::from_iterator(dim, x.column_iter().map(|c| c.mean()));
        let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
        let denom = (n.max(2) - 1) as f64;
        let mut cov = (centered.transpose() * &centered) / denom;
        cov = (&cov + cov.transpose()) * 0.5;
        let shrunk = n <= dim;
        if shrunk {
            log::warn!("{n} samples for {dim} feature dims; using a shrinkage covariance");
            let lambda = dim as f64 / (n + dim) as f64;
            let target = cov.trace() / dim as f64;
            cov = cov * (1.0 - lambda) + DMatrix::identity(dim, dim) * (lambda * target);
        }
        Ok(Self {
            mean,
            cov,
            count: n,
            shrunk,
        })
    }

    pub fn from_tensor(features: &Tensor) -> Result<Self> {
        let (_, d) = features.dims2()?;
        let v = features.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::from_rows(&v, d)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`. The trace of the
/// cross term is taken through the similar symmetric matrix
/// `S_a^{1/2} S_b S_a^{1/2}`.
pub fn frechet_distance(a: &FeatureMoments, b: &FeatureMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("moments of dimension {} and {}", a.dim(), b.dim())));
    }
    for m in [a, b] {
        if m.mean.iter().chain(m.cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite moments".into()));
        }
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = sqrtm_psd(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    // rounding can push an exact match a hair below zero
    Ok(d.max(0.0))
}

/// Pooled proxy features of `images` `(n, 3, s, s)`, in batches.
pub fn proxy_features(net: &ProxyNet, images: &Tensor) -> Result<Tensor> {
    let n = images.dim(0)?;
    let mut parts = Vec::new();
    for start in (0..n).step_by(128) {
        let len = 128.min(n - start);
        parts.push(net.features(&images.narrow(0, start, len)?)?.pooled()?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn dataset_features(net: &ProxyNet, data: &Dataset, map: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let mut parts = Vec::new();
    for start in (0..data.len()).step_by(128) {
        let idx: Vec<usize> = (start..(start + 128).min(data.len())).collect();
        let x = map(&data.batch(&idx, None, DType::F32)?)?;
        parts.push(net.features(&x)?.pooled()?.detach());
    }
    if parts.is_empty() {
        return Err(Error::Contract("features of an empty split".into()));
    }
    Ok(Tensor::cat(&parts, 0)?)
}

pub fn dataset_moments(net: &ProxyNet, data: &Dataset) -> Result<FeatureMoments> {
    FeatureMoments::from_tensor(&dataset_features(net, data, |x| Ok(x.clone()))?)
}

/// Frechet distance between proxy features of a split and of its
/// reconstructions.
pub fn proxy_rfid(net: &ProxyNet, tok: &Tokenizer, data: &Dataset) -> Result<f64> {
    let real = dataset_moments(net, data)?;
    let recon = FeatureMoments::from_tensor(&dataset_features(net, data, |x| tok.reconstruct(x))?)?;
    frechet_distance(&real, &recon)
}

/// Decodes raster token sequences into images, in batches.
pub fn decode_sequences(tok: &Tokenizer, tokens: &[u32]) -> Result<Tensor> {
    let n = tok.config.tokens_per_image();
    let mut parts = Vec::new();
    for chunk in tokens.chunks(128 * n) {
        parts.push(tok.decode_tokens(chunk)?.detach());
    }
    if parts.is_empty() {
        return Err(Error::Contract("no token sequences to decode".into()));
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Frechet distance between real-split features and features of decoded
/// token samples.
pub fn proxy_gfid(net: &ProxyNet, tok: &Tokenizer, real: &FeatureMoments, samples: &[u32]) -> Result<f64> {
    let images = decode_sequences(tok, samples)?;
    frechet_distance(real, &FeatureMoments::from_tensor(&proxy_features(net, &images)?)?)
}

/// `exp(E_x KL(p(y|x) || p(y)))` over rows of class posteriors.
pub fn inception_score(posteriors: &[Vec<f64>]) -> Result<f64> {
    let first = posteriors.first().ok_or_else(|| Error::Contract("inception score of no samples".into()))?;
    let c = first.len();
    let n = posteriors.len() as f64;
    let mut marginal = vec![0.0; c];
    for p in posteriors {
        if p.len() != c {
            return Err(Error::Shape("posteriors of different class counts".into()));
        }
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / n;
        }
    }
    let mut kl = 0.0;
    for p in posteriors {
        for (v, m) in p.iter().zip(&marginal) {
            if *v > 0.0 {
                kl += v * (v.ln() - m.ln()) / n;
            }
        }
    }
    Ok(kl.exp())
}

/// Inception score of `images` under the proxy classifier.
pub fn proxy_is(net: &ProxyNet, images: &Tensor) -> Result<f64> {
    let n = images.dim(0)?;
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(128) {
        let len = 128.min(n - start);
        let logits = net.logits(&images.narrow(0, start, len)?)?.to_dtype(DType::F64)?;
        rows.extend(candle_nn::ops::softmax(&logits, 1)?.to_vec2::<f64>()?);
    }
    inception_score(&rows)
}

/// Per-run series aligned on step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CurveTable {
    pub runs: Vec<String>,
    pub steps: Vec<u64>,
    /// `values[i][j]`: run `j` at `steps[i]`.
    pub values: Vec<Vec<Option<f64>>>,
    /// Lines that were not valid records.
    pub skipped: usize,
}

impl CurveTable {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for r in &self.runs {
            out.push(',');
            out.push_str(r);
        }
        out.push('\n');
        for (s, row) in self.steps.iter().zip(&self.values) {
            out.push_str(&s.to_string());
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Aligns the `val_loss` records of several runs' metric logs. Each input
/// is `(run name, log text)`.
pub fn export_curves(logs: &[(String, String)]) -> CurveTable {
    let mut series: Vec<BTreeMap<u64, f64>> = Vec::new();
    let mut steps = BTreeSet::new();
    let mut skipped = 0;
    for (_, text) in logs {
        let mut s = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let Ok(v) = serde_json::from_str::<Value>(line) else {
                skipped += 1;
                continue;
            };
            if v["kind"] != "val_loss" {
                continue;
            }
            match (v["step"].as_u64(), v["val_loss"].as_f64()) {
                (Some(step), Some(loss)) => {
                    s.insert(step, loss);
                    steps.insert(step);
                }
                _ => skipped += 1,
            }
        }
        series.push(s);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} corrupt metric lines");
    }
    let steps: Vec<u64> = steps.into_iter().collect();
    if steps.is_empty() {
        log::warn!("no validation-loss records found");
    }
    let values = steps
        .iter()
        .map(|st| series.iter().map(|s| s.get(st).copied()).collect())
        .collect();
    CurveTable {
        runs: logs.iter().map(|(n, _)| n.clone()).collect(),
        steps,
        values,
        skipped,
    }
}

/// One line of the results ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub run_id: String,
    pub metric: String,
    pub value: f64,
    pub fingerprints: BTreeMap<String, String>,
}

/// Appends `rec` as one JSON line.
pub fn append_result(path: &Path, rec: &ResultRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let line = serde_json::to_string(rec).map_err(|e| Error::Serde(e.to_string()))?;
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Serde(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn moments(mean: &[f64], cov: &[f64]) -> FeatureMoments {
        let d = mean.len();
        FeatureMoments {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_row_slice(d, d, cov),
            count: 1000,
            shrunk: false,
        }
    }

    #[test]
    fn closed_form_cases() {
        // 1-D: (0-1)^2 + 1 + 4 - 2*sqrt(1*4) = 2
        let a = moments(&[0.0], &[1.0]);
        let b = moments(&[1.0], &[4.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-6);
        let c = moments(&[1.0, 2.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&c, &c).unwrap().abs() < 1e-6);
        let d = moments(&[4.0, -2.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!((frechet_distance(&c, &d).unwrap() - 25.0).abs() < 1e-6);
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn sample_moments_and_shrinkage() {
        let rows = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        let m = FeatureMoments::from_rows(&rows, 2).unwrap();
        assert_eq!(m.mean.as_slice(), &[3.0, 5.0]);
        assert!((m.cov[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((m.cov[(0, 1)] - 7.0).abs() < 1e-12);
        assert!(!m.shrunk);
        let few = FeatureMoments::from_rows(&[1.0, 2.0, 3.0, 0.0, 1.0, 1.0], 3).unwrap();
        assert!(few.shrunk);
        assert!(FeatureMoments::from_rows(&[1.0, f64::NAN], 2).is_err());
    }

    fn psd(d: usize, raw: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(d, d, &raw[..d * d]);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.1
    }

    proptest! {
        #[test]
        fn frechet_symmetric_and_zero_on_self(raw_a in prop::collection::vec(-2.0f64..2.0, 9), raw_b in prop::collection::vec(-2.0f64..2.0, 9), mu in prop::collection::vec(-3.0f64..3.0, 6)) {
            let a = FeatureMoments { mean: DVector::from_column_slice(&mu[..3]), cov: psd(3, &raw_a), count: 100, shrunk: false };
            let b = FeatureMoments { mean: DVector::from_column_slice(&mu[3..]), cov: psd(3, &raw_b), count: 100, shrunk: false };
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()));
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn inception_score_within_bounds(raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..30)) {
            let rows: Vec<Vec<f64>> = raw.into_iter().map(|r| {
                let s: f64 = r.iter().sum::<f64>() + 1e-12;
                r.into_iter().map(|v| v / s).collect()
            }).collect();
            let is = inception_score(&rows).unwrap();
            prop_assert!(is >= 1.0 - 1e-9 && is <= 5.0 + 1e-9);
        }
    }

    #[test]
    fn inception_score_cases() {
        let certain_same = vec![vec![0.0, 1.0, 0.0]; 6];
        assert!((inception_score(&certain_same).unwrap() - 1.0).abs() < 1e-12);
        let uniform = vec![vec![1.0 / 3.0; 3]; 6];
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let separated: Vec<Vec<f64>> = (0..9).map(|i| (0..3).map(|c| if c == i % 3 { 1.0 } else { 0.0 }).collect()).collect();
        assert!((inception_score(&separated).unwrap() - 3.0).abs() < 1e-12);
        assert!(inception_score(&[]).is_err());
    }

    #[test]
    fn curves_align_and_skip_corrupt_lines() {
        let a = "{\"kind\":\"val_loss\",\"step\":10,\"val_loss\":2.0}\n{\"kind\":\"val_loss\",\"step\":20,\"val_loss\":1.5}\n";
        let b = "{\"kind\":\"ar_train\",\"step\":0}\nnot json\n{\"kind\":\"val_loss\",\"step\":10,\"val_loss\":2.5}\n{\"kind\":\"val_loss\",\"step\":20,\"val_loss\":1.0}\n";
        let t = export_curves(&[("a".into(), a.into()), ("b".into(), b.into())]);
        assert_eq!(t.steps, vec![10, 20]);
        assert_eq!(t.values, vec![vec![Some(2.0), Some(2.5)], vec![Some(1.5), Some(1.0)]]);
        assert_eq!(t.skipped, 1);
        assert!(t.values.windows(2).all(|w| w[1][0] < w[0][0]));
        assert_eq!(t.to_csv().lines().next().unwrap(), "step,a,b");
        let empty = export_curves(&[("a".into(), String::new())]);
        assert!(empty.is_empty());
    }

    #[test]
    fn results_ledger_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.jsonl");
        let r = ResultRecord {
            run_id: "r1".into(),
            metric: "proxy_rfid".into(),
            value: 1.5,
            fingerprints: BTreeMap::from([("tokenizer".to_string(), "abc".to_string())]),
        };
        append_result(&p, &r).unwrap();
        append_result(&p, &r).unwrap();
        assert_eq!(read_results(&p).unwrap(), vec![r.clone(), r]);
    }

    #[test]
    fn rfid_zero_on_perfect_and_grows_with_noise() {
        use crate::losses::{ProxyCheckpoint, ProxyConfig};
        let cfg = ProxyConfig {
            image_size: 16,
            channels: [4, 4, 8, 8, 8],
            classes: 10,
        };
        let mut ck = ProxyCheckpoint::init(&cfg, 3, DType::F32).unwrap();
        ck.frozen = true;
        let net = ck.frozen_network().unwrap();
        let data = crate::data::toy_dataset(64, 16, 1).unwrap();
        let x = data.all(DType::F32).unwrap();
        let real = FeatureMoments::from_tensor(&proxy_features(&net, &x).unwrap()).unwrap();
        let same = FeatureMoments::from_tensor(&proxy_features(&net, &x).unwrap()).unwrap();
        assert!(frechet_distance(&real, &same).unwrap() < 1e-6);
        let mut prev = 0.0;
        for sigma in [0.1, 0.3, 0.6] {
            let noise = (Tensor::randn_like(&x, 0.0, 1.0).unwrap() * sigma).unwrap();
            let noisy = (&x + noise).unwrap().clamp(-1.0, 1.0).unwrap();
            let f = frechet_distance(&real, &FeatureMoments::from_tensor(&proxy_features(&net, &noisy).unwrap()).unwrap()).unwrap();
            assert!(f > prev, "noise {sigma}: {f} <= {prev}");
            prev = f;
        }
        let is = proxy_is(&net, &x).unwrap();
        assert!((1.0..=10.0).contains(&is));
    }
}
