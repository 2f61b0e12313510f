//! Post-processing: certified-accuracy curves, latency, linear probes and
//! the Fréchet distance between representation sets.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::certify::CertificationRecord;
use crate::data::Dataset;
use crate::error::{invalid, shape_err, Error, Result};
use crate::finetune::{add_noise, argmax};
use crate::model::{ModelParams, TIME_FLOOR};
use crate::numerics::{matmul, SeededRng, Tensor};

/// Fraction of records that are correct, not abstained, and certified at
/// radius at least `r`, for each `r` in `radii`.
pub fn certified_accuracy(records: &[CertificationRecord], radii: &[f64]) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(invalid!("certified accuracy of an empty record set"));
    }
    let total = records.len() as f64;
    Ok(radii
        .iter()
        .map(|&r| {
            records
                .iter()
                .filter(|x| x.correct && !x.abstained() && x.radius >= r)
                .count() as f64
                / total
        })
        .collect())
}

/// Certified accuracy per noise level over a shared radius grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifiedAccuracyTable {
    pub radii: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// `accuracy[i][j]` is for `sigmas[i]` at `radii[j]`.
    pub accuracy: Vec<Vec<f64>>,
}

impl CertifiedAccuracyTable {
    pub fn build(runs: &[(f64, &[CertificationRecord])], radii: &[f64]) -> Result<Self> {
        let accuracy = runs
            .iter()
            .map(|(_, recs)| certified_accuracy(recs, radii))
            .collect::<Result<_>>()?;
        Ok(Self {
            radii: radii.to_vec(),
            sigmas: runs.iter().map(|(s, _)| *s).collect(),
            accuracy,
        })
    }

    /// One row per radius: `r,sigma=<s1>,sigma=<s2>,...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["r".to_string()];
        header.extend(self.sigmas.iter().map(|s| format!("sigma={s}")));
        let fmt_err = |e: csv::Error| Error::Format(format!("curve csv: {e}"));
        w.write_record(&header).map_err(fmt_err)?;
        for (j, r) in self.radii.iter().enumerate() {
            let mut row = vec![r.to_string()];
            row.extend(self.accuracy.iter().map(|acc| acc[j].to_string()));
            w.write_record(&row).map_err(fmt_err)?;
        }
        w.flush().map_err(|e| Error::Format(format!("curve csv: {e}")))
    }
}

/// `0, step, 2 step, ..., <= max`.
pub fn radius_grid(max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(max >= 0.0) || !max.is_finite() {
        return Err(invalid!("radius grid needs step > 0 and max >= 0"));
    }
    let count = (max / step + 1e-9).floor() as usize;
    // Rounding keeps printed radii free of accumulated representation error.
    Ok((0..=count).map(|i| (i as f64 * step * 1e12).round() / 1e12).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub p50: f64,
    pub p95: f64,
    pub per_noise_ms: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Wall-clock statistics; `n` is the number of smoothing noises per record.
pub fn latency_summary(records: &[CertificationRecord], n: u64) -> Result<LatencySummary> {
    if records.is_empty() || n == 0 {
        return Err(invalid!("latency summary needs records and n > 0"));
    }
    let mut ms: Vec<f64> = records.iter().map(|r| r.ms).collect();
    ms.sort_by(f64::total_cmp);
    let mean_ms = ms.iter().sum::<f64>() / ms.len() as f64;
    Ok(LatencySummary {
        mean_ms,
        p50: percentile(&ms, 0.5),
        p95: percentile(&ms, 0.95),
        per_noise_ms: mean_ms / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.1 }
    }
}

/// Multinomial logistic head `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub w: Tensor,
    pub b: Vec<f64>,
}

impl LinearHead {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = matmul(x, &self.w)?;
        let c = self.b.len();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v += self.b[i % c];
        }
        Ok(z)
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(shape_err!("{} rows for {} labels", x.rows(), labels.len()));
        }
        let z = self.logits(x)?;
        let hits = (0..labels.len()).filter(|&i| argmax(z.row(i)) == labels[i]).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Full-batch gradient descent on the mean cross-entropy from a zero
/// initialization, so the fit is a deterministic function of the inputs.
pub fn fit_linear_probe(reps: &Tensor, labels: &[usize], num_classes: usize, config: &ProbeConfig) -> Result<LinearHead> {
    if reps.rank() != 2 || reps.rows() != labels.len() || labels.is_empty() {
        return Err(shape_err!("probe needs [N, D] reps with N labels"));
    }
    if labels.iter().any(|&l| l >= num_classes) {
        return Err(invalid!("probe label outside 0..{num_classes}"));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(invalid!("probe training set has a single class"));
    }
    let (n, d, c) = (reps.rows(), reps.last_dim(), num_classes);
    let mut head = LinearHead {
        w: Tensor::zeros(&[d, c]),
        b: vec![0.0; c],
    };
    let xt = transpose(reps);
    for _ in 0..config.steps {
        let mut g = head.logits(reps)?;
        for i in 0..n {
            let row = &mut g.data_mut()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s * n as f64;
            }
            row[labels[i]] -= 1.0 / n as f64;
        }
        let gw = matmul(&xt, &g)?;
        for (w, dw) in head.w.data_mut().iter_mut().zip(gw.data()) {
            *w -= config.lr * dw;
        }
        for j in 0..c {
            let gb: f64 = (0..n).map(|i| g.data()[i * c + j]).sum();
            head.b[j] -= config.lr * gb;
        }
    }
    Ok(head)
}

fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.last_dim());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("same element count")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub sigma: f64,
    pub accuracy: f64,
}

fn represent_all(params: &ModelParams, data: &Dataset, sigma: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let t = sigma.max(TIME_FLOOR);
    let mut out = Vec::with_capacity(data.len() * params.config.width);
    let ids: Vec<usize> = (0..data.len()).collect();
    for chunk in ids.chunks(256) {
        let mut x = data.images_at(chunk)?;
        if sigma > 0.0 {
            x = add_noise(&x, sigma, rng)?;
        }
        out.extend_from_slice(params.represent(&x, &vec![t; chunk.len()])?.data());
    }
    Tensor::new(vec![data.len(), params.config.width], out)
}

/// Trains a linear head on clean representations at `t_0` and reports
/// accuracy on `eval` images noised at each `sigma` and encoded at `t = sigma`
/// (`t_0` for `sigma = 0`).
pub fn probe_model(
    params: &ModelParams,
    train: &Dataset,
    eval: &Dataset,
    sigmas: &[f64],
    seed: u64,
    config: &ProbeConfig,
) -> Result<Vec<ProbePoint>> {
    if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return Err(invalid!("probe noise levels must be finite and nonnegative"));
    }
    let mut rng = SeededRng::new(seed);
    let reps = represent_all(params, train, 0.0, &mut rng)?;
    let head = fit_linear_probe(&reps, train.labels(), train.num_classes().max(eval.num_classes()), config)?;
    sigmas
        .iter()
        .map(|&sigma| {
            let eval_reps = represent_all(params, eval, sigma, &mut rng)?;
            Ok(ProbePoint {
                sigma,
                accuracy: head.accuracy(&eval_reps, eval.labels())?,
            })
        })
        .collect()
}

/// Fitted mean and covariance; shrinkage `1e-6 I` is added when there are
/// fewer than `4 * dim` samples.
fn moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.rank() != 2 || x.rows() < 2 {
        return Err(shape_err!("need at least two [N, D] samples for a covariance"));
    }
    let (n, d) = (x.rows(), x.last_dim());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    if n < 4 * d {
        cov += DMatrix::identity(d, d) * 1e-6;
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two `[N, D]` sample sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The trace of the
/// cross term is computed as `tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`.
pub fn representation_fd(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.last_dim() != b.last_dim() {
        return Err(shape_err!("fd between {:?} and {:?}", a.shape(), b.shape()));
    }
    let (mu_a, s_a) = moments(a)?;
    let (mu_b, s_b) = moments(b)?;
    Ok(gaussian_fd(&mu_a, &s_a, &mu_b, &s_b))
}

pub(crate) fn gaussian_fd(mu_a: &DVector<f64>, s_a: &DMatrix<f64>, mu_b: &DVector<f64>, s_b: &DMatrix<f64>) -> f64 {
    let root_a = psd_sqrt(s_a);
    let inner = &root_a * s_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    (diff.norm_squared() + s_a.trace() + s_b.trace() - 2.0 * cross).max(0.0)
}

/// Representations of `x_{t_N}` and `x_{t_0}` for the same images and
/// noise, and the distance between the two sets.
pub fn trajectory_endpoint_fd(params: &ModelParams, data: &Dataset, t_n: f64, t_0: f64, seed: u64) -> Result<f64> {
    let ids: Vec<usize> = (0..data.len()).collect();
    let x0 = data.images_at(&ids)?;
    let mut eps = vec![0.0; x0.len()];
    SeededRng::new(seed).fill_gaussian(&mut eps);
    let eps = Tensor::new(x0.shape().to_vec(), eps)?;
    let at = |t: f64| -> Result<Tensor> {
        let x = x0.zip_map(&eps, |x, e| x + t * e)?;
        params.represent(&x, &vec![t; ids.len()])
    };
    representation_fd(&at(t_n)?, &at(t_0)?)
}

/// Everything the `evaluate` command reports for one record file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub records: usize,
    pub abstained: usize,
    pub clean_accuracy: f64,
    pub radii: Vec<f64>,
    pub certified_accuracy: Vec<f64>,
    pub average_certified_radius: f64,
    pub latency: LatencySummary,
}

pub fn summarize(records: &[CertificationRecord], radii: &[f64], n: u64) -> Result<EvaluationSummary> {
    let curve = certified_accuracy(records, radii)?;
    let clean = certified_accuracy(records, &[0.0])?[0];
    let acr = records
        .iter()
        .filter(|r| r.correct)
        .map(|r| r.radius)
        .sum::<f64>()
        / records.len() as f64;
    Ok(EvaluationSummary {
        records: records.len(),
        abstained: records.iter().filter(|r| r.abstained()).count(),
        clean_accuracy: clean,
        radii: radii.to_vec(),
        certified_accuracy: curve,
        average_certified_radius: acr,
        latency: latency_summary(records, n)?,
    })
}
