//! Randomized-smoothing certification.
//!
//! Smoothing noise is addressed by `(seed, sample_id, phase, draw)`: each
//! sample and phase owns a ChaCha substream, and draw `j` starts at a fixed
//! word offset inside it. Histograms therefore do not depend on the batch
//! size or on the order in which batches are evaluated.

mod classifier;
mod record;
pub mod stats;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use classifier::{BaseClassifier, ConstantClassifier, HalfspaceOracle, ModelClassifier};
pub use record::{read_records_csv, write_records_csv, CertificationRecord};

use crate::data::Dataset;
use crate::error::{invalid, shape_err, Result};
use crate::numerics::SeededRng;
use stats::{binomial_test_half, clopper_pearson_lower, radius_one_sided};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub sigma: f64,
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub batch: usize,
    /// When false, `ms` is recorded as 0 so records are reproducible byte
    /// for byte.
    pub record_timing: bool,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            n0: 100,
            n: 10_000,
            alpha: 0.001,
            batch: 1000,
            record_timing: true,
        }
    }
}

impl CertifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(invalid!("certification noise level must be positive, got {}", self.sigma));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.n0 == 0 || self.n < self.n0 {
            return Err(invalid!("need 1 <= n0 <= n, got n0={} n={}", self.n0, self.n));
        }
        if self.batch == 0 {
            return Err(invalid!("batch must be positive"));
        }
        Ok(())
    }
}

/// Which independent block of smoothing noise a call consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Selection = 0,
    Estimation = 1,
    Prediction = 2,
}

/// Address of one sample's smoothing noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub sample_id: u64,
    pub phase: Phase,
}

impl NoiseKey {
    pub fn new(seed: u64, sample_id: u64, phase: Phase) -> Self {
        Self { seed, sample_id, phase }
    }

    /// Noise vectors for draws `first..first + count`, back to back.
    pub fn draws(&self, dim: usize, first: u64, count: usize, out: &mut Vec<f64>) {
        let mut rng = SeededRng::substream(self.seed, self.sample_id, self.phase as u64);
        // A Gaussian pair costs two words; odd dimensions waste one output.
        let words_per_draw = 2 * dim.div_ceil(2) as u64;
        out.clear();
        out.resize(dim * count, 0.0);
        for (j, chunk) in out.chunks_exact_mut(dim).enumerate() {
            rng.seek_u64((first + j as u64) * words_per_draw);
            rng.fill_gaussian(chunk);
        }
    }
}

/// Histogram of `f(x + sigma * eps)` over `n` draws of `eps`.
pub fn sample_counts<F: BaseClassifier + ?Sized>(
    f: &F,
    x: &[f64],
    sigma: f64,
    n: u64,
    key: NoiseKey,
    batch: usize,
) -> Result<Vec<u64>> {
    if n == 0 || batch == 0 {
        return Err(invalid!("sample count and batch must be positive"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid!("noise level must be finite and nonnegative, got {sigma}"));
    }
    let d = f.input_len();
    if x.len() != d {
        return Err(shape_err!("input of {} for a classifier over {d}", x.len()));
    }
    let mut counts = vec![0u64; f.num_classes()];
    let (mut noise, mut classes) = (Vec::new(), Vec::with_capacity(batch));
    let mut done = 0u64;
    while done < n {
        let size = (n - done).min(batch as u64) as usize;
        key.draws(d, done, size, &mut noise);
        for (i, v) in noise.iter_mut().enumerate() {
            *v = x[i % d] + sigma * *v;
        }
        classes.clear();
        f.classify_batch(&noise, &mut classes)?;
        for &c in &classes {
            if c >= counts.len() {
                return Err(invalid!("classifier returned class {c} of {}", counts.len()));
            }
            counts[c] += 1;
        }
        done += size as u64;
    }
    Ok(counts)
}

/// Index of the largest count; ties go to the lowest index.
pub fn top_class(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn top_two(counts: &[u64]) -> (usize, Option<usize>) {
    let a = top_class(counts);
    let b = (0..counts.len()).filter(|&i| i != a).fold(None, |best: Option<usize>, i| match best {
        Some(j) if counts[j] >= counts[i] => Some(j),
        _ => Some(i),
    });
    (a, b)
}

/// Selection with `n0` draws, a one-sided lower bound on the selected
/// class from `n` fresh draws, and the radius `sigma * Phi^-1(pA_lower)`.
pub fn certify<F: BaseClassifier + ?Sized>(
    f: &F,
    x: &[f64],
    label: usize,
    sample_id: u64,
    config: &CertifyConfig,
    seed: u64,
) -> Result<CertificationRecord> {
    config.validate()?;
    let start = Instant::now();
    let select = NoiseKey::new(seed, sample_id, Phase::Selection);
    let c_a = top_class(&sample_counts(f, x, config.sigma, config.n0, select, config.batch)?);
    let estimate = NoiseKey::new(seed, sample_id, Phase::Estimation);
    let counts = sample_counts(f, x, config.sigma, config.n, estimate, config.batch)?;
    let pa_lower = clopper_pearson_lower(counts[c_a], config.n, config.alpha)?;
    let (predicted, radius) = if pa_lower > 0.5 {
        (Some(c_a), radius_one_sided(config.sigma, pa_lower)?)
    } else {
        (None, 0.0)
    };
    let ms = if config.record_timing {
        start.elapsed().as_secs_f64() * 1e3
    } else {
        0.0
    };
    Ok(CertificationRecord {
        sample_id,
        label,
        predicted,
        pa_lower,
        radius,
        ms,
        correct: predicted == Some(label),
    })
}

/// Smoothed prediction: the top class if a two-sided binomial test against
/// the runner-up rejects equality at level `alpha`, else `None`.
pub fn predict<F: BaseClassifier + ?Sized>(
    f: &F,
    x: &[f64],
    sample_id: u64,
    config: &CertifyConfig,
    seed: u64,
) -> Result<Option<usize>> {
    config.validate()?;
    let key = NoiseKey::new(seed, sample_id, Phase::Prediction);
    let counts = sample_counts(f, x, config.sigma, config.n, key, config.batch)?;
    decide_prediction(&counts, config.alpha)
}

/// The test behind [`predict`], on a given histogram.
pub fn decide_prediction(counts: &[u64], alpha: f64) -> Result<Option<usize>> {
    let (a, b) = top_two(counts);
    let n_a = counts[a];
    let n_b = b.map_or(0, |b| counts[b]);
    if n_a + n_b == 0 {
        return Err(invalid!("empty histogram"));
    }
    Ok((binomial_test_half(n_a, n_a + n_b)? <= alpha).then_some(a))
}

/// Certifies the dataset entries `ids`, using each index as its sample id.
pub fn certify_dataset<F: BaseClassifier + ?Sized>(
    f: &F,
    data: &Dataset,
    ids: &[usize],
    config: &CertifyConfig,
    seed: u64,
    mut on_record: impl FnMut(&CertificationRecord) -> Result<()>,
) -> Result<Vec<CertificationRecord>> {
    let mut out = Vec::with_capacity(ids.len());
    for &i in ids {
        if i >= data.len() {
            return Err(invalid!("sample {i} outside a dataset of {}", data.len()));
        }
        let r = certify(f, data.image(i), data.labels()[i], i as u64, config, seed)?;
        on_record(&r)?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sigma: f64, n: u64) -> CertifyConfig {
        CertifyConfig {
            sigma,
            n,
            n0: 100.min(n),
            record_timing: false,
            ..CertifyConfig::default()
        }
    }

    #[test]
    fn counts_sum_to_n_and_ignore_batching() {
        let h = HalfspaceOracle::new(vec![1.0, -2.0, 0.5], 0.1).unwrap();
        let x = [0.3, 0.1, -0.2];
        let key = NoiseKey::new(4, 17, Phase::Estimation);
        let a = sample_counts(&h, &x, 0.7, 1001, key, 1001).unwrap();
        let b = sample_counts(&h, &x, 0.7, 1001, key, 7).unwrap();
        assert_eq!(a.iter().sum::<u64>(), 1001);
        assert_eq!(a, b);
        assert_eq!(a, sample_counts(&h, &x, 0.7, 1001, key, 64).unwrap());
    }

    #[test]
    fn noise_substreams_differ_by_sample_and_phase() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        NoiseKey::new(1, 0, Phase::Selection).draws(4, 0, 3, &mut a);
        NoiseKey::new(1, 1, Phase::Selection).draws(4, 0, 3, &mut b);
        assert_ne!(a, b);
        NoiseKey::new(1, 0, Phase::Estimation).draws(4, 0, 3, &mut b);
        assert_ne!(a, b);
        NoiseKey::new(1, 0, Phase::Selection).draws(4, 1, 2, &mut b);
        assert_eq!(&a[4..], &b[..]);
    }

    #[test]
    fn zero_noise_is_deterministic() {
        let h = HalfspaceOracle::new(vec![1.0, 1.0], 0.0).unwrap();
        let key = NoiseKey::new(9, 0, Phase::Estimation);
        assert_eq!(sample_counts(&h, &[0.1, -0.3], 0.0, 500, key, 64).unwrap(), vec![500, 0]);
        assert_eq!(sample_counts(&h, &[0.1, 0.3], 0.0, 500, key, 64).unwrap(), vec![0, 500]);
    }

    #[test]
    fn constant_classifier_concentrates_counts() {
        let c = ConstantClassifier::new(1, 3, 2).unwrap();
        let key = NoiseKey::new(0, 0, Phase::Selection);
        assert_eq!(sample_counts(&c, &[0.0, 0.0], 1.0, 250, key, 100).unwrap(), vec![0, 250, 0]);
    }

    #[test]
    fn constant_classifier_radius() {
        let c = ConstantClassifier::new(2, 4, 3).unwrap();
        let r = certify(&c, &[0.0; 3], 2, 0, &cfg(0.5, 100), 1).unwrap();
        let p = 0.001f64.powf(0.01);
        assert!((r.pa_lower - p).abs() < 1e-12);
        assert!((r.radius - 0.5 * stats::inv_normal_cdf(p).unwrap()).abs() < 1e-12);
        assert!((r.radius / 0.5 - 1.500_475_024_120_636).abs() < 1e-10);
        assert!(r.correct && r.predicted == Some(2));
        let wrong = certify(&c, &[0.0; 3], 0, 0, &cfg(0.5, 100), 1).unwrap();
        assert!(!wrong.correct && wrong.radius > 0.0);
    }

    #[test]
    fn boundary_point_abstains() {
        let h = HalfspaceOracle::new(vec![1.0, 0.0], 0.0).unwrap();
        let r = certify(&h, &[0.0, 0.0], 1, 3, &cfg(0.5, 2000), 2).unwrap();
        assert_eq!(r.predicted, None);
        assert_eq!(r.radius, 0.0);
        assert!(r.pa_lower <= 0.5 && !r.correct);
    }

    #[test]
    fn halfspace_positive_fraction_matches_phi_one() {
        let h = HalfspaceOracle::new(vec![2.0, -1.0], 0.0).unwrap();
        let sigma = 0.5;
        // w . x = sigma |w|.
        let x = [sigma * 5f64.sqrt() / 2.0, 0.0];
        assert!((h.exact_smoothed_p(&x, sigma).unwrap() - 0.841_344_746).abs() < 1e-9);
        let key = NoiseKey::new(11, 0, Phase::Estimation);
        let counts = sample_counts(&h, &x, sigma, 100_000, key, 4096).unwrap();
        let frac = counts[1] as f64 / 1e5;
        assert!((frac - 0.8413).abs() < 0.004, "{frac}");
    }

    #[test]
    fn prediction_rules() {
        assert_eq!(decide_prediction(&[50, 50], 0.001).unwrap(), None);
        assert_eq!(decide_prediction(&[0, 11, 0], 0.001).unwrap(), Some(1));
        // 2^-9 > 0.001: ten unanimous votes are not yet significant.
        assert_eq!(decide_prediction(&[10, 0], 0.001).unwrap(), None);
        assert_eq!(decide_prediction(&[10, 0], 0.002).unwrap(), Some(0));
        assert_eq!(top_class(&[3, 7, 7]), 1);
        assert_eq!(top_two(&[5, 2, 5, 2]), (0, Some(2)));
        let c = ConstantClassifier::new(3, 5, 2).unwrap();
        for n in [11, 20, 1000] {
            assert_eq!(predict(&c, &[1.0, 2.0], 0, &cfg(0.25, n), 0).unwrap(), Some(3));
        }
    }

    #[test]
    fn config_validation() {
        assert!(CertifyConfig::default().validate().is_ok());
        assert!(CertifyConfig { alpha: 1.0, ..CertifyConfig::default() }.validate().is_err());
        assert!(CertifyConfig { n0: 0, ..CertifyConfig::default() }.validate().is_err());
        assert!(CertifyConfig { n: 10, ..CertifyConfig::default() }.validate().is_err());
        assert!(CertifyConfig { sigma: 0.0, ..CertifyConfig::default() }.validate().is_err());
    }

    #[test]
    fn certification_is_reproducible() {
        let h = HalfspaceOracle::new(vec![0.3, 0.9], -0.1).unwrap();
        let c = cfg(0.25, 3000);
        let a = certify(&h, &[0.2, 0.4], 1, 5, &c, 77).unwrap();
        let b = certify(&h, &[0.2, 0.4], 1, 5, &CertifyConfig { batch: 13, ..c.clone() }, 77).unwrap();
        assert_eq!(a, b);
    }
}
