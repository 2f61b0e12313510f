//! Base classifiers that can be smoothed.

use crate::error::{invalid, shape_err, Result};
use crate::finetune::argmax;
use crate::model::ModelParams;
use crate::numerics::Tensor;
use crate::schedule::sigma_to_time;

use super::stats::normal_cdf;

/// A deterministic hard classifier over flat inputs of fixed length.
pub trait BaseClassifier {
    fn num_classes(&self) -> usize;

    fn input_len(&self) -> usize;

    /// Appends one class per input to `out`; `xs` holds the inputs back to
    /// back.
    fn classify_batch(&self, xs: &[f64], out: &mut Vec<usize>) -> Result<()>;

    fn classify(&self, x: &[f64]) -> Result<usize> {
        let mut out = Vec::with_capacity(1);
        self.classify_batch(x, &mut out)?;
        Ok(out[0])
    }
}

fn check_rows(xs: &[f64], len: usize) -> Result<usize> {
    if len == 0 || xs.len() % len != 0 {
        return Err(shape_err!("{} values do not split into inputs of {len}", xs.len()));
    }
    Ok(xs.len() / len)
}

/// `sign(w . x + b)` as classes `{0, 1}`, with the boundary in class 1.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfspaceOracle {
    w: Vec<f64>,
    b: f64,
    norm: f64,
}

impl HalfspaceOracle {
    pub fn new(w: Vec<f64>, b: f64) -> Result<Self> {
        if w.iter().chain([&b]).any(|v| !v.is_finite()) {
            return Err(invalid!("halfspace parameters must be finite"));
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(invalid!("halfspace normal must be nonzero"));
        }
        Ok(Self { w, b, norm })
    }

    pub fn weights(&self) -> (&[f64], f64) {
        (&self.w, self.b)
    }

    fn affine(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b
    }

    /// Signed distance to the boundary, positive on the class-1 side.
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.w.len() {
            return Err(shape_err!("input of {} for a halfspace in {}", x.len(), self.w.len()));
        }
        Ok(self.affine(x) / self.norm)
    }

    /// Probability of class 1 under `x + sigma * N(0, I)`.
    pub fn exact_smoothed_p(&self, x: &[f64], sigma: f64) -> Result<f64> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid!("noise level must be positive, got {sigma}"));
        }
        Ok(normal_cdf(self.margin(x)? / sigma))
    }
}

impl BaseClassifier for HalfspaceOracle {
    fn num_classes(&self) -> usize {
        2
    }

    fn input_len(&self) -> usize {
        self.w.len()
    }

    fn classify_batch(&self, xs: &[f64], out: &mut Vec<usize>) -> Result<()> {
        check_rows(xs, self.w.len())?;
        out.extend(xs.chunks_exact(self.w.len()).map(|x| usize::from(self.affine(x) >= 0.0)));
        Ok(())
    }
}

/// Always answers the same class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstantClassifier {
    pub class: usize,
    pub num_classes: usize,
    pub input_len: usize,
}

impl ConstantClassifier {
    pub fn new(class: usize, num_classes: usize, input_len: usize) -> Result<Self> {
        if class >= num_classes || input_len == 0 {
            return Err(invalid!("constant class {class} of {num_classes} on inputs of {input_len}"));
        }
        Ok(Self {
            class,
            num_classes,
            input_len,
        })
    }
}

impl BaseClassifier for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_len(&self) -> usize {
        self.input_len
    }

    fn classify_batch(&self, xs: &[f64], out: &mut Vec<usize>) -> Result<()> {
        let rows = check_rows(xs, self.input_len)?;
        out.extend(std::iter::repeat(self.class).take(rows));
        Ok(())
    }
}

/// Head over encoder, queried at time `t = sigma`. Ties in the logits go
/// to the lowest class index.
#[derive(Clone, Copy, Debug)]
pub struct ModelClassifier<'a> {
    params: &'a ModelParams,
    t: f64,
}

impl<'a> ModelClassifier<'a> {
    pub fn new(params: &'a ModelParams, sigma: f64) -> Result<Self> {
        Ok(Self {
            params,
            t: sigma_to_time(sigma)?,
        })
    }
}

impl BaseClassifier for ModelClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.params.config.num_classes
    }

    fn input_len(&self) -> usize {
        self.params.config.input_len()
    }

    fn classify_batch(&self, xs: &[f64], out: &mut Vec<usize>) -> Result<()> {
        let len = self.input_len();
        let rows = check_rows(xs, len)?;
        let x = Tensor::new(vec![rows, len], xs.to_vec())?;
        let logits = self.params.logits(&x, &vec![self.t; rows])?;
        out.extend((0..rows).map(|i| argmax(logits.row(i))));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, EncoderKind};
    use crate::numerics::SeededRng;

    #[test]
    fn halfspace_boundary_and_closed_form() {
        let h = HalfspaceOracle::new(vec![3.0, 4.0], -5.0).unwrap();
        assert_eq!(h.classify(&[1.0, 0.5]).unwrap(), 1);
        assert_eq!(h.classify(&[0.0, 0.0]).unwrap(), 0);
        assert_eq!(h.exact_smoothed_p(&[1.0, 0.5], 0.3).unwrap(), 0.5);
        // w . x + b = 2.5 = sigma * |w|.
        let p = h.exact_smoothed_p(&[1.0, 1.125], 0.5).unwrap();
        assert!((p - 0.841_344_746_068_543).abs() < 1e-12, "{p}");
    }

    #[test]
    fn halfspace_is_homogeneous() {
        let h = HalfspaceOracle::new(vec![0.7, -1.3, 0.2], 0.4).unwrap();
        let mut rng = SeededRng::new(2);
        for c in [2.0, 0.25, 3.7, 1e3] {
            let s = HalfspaceOracle::new(vec![0.7 * c, -1.3 * c, 0.2 * c], 0.4 * c).unwrap();
            for _ in 0..200 {
                let x: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
                if h.margin(&x).unwrap().abs() > 1e-9 {
                    assert_eq!(h.classify(&x).unwrap(), s.classify(&x).unwrap());
                }
                let (p, q) = (h.exact_smoothed_p(&x, 0.5).unwrap(), s.exact_smoothed_p(&x, 0.5).unwrap());
                assert!((p - q).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn halfspace_rejects_zero_normal() {
        assert!(HalfspaceOracle::new(vec![0.0, 0.0], 1.0).is_err());
        assert!(HalfspaceOracle::new(vec![f64::NAN], 1.0).is_err());
    }

    #[test]
    fn batch_shapes_are_checked() {
        let h = HalfspaceOracle::new(vec![1.0, 1.0], 0.0).unwrap();
        let mut out = Vec::new();
        assert!(h.classify_batch(&[1.0, 2.0, 3.0], &mut out).is_err());
        let c = ConstantClassifier::new(2, 3, 2).unwrap();
        c.classify_batch(&[0.0; 6], &mut out).unwrap();
        assert_eq!(out, vec![2, 2, 2]);
        assert!(ConstantClassifier::new(3, 3, 2).is_err());
    }

    #[test]
    fn model_classifier_matches_logits_argmax() {
        let cfg = EncoderConfig {
            kind: EncoderKind::Mlp,
            input_shape: [1, 2, 2],
            width: 4,
            mlp_hidden: 8,
            time_features: 4,
            num_classes: 3,
            ..EncoderConfig::default()
        };
        let params = ModelParams::init(&cfg, &mut SeededRng::new(1)).unwrap();
        let f = ModelClassifier::new(&params, 0.5).unwrap();
        let xs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut out = Vec::new();
        f.classify_batch(&xs, &mut out).unwrap();
        let logits = params.logits(&Tensor::new(vec![3, 4], xs.clone()).unwrap(), &[0.5; 3]).unwrap();
        for i in 0..3 {
            assert_eq!(out[i], argmax(logits.row(i)));
            assert_eq!(f.classify(&xs[4 * i..4 * i + 4]).unwrap(), out[i]);
        }
        assert!(ModelClassifier::new(&params, 0.0).is_err());
    }
}
