//! Supervised fine-tuning at a fixed smoothing noise level with a
//! cross-view consistency term and an entropy penalty.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{classify, encode, AdamW, AdamWConfig, ModelParams};
use crate::numerics::{Graph, SeededRng, Tensor, Var};
use crate::schedule::sigma_to_time;

/// Floor applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneInit {
    Pretrained,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub sigma: f64,
    /// Consistency weight; defaults to [`default_eta1`] of `sigma`.
    pub eta1: Option<f64>,
    pub eta2: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub init: FinetuneInit,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            eta1: None,
            eta2: 0.5,
            epochs: 50,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            init: FinetuneInit::Pretrained,
        }
    }
}

/// 10 below `sigma = 0.5`, 20 from there on.
pub fn default_eta1(sigma: f64) -> f64 {
    if sigma < 0.5 {
        10.0
    } else {
        20.0
    }
}

impl FinetuneConfig {
    pub fn eta1(&self) -> f64 {
        self.eta1.unwrap_or_else(|| default_eta1(self.sigma))
    }

    pub fn validate(&self) -> Result<()> {
        sigma_to_time(self.sigma)?;
        if !(self.eta1() >= 0.0) || !(self.eta2 >= 0.0) {
            return Err(invalid!("loss weights must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

/// The three weighted parts of the objective and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneTerms {
    pub total: Var,
    pub ce: Var,
    pub cons: Var,
    pub ent: Var,
}

fn check_label_distribution(labels: &Tensor, rows: usize, classes: usize) -> Result<()> {
    if labels.shape() != [rows, classes] {
        return Err(shape_err!("labels {:?}, expected [{rows}, {classes}]", labels.shape()));
    }
    for i in 0..rows {
        let r = labels.row(i);
        if r.iter().any(|&p| !(p >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid!("label row {i} is not a probability distribution"));
        }
    }
    Ok(())
}

/// Batch mean of
/// `-sum y log p_a - eta1 sum p_a log p_b - eta2 sum p_a log p_a`
/// with `p_a = softmax(logits_a)`, `p_b = softmax(logits_b)` and label
/// distributions `y`.
pub fn finetune_loss(
    g: &mut Graph,
    logits_a: Var,
    logits_b: Var,
    labels: &Tensor,
    eta1: f64,
    eta2: f64,
) -> Result<FinetuneTerms> {
    let (sa, sb) = (g.value(logits_a).shape().to_vec(), g.value(logits_b).shape().to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(shape_err!("logits {sa:?} and {sb:?} must be matching [B, C]"));
    }
    check_label_distribution(labels, sa[0], sa[1])?;
    let inv_b = 1.0 / sa[0] as f64;
    let pa = g.softmax(logits_a)?;
    let log_pa = g.log_floor(pa, PROB_FLOOR)?;
    let pb = g.softmax(logits_b)?;
    let log_pb = g.log_floor(pb, PROB_FLOOR)?;
    let y = g.constant(labels.clone());

    let neg_mean_dot = |g: &mut Graph, p: Var, q: Var| -> Result<Var> {
        let prod = g.mul(p, q)?;
        let s = g.sum(prod)?;
        g.scale(s, -inv_b)
    };
    let ce = neg_mean_dot(g, y, log_pa)?;
    let cons = neg_mean_dot(g, pa, log_pb)?;
    let ent = neg_mean_dot(g, pa, log_pa)?;
    let wc = g.scale(cons, eta1)?;
    let we = g.scale(ent, eta2)?;
    let total = g.add(ce, wc)?;
    let total = g.add(total, we)?;
    Ok(FinetuneTerms { total, ce, cons, ent })
}

/// One-hot `[B, C]` label matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(invalid!("label {l} outside 0..{classes}"));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub ce: f64,
    pub cons: f64,
    pub ent: f64,
    /// Correct argmax predictions on the first view.
    pub correct: usize,
}

/// Adds `sigma * eps` with a fresh standard normal `eps` per pixel.
pub fn add_noise(x: &Tensor, sigma: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let mut eps = vec![0.0; x.len()];
    rng.fill_gaussian(&mut eps);
    let data = x.data().iter().zip(&eps).map(|(v, e)| v + sigma * e).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Two independent noisings of `images`, one update of encoder and head.
pub fn finetune_step(
    params: &mut ModelParams,
    optimizer: &mut AdamW,
    images: &Tensor,
    labels: &[usize],
    config: &FinetuneConfig,
    rng: &mut SeededRng,
) -> Result<StepStats> {
    let t = sigma_to_time(config.sigma)?;
    let b = labels.len();
    let xa = add_noise(images, config.sigma, rng)?;
    let xb = add_noise(images, config.sigma, rng)?;
    let y = one_hot(labels, params.config.num_classes)?;
    let times = vec![t; b];

    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, true);
    let omega = params.omega.bind(&mut g, true);
    let ra = encode(&mut g, &params.config, &theta, &xa, &times)?;
    let la = classify(&mut g, &params.config, &omega, ra)?;
    let rb = encode(&mut g, &params.config, &theta, &xb, &times)?;
    let lb = classify(&mut g, &params.config, &omega, rb)?;
    let terms = finetune_loss(&mut g, la, lb, &y, config.eta1(), config.eta2)?;
    let loss = g.value(terms.total).item()?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("fine-tuning loss {loss}")));
    }
    let logits = g.value(la);
    let correct = (0..b).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
    let stats = StepStats {
        loss,
        ce: g.value(terms.ce).item()?,
        cons: g.value(terms.cons).item()?,
        ent: g.value(terms.ent).item()?,
        correct,
    };
    let grads = g.backward(terms.total)?;
    let flat: Vec<Tensor> = theta
        .iter()
        .chain(&omega)
        .map(|v| grads.get(*v).cloned())
        .collect::<Result<_>>()?;
    drop(g);
    optimizer.update(&mut [&mut params.theta, &mut params.omega], &flat)?;
    Ok(stats)
}

/// Per-epoch metrics, one JSON line each. Loss terms are unweighted batch
/// means averaged over the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub epoch: u64,
    pub loss: f64,
    pub ce_term: f64,
    pub cons_term: f64,
    pub ent_term: f64,
    pub train_acc: f64,
}

/// Resumable fine-tuning loop state.
#[derive(Clone, Debug, PartialEq)]
pub struct Finetuner {
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub rng: SeededRng,
    /// Completed epochs.
    pub epoch: u64,
}

impl Finetuner {
    /// With [`FinetuneInit::Pretrained`] the linear head is zeroed, since
    /// pre-training never updates it.
    pub fn new(mut params: ModelParams, config: &FinetuneConfig, rng: SeededRng) -> Result<Self> {
        config.validate()?;
        if config.init == FinetuneInit::Pretrained {
            params.omega.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        }
        let optimizer = AdamW::new(config.optimizer.clone(), &[&params.theta, &params.omega])?;
        Ok(Self {
            params,
            optimizer,
            rng,
            epoch: 0,
        })
    }

    /// Runs until `config.epochs` or `stop_at` epochs are complete,
    /// whichever is first.
    pub fn run(
        &mut self,
        data: &Dataset,
        config: &FinetuneConfig,
        stop_at: Option<u64>,
        mut on_epoch: impl FnMut(&FinetuneMetrics) -> Result<()>,
    ) -> Result<()> {
        config.validate()?;
        if data.is_empty() {
            return Err(invalid!("fine-tuning needs a nonempty dataset"));
        }
        if data.shape() != self.params.config.input_shape || data.num_classes() > self.params.config.num_classes {
            return Err(shape_err!(
                "dataset {:?} with {} classes does not fit the model",
                data.shape(),
                data.num_classes()
            ));
        }
        let end = stop_at.map_or(config.epochs, |s| s.min(config.epochs));
        while self.epoch < end {
            let mut order: Vec<usize> = (0..data.len()).collect();
            self.rng.shuffle(&mut order);
            let mut sums = StepStats::default();
            let mut batches = 0usize;
            for chunk in order.chunks(config.batch_size) {
                let images = data.images_at(chunk)?;
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
                let s = finetune_step(&mut self.params, &mut self.optimizer, &images, &labels, config, &mut self.rng)?;
                sums.loss += s.loss;
                sums.ce += s.ce;
                sums.cons += s.cons;
                sums.ent += s.ent;
                sums.correct += s.correct;
                batches += 1;
            }
            self.epoch += 1;
            let nb = batches as f64;
            on_epoch(&FinetuneMetrics {
                epoch: self.epoch,
                loss: sums.loss / nb,
                ce_term: sums.ce / nb,
                cons_term: sums.cons / nb,
                ent_term: sums.ent / nb,
                train_acc: sums.correct as f64 / data.len() as f64,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::{EncoderConfig, EncoderKind};
    use crate::numerics::{finite_diff_check, seeded_gaussian};

    fn terms_value(a: &Tensor, b: &Tensor, y: &Tensor, eta1: f64, eta2: f64) -> (f64, f64, f64, f64) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let t = finetune_loss(&mut g, va, vb, y, eta1, eta2).unwrap();
        let v = |x: Var| g.value(x).item().unwrap();
        (v(t.total), v(t.ce), v(t.cons), v(t.ent))
    }

    /// Plain-loop reference of the objective.
    fn reference(a: &[f64], b: &[f64], label: usize, eta1: f64, eta2: f64) -> f64 {
        let soft = |z: &[f64]| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let (p, q) = (soft(a), soft(b));
        let lg = |v: f64| v.max(PROB_FLOOR).ln();
        -lg(p[label])
            - eta1 * p.iter().zip(&q).map(|(x, y)| x * lg(*y)).sum::<f64>()
            - eta2 * p.iter().map(|x| x * lg(*x)).sum::<f64>()
    }

    #[test]
    fn zero_weights_give_cross_entropy() {
        let a = Tensor::from_rows(&[vec![1.0, -0.5, 0.2], vec![0.0, 2.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.3, 0.1, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let y = one_hot(&[0, 2], 3).unwrap();
        let (total, ce, _, _) = terms_value(&a, &b, &y, 0.0, 0.0);
        let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let plain = ((lse(a.row(0)) - 1.0) + (lse(a.row(1)) - 1.0)) / 2.0;
        assert!((total - plain).abs() < 1e-12);
        assert_eq!(total, ce);
    }

    #[test]
    fn uniform_predictions() {
        let z = Tensor::zeros(&[1, 2]);
        let (total, ..) = terms_value(&z, &z, &one_hot(&[1], 2).unwrap(), 10.0, 0.5);
        assert!((total - 11.5 * 2f64.ln()).abs() < 1e-12);
        let z = Tensor::zeros(&[3, 5]);
        let (total, ..) = terms_value(&z, &z, &one_hot(&[0, 4, 2], 5).unwrap(), 20.0, 0.5);
        assert!((total - 21.5 * 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn confident_correct_limit_is_zero() {
        let a = Tensor::from_rows(&[vec![60.0, 0.0, 0.0]]).unwrap();
        let (total, ..) = terms_value(&a, &a, &one_hot(&[0], 3).unwrap(), 10.0, 0.5);
        assert!(total.abs() < 1e-20 + 1e-24, "{total}");
        assert!(total >= 0.0);
    }

    #[test]
    fn matches_reference_and_swap_asymmetry() {
        let mut rng = SeededRng::new(1);
        let a = seeded_gaussian(&mut rng, &[1, 4]).unwrap();
        let b = seeded_gaussian(&mut rng, &[1, 4]).unwrap();
        let y = one_hot(&[2], 4).unwrap();
        let (ab, ce_ab, cons_ab, ent_ab) = terms_value(&a, &b, &y, 10.0, 0.5);
        assert!((ab - reference(a.data(), b.data(), 2, 10.0, 0.5)).abs() < 1e-12);
        let (ba, ce_ba, cons_ba, ent_ba) = terms_value(&b, &a, &y, 10.0, 0.5);
        assert!((ba - reference(b.data(), a.data(), 2, 10.0, 0.5)).abs() < 1e-12);
        // Swapping views only changes which view the CE and entropy read,
        // and transposes the cross term.
        let lg = |t: &Tensor| {
            let lse = t.data().iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - t.data()[2]
        };
        assert!((ce_ab - lg(&a)).abs() < 1e-12 && (ce_ba - lg(&b)).abs() < 1e-12);
        assert!((cons_ab - cons_ba).abs() > 1e-6);
        assert!((ent_ab - ent_ba).abs() > 1e-6);
    }

    #[test]
    fn permutation_equivariant_in_classes() {
        let a = Tensor::from_rows(&[vec![0.4, -1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.5, 0.2, -0.3]]).unwrap();
        let y = one_hot(&[1], 3).unwrap();
        let perm = [2, 0, 1];
        let permute = |t: &Tensor| Tensor::from_rows(&[perm.iter().map(|&i| t.data()[i]).collect()]).unwrap();
        let y_p = one_hot(&[perm.iter().position(|&i| i == 1).unwrap()], 3).unwrap();
        let (x, ..) = terms_value(&a, &b, &y, 10.0, 0.5);
        let (xp, ..) = terms_value(&permute(&a), &permute(&b), &y_p, 10.0, 0.5);
        assert!((x - xp).abs() < 1e-12);
    }

    #[test]
    fn decreases_with_confidence_on_the_correct_class() {
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let z = Tensor::from_rows(&[vec![0.2 * i as f64, 0.0, 0.0]]).unwrap();
            let (total, ..) = terms_value(&z, &z, &one_hot(&[0], 3).unwrap(), 10.0, 0.5);
            assert!(total < prev);
            prev = total;
        }
    }

    #[test]
    fn rejects_invalid_labels_and_logits() {
        let z = Tensor::zeros(&[1, 2]);
        let bad = Tensor::from_rows(&[vec![0.7, 0.7]]).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(z.clone()), g.constant(z));
        assert!(finetune_loss(&mut g, a, b, &bad, 1.0, 1.0).is_err());
        assert!(one_hot(&[3], 2).is_err());
    }

    #[test]
    fn gradcheck_on_toy_logits() {
        let mut rng = SeededRng::new(4);
        let a = seeded_gaussian(&mut rng, &[2, 3]).unwrap();
        let b = seeded_gaussian(&mut rng, &[2, 3]).unwrap();
        let y = one_hot(&[0, 2], 3).unwrap();
        let err = finite_diff_check(
            |g, v| Ok(finetune_loss(g, v[0], v[1], &y, 10.0, 0.5)?.total),
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn independent_noise_draws() {
        let x = Tensor::zeros(&[2, 3]);
        let mut rng = SeededRng::new(3);
        let a = add_noise(&x, 0.5, &mut rng).unwrap();
        let b = add_noise(&x, 0.5, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn plain_cross_entropy_fits_separable_data() {
        let cfg = EncoderConfig {
            kind: EncoderKind::Mlp,
            input_shape: [1, 4, 4],
            width: 8,
            mlp_hidden: 16,
            time_features: 4,
            num_classes: 3,
            ..EncoderConfig::default()
        };
        let data = synthetic_blobs(3, 20, cfg.input_shape, 3.0, 5).unwrap();
        let params = ModelParams::init(&cfg, &mut SeededRng::new(6)).unwrap();
        let config = FinetuneConfig {
            sigma: 1e-3,
            eta1: Some(0.0),
            eta2: 0.0,
            epochs: 25,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 3e-3,
                warmup_steps: 0,
                ..AdamWConfig::default()
            },
            init: FinetuneInit::Random,
        };
        let mut tuner = Finetuner::new(params, &config, SeededRng::new(7)).unwrap();
        let mut last = None;
        tuner.run(&data, &config, None, |m| {
            last = Some(m.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(last.unwrap().train_acc, 1.0);
    }

    #[test]
    fn default_weights() {
        assert_eq!(default_eta1(0.25), 10.0);
        assert_eq!(default_eta1(0.5), 20.0);
        assert_eq!(default_eta1(1.0), 20.0);
        assert_eq!(FinetuneConfig::default().eta2, 0.5);
    }

    #[test]
    fn pretrained_init_starts_from_a_zero_head() {
        let cfg = EncoderConfig {
            kind: EncoderKind::Mlp,
            input_shape: [1, 4, 4],
            width: 8,
            mlp_hidden: 16,
            time_features: 4,
            num_classes: 3,
            ..EncoderConfig::default()
        };
        let params = ModelParams::init(&cfg, &mut SeededRng::new(6)).unwrap();
        let zero = |p: &ModelParams| p.omega.tensors().all(|t| t.data().iter().all(|&v| v == 0.0));
        let pre = Finetuner::new(params.clone(), &FinetuneConfig::default(), SeededRng::new(1)).unwrap();
        assert!(zero(&pre.params));
        assert_eq!(pre.params.theta, params.theta);
        let random = FinetuneConfig {
            init: FinetuneInit::Random,
            ..FinetuneConfig::default()
        };
        let fresh = Finetuner::new(params.clone(), &random, SeededRng::new(1)).unwrap();
        assert_eq!(fresh.params.omega, params.omega);
    }
}
