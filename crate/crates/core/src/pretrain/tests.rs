use super::*;
use crate::data::synthetic_blobs;
use crate::model::{EncoderConfig, EncoderKind};
use crate::numerics::seeded_gaussian;
use proptest::prelude::*;

fn toy_config() -> EncoderConfig {
    EncoderConfig {
        kind: EncoderKind::Mlp,
        input_shape: [1, 4, 4],
        patch_size: 2,
        depth: 1,
        width: 6,
        heads: 2,
        mlp_hidden: 8,
        time_features: 4,
        projector_hidden: 8,
        projector_out: 5,
        num_classes: 3,
    }
}

fn toy_batch(b: usize, seed: u64) -> (ModelParams, PretrainBatch) {
    let cfg = toy_config();
    let params = ModelParams::init(&cfg, &mut SeededRng::new(seed)).unwrap();
    let data = synthetic_blobs(3, 4, cfg.input_shape, 2.0, seed).unwrap();
    let idx: Vec<usize> = (0..b).collect();
    let x0 = data.images_at(&idx).unwrap();
    let schedule = NoiseSchedule::discretize(80.0, 0.002, 20, 7.0).unwrap();
    let batch = PretrainBatch::assemble(
        &x0,
        cfg.input_shape,
        &schedule,
        &AugmentConfig::default(),
        &mut SeededRng::new(seed + 100),
    )
    .unwrap();
    (params, batch)
}

/// Plain-loop reference for the info-NCE value.
fn info_nce_reference(a: &[Vec<f64>], c: &[Vec<f64>], tau: f64) -> f64 {
    let b = a.len();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    (0..b)
        .map(|i| {
            let denom: f64 = (0..b).map(|j| (dot(&a[i], &c[j]) / tau).exp()).sum();
            -((dot(&a[i], &c[i]) / tau).exp() / denom).ln()
        })
        .sum::<f64>()
        / b as f64
}

fn nce_value(a: &Tensor, c: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let (a, c) = (g.constant(a.clone()), g.constant(c.clone()));
    let l = info_nce(&mut g, a, c, tau).unwrap();
    g.value(l).item().unwrap()
}

#[test]
fn info_nce_uniform_similarities_give_ln_b() {
    let v = Tensor::from_rows(&vec![vec![0.6, 0.8]; 4]).unwrap();
    let loss = nce_value(&v, &v, 0.2);
    assert!((loss - 4f64.ln()).abs() < 1e-12);
    assert!((loss - 1.386294).abs() < 1e-6);
}

#[test]
fn info_nce_orthonormal_pairs() {
    let eye = Tensor::identity(4);
    let loss = nce_value(&eye, &eye, 0.2);
    let expected = -(5f64.exp() / (5f64.exp() + 3.0)).ln();
    assert!((loss - expected).abs() < 1e-12);
    assert!((loss - 0.020).abs() < 5e-4);
}

#[test]
fn info_nce_matches_reference_and_ignores_negative_order() {
    let mut rng = SeededRng::new(5);
    let norm = |t: Tensor| {
        let rows: Vec<Vec<f64>> = (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        rows
    };
    let a = norm(seeded_gaussian(&mut rng, &[5, 3]).unwrap());
    let c = norm(seeded_gaussian(&mut rng, &[5, 3]).unwrap());
    let ours = nce_value(&Tensor::from_rows(&a).unwrap(), &Tensor::from_rows(&c).unwrap(), 0.2);
    assert!((ours - info_nce_reference(&a, &c, 0.2)).abs() < 1e-12);
    // Swapping candidates 3 and 4 only reorders the negatives of rows 0..3.
    let swapped = vec![c[0].clone(), c[1].clone(), c[2].clone(), c[4].clone(), c[3].clone()];
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let row_term = |i: usize, cands: &[Vec<f64>]| {
        let denom: f64 = cands.iter().map(|cj| (dot(&a[i], cj) / 0.2).exp()).sum();
        -((dot(&a[i], &cands[i]) / 0.2).exp() / denom).ln()
    };
    for i in 0..3 {
        assert!((row_term(i, &c) - row_term(i, &swapped)).abs() < 1e-12);
    }
}

#[test]
fn info_nce_rejects_zero_vectors() {
    let a = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let mut g = Graph::new();
    let (a, c) = (g.constant(a), g.constant(c));
    assert!(info_nce(&mut g, a, c, 0.2).is_err());
}

#[test]
fn single_pair_losses_are_zero() {
    let (params, batch) = toy_batch(1, 3);
    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, true);
    let nu = params.nu.bind(&mut g, true);
    let cons = consistency_loss(&mut g, &params, &theta, ConsistencyTarget::Online, &batch, 0.2).unwrap();
    let contr = contrastive_loss(&mut g, &params, &theta, &nu, &batch, 0.2).unwrap();
    assert_eq!(g.value(cons).item().unwrap(), 0.0);
    assert_eq!(g.value(contr).item().unwrap(), 0.0);
}

#[test]
fn consistency_loss_leaves_projector_and_targets_untouched() {
    let (params, batch) = toy_batch(4, 4);
    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, true);
    let nu = params.nu.bind(&mut g, true);
    let cons = consistency_loss(&mut g, &params, &theta, ConsistencyTarget::Online, &batch, 0.2).unwrap();
    let grads = g.backward(cons).unwrap();
    for v in &nu {
        assert!(grads.get(*v).unwrap().data().iter().all(|&x| x == 0.0));
    }
    assert!(theta.iter().any(|v| grads.get(*v).unwrap().max_abs() > 0.0));
}

#[test]
fn online_target_equals_detached_online_branch() {
    let (params, batch) = toy_batch(4, 6);
    let b = batch.len();
    // Explicit stop-gradient: encode the candidates with the trainable leaves
    // and detach the result.
    let mut g1 = Graph::new();
    let theta1 = params.theta.bind(&mut g1, true);
    let anchors = encode(&mut g1, &params.config, &theta1, &batch.noisy().unwrap(), &vec![batch.t_n; b]).unwrap();
    let anchors = g1.l2_normalize(anchors).unwrap();
    let cand = encode(&mut g1, &params.config, &theta1, &batch.less_noisy().unwrap(), &vec![batch.t_prev; b]).unwrap();
    let cand = g1.l2_normalize(cand).unwrap();
    let cand = g1.detach(cand);
    let l1 = info_nce(&mut g1, anchors, cand, 0.2).unwrap();
    let gr1 = g1.backward(l1).unwrap();

    let mut g2 = Graph::new();
    let theta2 = params.theta.bind(&mut g2, true);
    let l2 = consistency_loss(&mut g2, &params, &theta2, ConsistencyTarget::Online, &batch, 0.2).unwrap();
    let gr2 = g2.backward(l2).unwrap();

    // A zero-rate mirror is a bitwise copy of the online encoder.
    let mut mirror = params.theta_ema.clone();
    mirror.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 3.5));
    ema_update(&mut mirror, &params.theta, 0.0).unwrap();
    let mut g3 = Graph::new();
    let theta3 = params.theta.bind(&mut g3, true);
    let l3 = consistency_loss(&mut g3, &params, &theta3, ConsistencyTarget::Mirror(&mirror), &batch, 0.2).unwrap();
    let gr3 = g3.backward(l3).unwrap();

    let bits = |g: &Graph, v: Var| g.value(v).item().unwrap().to_bits();
    assert_eq!(bits(&g1, l1), bits(&g2, l2));
    assert_eq!(bits(&g1, l1), bits(&g3, l3));
    for ((a, b), c) in theta1.iter().zip(&theta2).zip(&theta3) {
        assert_eq!(gr1.get(*a).unwrap(), gr2.get(*b).unwrap());
        assert_eq!(gr1.get(*a).unwrap(), gr3.get(*c).unwrap());
    }
}

#[test]
fn consistency_anchor_branch_gradcheck() {
    let (params, batch) = toy_batch(4, 8);
    let start: Vec<Tensor> = params.theta.tensors().cloned().collect();
    let err = crate::numerics::finite_diff_report(
        |g, vars| consistency_loss(g, &params, vars, ConsistencyTarget::Online, &batch, 0.2),
        &start,
        1e-5,
    )
    .unwrap();
    assert!(err.max_rel_error < 1e-4, "{err:?}");
}

#[test]
fn contrastive_with_identical_views_is_below_ln_b() {
    let (params, mut batch) = toy_batch(4, 9);
    batch.z2 = batch.z1.clone();
    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, true);
    let nu = params.nu.bind(&mut g, true);
    let l = contrastive_loss(&mut g, &params, &theta, &nu, &batch, 0.2).unwrap();
    assert!(g.value(l).item().unwrap() < 4f64.ln());
}

#[test]
fn losses_flatten_at_huge_temperature() {
    let (params, batch) = toy_batch(4, 10);
    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, true);
    let nu = params.nu.bind(&mut g, true);
    let c = consistency_loss(&mut g, &params, &theta, ConsistencyTarget::Online, &batch, 1e6).unwrap();
    let k = contrastive_loss(&mut g, &params, &theta, &nu, &batch, 1e6).unwrap();
    for v in [c, k] {
        assert!((g.value(v).item().unwrap() - 4f64.ln()).abs() < 1e-3);
    }
}

#[test]
fn consistency_is_invariant_to_batch_order() {
    let (params, batch) = toy_batch(4, 11);
    let value = |b: &PretrainBatch| {
        let mut g = Graph::new();
        let theta = params.theta.bind(&mut g, false);
        let l = consistency_loss(&mut g, &params, &theta, ConsistencyTarget::Online, b, 0.2).unwrap();
        g.value(l).item().unwrap()
    };
    let mut shuffled = batch.clone();
    shuffled.pairs.reverse();
    assert!((value(&batch) - value(&shuffled)).abs() < 1e-12);
}

#[test]
fn step_updates_targets_only_by_ema() {
    let (mut params, batch) = toy_batch(4, 12);
    let config = PretrainConfig {
        iters: 10,
        ..PretrainConfig::default()
    };
    let mut opt = AdamW::new(config.optimizer.clone(), &[&params.theta, &params.nu]).unwrap();
    let before = params.clone();
    let m = pretrain_step(&mut params, &mut opt, &batch, &config, 3, 20).unwrap();
    assert_eq!(m.iter, 4);
    assert_eq!(m.mu, ema_schedule(4, 10, 0.99, 0.9999, 10.0).unwrap());
    assert_ne!(params.theta, before.theta);
    assert_ne!(params.nu, before.nu);
    assert_eq!(params.omega, before.omega);
    let mut expected = before.theta_ema.clone();
    ema_update(&mut expected, &params.theta, m.mu).unwrap();
    assert_eq!(params.theta_ema, expected);
    let mut expected = before.nu_ema.clone();
    ema_update(&mut expected, &params.nu, m.mu).unwrap();
    assert_eq!(params.nu_ema, expected);

    // The reported terms add up to the optimized total.
    let mut g = Graph::new();
    let theta = before.theta.bind(&mut g, true);
    let nu = before.nu.bind(&mut g, true);
    let c = consistency_loss(&mut g, &before, &theta, ConsistencyTarget::Online, &batch, 0.2).unwrap();
    let k = contrastive_loss(&mut g, &before, &theta, &nu, &batch, 0.2).unwrap();
    let total = g.add(c, k).unwrap();
    assert!((g.value(total).item().unwrap() - (m.loss_consistency + m.loss_contrastive)).abs() < 1e-12);
}

#[test]
fn initial_losses_are_near_ln_b() {
    let cfg = EncoderConfig {
        kind: EncoderKind::Vit,
        width: 16,
        mlp_hidden: 32,
        projector_hidden: 16,
        projector_out: 8,
        ..toy_config()
    };
    let (_, batch) = toy_batch(8, 13);
    let params = ModelParams::init(&cfg, &mut SeededRng::new(13)).unwrap();
    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, false);
    let nu = params.nu.bind(&mut g, false);
    let c = consistency_loss(&mut g, &params, &theta, ConsistencyTarget::Online, &batch, 0.2).unwrap();
    let k = contrastive_loss(&mut g, &params, &theta, &nu, &batch, 0.2).unwrap();
    let ln_b = 8f64.ln();
    for v in [c, k] {
        let l = g.value(v).item().unwrap();
        assert!((l - ln_b).abs() < 0.2 * ln_b, "loss {l} vs ln B {ln_b}");
    }
}

#[test]
fn batch_shares_one_interval_and_pairs_follow_images() {
    let (_, batch) = toy_batch(4, 14);
    assert!(batch.pairs.iter().all(|p| p.n == batch.n));
    for (i, p) in batch.pairs.iter().enumerate() {
        let x0 = crate::schedule::snap_signal(&Tensor::new(vec![16], batch.x0.row(i).to_vec()).unwrap()).unwrap();
        let rebuilt = crate::schedule::forward_sample(&x0, batch.t_n, &p.eps).unwrap();
        assert_eq!(rebuilt, p.x_tn);
    }
}

#[test]
fn ema_schedule_endpoints_and_errors() {
    assert_eq!(ema_schedule(0, 100, 0.99, 0.9999, 10.0).unwrap(), 0.99);
    assert!((ema_schedule(100, 100, 0.99, 0.9999, 10.0).unwrap() - 0.9999).abs() < 1e-6);
    assert!(ema_schedule(101, 100, 0.99, 0.9999, 10.0).is_err());
    assert!(ema_schedule(1, 100, 0.9999, 0.99, 10.0).is_err());
    // Larger steepness rises faster.
    let slow = ema_schedule(20, 100, 0.99, 0.9999, 5.0).unwrap();
    let fast = ema_schedule(20, 100, 0.99, 0.9999, 15.0).unwrap();
    assert!(fast > slow);
}

#[test]
fn trainer_reduces_consistency_loss() {
    let cfg = toy_config();
    let data = synthetic_blobs(3, 20, cfg.input_shape, 2.0, 1).unwrap();
    let params = ModelParams::init(&cfg, &mut SeededRng::new(2)).unwrap();
    let config = PretrainConfig {
        batch_size: 8,
        iters: 300,
        optimizer: AdamWConfig {
            lr: 3e-3,
            warmup_steps: 20,
            ..AdamWConfig::default()
        },
        ..PretrainConfig::default()
    };
    let mut trainer = Pretrainer::new(params, &config, SeededRng::new(3)).unwrap();
    let mut losses = Vec::new();
    trainer
        .run(&data, &config, &ScheduleConfig::default(), None, |m| {
            losses.push(m.loss_consistency);
            Ok(())
        })
        .unwrap();
    assert_eq!(losses.len(), 300);
    let head: f64 = losses[..30].iter().sum::<f64>() / 30.0;
    let tail: f64 = losses[270..].iter().sum::<f64>() / 30.0;
    assert!(tail < head, "consistency loss {head} -> {tail}");
}

proptest! {
    #[test]
    fn ema_schedule_is_monotone(m in 1.0f64..20.0, total in 1u64..5000) {
        let mut prev = 0.0;
        for k in 0..=total.min(200) {
            let k = k * total / total.min(200);
            let mu = ema_schedule(k, total, 0.99, 0.9999, m).unwrap();
            prop_assert!(mu >= prev);
            prop_assert!((0.99..=0.9999 + 1e-12).contains(&mu));
            prev = mu;
        }
    }
}
