use super::*;
use crate::favae::{pad_segment, train_favae, LadderConfig};
use rand::Rng;
use crate::segmentation::MacroSegment;

fn small_ppo() -> PpoConfig {
    PpoConfig {
        horizon: 128,
        total_steps: 256,
        epochs: 2,
        minibatch: 16,
        hidden: 16,
        ..PpoConfig::default()
    }
}

#[test]
fn gae_single_step_oracle() {
    // one transition: adv = r + gamma * last_value - v
    let (adv, ret) = estimate_advantages(&[1.0], &[0.5], &[false], &[1], 2.0, 0.9, 0.8);
    assert!((adv[0] - (1.0 + 0.9 * 2.0 - 0.5)).abs() < 1e-12);
    assert!((ret[0] - (adv[0] + 0.5)).abs() < 1e-12);
    // a macro spanning 3 primitive steps discounts the bootstrap by gamma^3
    let (adv, _) = estimate_advantages(&[1.0], &[0.5], &[false], &[3], 2.0, 0.9, 0.8);
    assert!((adv[0] - (1.0 + 0.9f64.powi(3) * 2.0 - 0.5)).abs() < 1e-12);
    // done cuts the bootstrap
    let (adv, _) = estimate_advantages(&[1.0], &[0.5], &[true], &[1], 2.0, 0.9, 0.8);
    assert!((adv[0] - (1.0 - 0.5)).abs() < 1e-12);
}

#[test]
fn gae_matches_direct_sum() {
    // Without dones, adv_t = sum_k (gamma*lambda)^k * delta_{t+k}.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 12;
    let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let last = 0.3;
    let (gamma, lambda) = (0.99, 0.95);
    let (adv, _) =
        estimate_advantages(&rewards, &values, &vec![false; n], &vec![1; n], last, gamma, lambda);
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let nv = if t + 1 < n { values[t + 1] } else { last };
            rewards[t] + gamma * nv - values[t]
        })
        .collect();
    for t in 0..n {
        let direct: f64 = (t..n)
            .map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k])
            .sum();
        assert!((adv[t] - direct).abs() < 1e-10, "t={t}: {} vs {direct}", adv[t]);
    }
}

#[test]
fn gae_resets_across_episode_boundary() {
    let rewards = [1.0, 1.0, 1.0, 1.0];
    let values = [0.0, 0.0, 0.0, 0.0];
    let dones = [false, true, false, false];
    let (adv, _) = estimate_advantages(&rewards, &values, &dones, &[1; 4], 5.0, 0.9, 0.9);
    // episode 1 (t=0..1) must not see anything from t>=2
    let (solo, _) =
        estimate_advantages(&[1.0, 1.0], &[0.0, 0.0], &[false, true], &[1, 1], 5.0, 0.9, 0.9);
    assert!((adv[0] - solo[0]).abs() < 1e-12);
    assert!((adv[1] - solo[1]).abs() < 1e-12);
}

#[test]
fn ppo_clip_algebra_grid() {
    let clip = 0.2;
    for &adv in &[1.0, -1.0] {
        for &ratio in &[0.5, 0.79, 0.8, 0.9, 1.0, 1.1, 1.2, 1.21, 1.5] {
            let obj = ppo_objective(ratio, adv, clip);
            let expect = f64::min(ratio * adv, ratio.clamp(0.8, 1.2) * adv);
            assert_eq!(obj, expect);
            let coef = ppo_clip_coef(ratio, adv, clip);
            let clipped_out =
                (adv > 0.0 && ratio > 1.2) || (adv < 0.0 && ratio < 0.8);
            if clipped_out {
                assert_eq!(coef, 0.0, "ratio {ratio} adv {adv}");
            } else {
                assert_eq!(coef, ratio * adv, "ratio {ratio} adv {adv}");
            }
        }
    }
    // gradient coefficient matches finite differences of the objective in
    // log-space away from the kinks
    for &adv in &[0.7, -0.4] {
        for &ratio in &[0.5f64, 0.9, 1.05, 1.4] {
            let h = 1e-6;
            let lp = ratio.ln();
            let fd = (ppo_objective((lp + h).exp(), adv, clip)
                - ppo_objective((lp - h).exp(), adv, clip))
                / (2.0 * h);
            assert!(
                (ppo_clip_coef(ratio, adv, clip) - fd).abs() < 1e-5,
                "ratio {ratio} adv {adv}"
            );
        }
    }
}

#[test]
fn gaussian_logp_closed_form() {
    // standard normal at zero: -0.5*ln(2*pi) per dim
    let lp = gaussian_logp(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
    assert!((lp + LOG_2PI).abs() < 1e-12);
    // shifting by one sigma subtracts 0.5
    let lp1 = gaussian_logp(&[1.0], &[0.0], &[0.0]);
    assert!((lp1 - (-0.5 - 0.5 * LOG_2PI)).abs() < 1e-12);
    // scale invariance: logp(x; mu, sigma) = logp(x/sigma; mu/sigma, 1) - ln(sigma)
    let lp2 = gaussian_logp(&[0.6], &[0.2], &[0.5f64.ln()]);
    let lp3 = gaussian_logp(&[1.2], &[0.4], &[0.0]) - 0.5f64.ln();
    assert!((lp2 - lp3).abs() < 1e-12);
}

#[test]
fn sampling_respects_seed_and_statistics() {
    let model = PolicyModel::new(PolicyKind::Primitive, &small_ppo(), 4).unwrap();
    let obs = vec![0.1; OBSERVATION_DIM];
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(model.sample(&obs, &mut r1).unwrap(), model.sample(&obs, &mut r2).unwrap());

    // empirical mean of samples approaches the deterministic mean action
    let (mean, _) = model.mean_action(&obs).unwrap();
    let mut acc = [0.0f64; 2];
    let n = 4000;
    for _ in 0..n {
        let s = model.sample(&obs, &mut r1).unwrap();
        acc[0] += s.gauss[0];
        acc[1] += s.gauss[1];
    }
    let sd = model.log_std()[0].exp();
    for d in 0..2 {
        let emp = acc[d] / n as f64;
        assert!(
            (emp - mean[d]).abs() < 4.0 * sd / (n as f64).sqrt(),
            "dim {d}: {emp} vs {}",
            mean[d]
        );
    }
}

#[test]
fn figar_repeat_distribution_matches_softmax() {
    let model = PolicyModel::new(PolicyKind::Figar { max_repeat: 4 }, &small_ppo(), 6).unwrap();
    let obs = vec![0.3; OBSERVATION_DIM];
    let out = forward(&model.actor.0, &model.actor.1, &Tensor::from_vec(obs.clone())).unwrap();
    let probs = super::softmax(&out.data()[2..]);
    let mut counts = [0usize; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 20_000;
    for _ in 0..n {
        counts[model.sample(&obs, &mut rng).unwrap().repeat.unwrap()] += 1;
    }
    for k in 0..4 {
        let emp = counts[k] as f64 / n as f64;
        assert!(
            (emp - probs[k]).abs() < 0.02,
            "repeat {k}: empirical {emp} vs {}",
            probs[k]
        );
    }
}

#[test]
fn actor_gradient_matches_finite_differences() {
    // Scalar objective for one sample: -(ppo surrogate + entropy bonus),
    // exactly what one minibatch element contributes (mb = 1).
    let cfg = small_ppo();
    let kind = PolicyKind::Figar { max_repeat: 3 };
    let model = PolicyModel::new(kind, &cfg, 13).unwrap();
    let obs = vec![0.2, -0.1, 0.4, 0.0, 0.3, 0.9, 0.0, 0.0, 0.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sample = model.sample(&obs, &mut rng).unwrap();
    let adv = 0.8;
    let old_logp = sample.logp - 0.1; // force a non-unit ratio

    let eval = |m: &PolicyModel| -> f64 {
        let out = forward(&m.actor.0, &m.actor.1, &Tensor::from_vec(obs.clone())).unwrap();
        let gdim = m.kind.gaussian_dim();
        let log_std = m.log_std();
        let mut logp = gaussian_logp(&sample.gauss, &out.data()[..gdim], log_std);
        let p = super::softmax(&out.data()[gdim..]);
        logp += p[sample.repeat.unwrap()].ln();
        let ratio = (logp - old_logp).exp();
        let h_gauss: f64 = log_std.iter().map(|ls| ls + 0.5 * (LOG_2PI + 1.0)).sum();
        let h_cat: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        -(ppo_objective(ratio, adv, cfg.clip) + cfg.entropy_coef * (h_gauss + h_cat))
    };

    // Analytic gradient, mirroring the training-loop computation.
    let gdim = model.kind.gaussian_dim();
    let cache = forward_cached(&model.actor.0, &model.actor.1, &Tensor::from_vec(obs.clone()))
        .unwrap();
    let out = cache.output().data().to_vec();
    let log_std = model.log_std().to_vec();
    let mut logp = gaussian_logp(&sample.gauss, &out[..gdim], &log_std);
    let p = super::softmax(&out[gdim..]);
    logp += p[sample.repeat.unwrap()].ln();
    let ratio = (logp - old_logp).exp();
    let coef = ppo_clip_coef(ratio, adv, cfg.clip);
    let mut gout = vec![0.0; out.len()];
    let mut g_log_std = vec![0.0; gdim];
    for d in 0..gdim {
        let sd = log_std[d].exp();
        let diff = sample.gauss[d] - out[d];
        gout[d] = -coef * diff / (sd * sd);
        g_log_std[d] = -(coef * (diff * diff / (sd * sd) - 1.0) + cfg.entropy_coef);
    }
    let h_cat: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
    for k in 0..p.len() {
        let dlogp = (if k == sample.repeat.unwrap() { 1.0 } else { 0.0 }) - p[k];
        let dh = -p[k] * (p[k].ln() + h_cat);
        gout[gdim + k] = -(coef * dlogp + cfg.entropy_coef * dh);
    }
    let (mut ga, _) = backward(
        &model.actor.0,
        &model.actor.1,
        &cache,
        &Tensor::new(vec![out.len()], gout).unwrap(),
    )
    .unwrap();
    if let Some((_, t)) = ga.tensors.iter_mut().find(|(n, _)| n == LOG_STD_NAME) {
        for (acc, g) in t.data_mut().iter_mut().zip(&g_log_std) {
            *acc += g;
        }
    }

    let h = 1e-5;
    let mut checked = 0;
    for ti in 0..ga.tensors.len() {
        let n = ga.tensors[ti].1.numel();
        for _ in 0..4 {
            let coord = rng.gen_range(0..n);
            let analytic = ga.tensors[ti].1.data()[coord];
            let mut plus = model.clone();
            plus.actor.1.tensors[ti].1.data_mut()[coord] += h;
            let mut minus = model.clone();
            minus.actor.1.tensors[ti].1.data_mut()[coord] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = analytic.abs().max(fd.abs()).max(1e-4);
            assert!(
                (analytic - fd).abs() / denom < 1e-3,
                "tensor {ti} ({}) coord {coord}: analytic {analytic} vs fd {fd}",
                ga.tensors[ti].0
            );
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn latent_policy_requires_favae() {
    let world = WorldConfig::base(0);
    let err = train_policy(
        &world,
        PolicyKind::Latent { latent_dim: 12 },
        None,
        &small_ppo(),
        0,
    );
    assert!(matches!(err, Err(Error::Usage(_))));
}

fn toy_favae() -> FavaeModel {
    let cfg = LadderConfig {
        channels: (6, 8, 8),
        epochs: 2,
        anneal_epochs: 1,
        c_last: vec![0.1, 0.1, 0.1],
        beta: 1.0,
        ..LadderConfig::for_input_len(11)
    };
    let corpus: Vec<_> = (0..6)
        .map(|i| {
            let seg = MacroSegment {
                actions: (0..4 + i % 5)
                    .map(|t| PrimitiveAction::new((t as f64).sin() * 0.3, 0.2))
                    .collect(),
                episode: 0,
                start: 0,
                end: 4 + i % 5,
            };
            pad_segment(&seg, 11).unwrap()
        })
        .collect();
    train_favae(&corpus, &cfg, 1).unwrap()
}

#[test]
fn training_smoke_all_kinds_and_determinism() {
    let world = WorldConfig::base(0);
    let cfg = small_ppo();
    let favae = toy_favae();
    for kind in [
        PolicyKind::Primitive,
        PolicyKind::Figar { max_repeat: 5 },
        PolicyKind::Latent { latent_dim: 12 },
    ] {
        let f = if matches!(kind, PolicyKind::Latent { .. }) {
            Some(&favae)
        } else {
            None
        };
        let (m1, l1) = train_policy(&world, kind, f, &cfg, 7).unwrap();
        assert!(!l1.is_empty());
        assert!(l1.last().unwrap().cumulative_steps >= cfg.total_steps);
        for (i, log) in l1.iter().enumerate() {
            assert_eq!(log.update, i);
            assert!(log.entropy.is_finite());
            assert!(log.value_loss.is_finite());
            assert!(log.mean_macro_len >= 1.0);
        }
        if matches!(kind, PolicyKind::Primitive) {
            assert!(l1.iter().all(|l| (l.mean_macro_len - 1.0).abs() < 1e-12));
        }
        let (m2, l2) = train_policy(&world, kind, f, &cfg, 7).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
        let report = evaluate(&world, &m1, f, 3, 5).unwrap();
        assert_eq!(report.episodes, 3);
        assert!(report.mean_return.is_finite());
        let report2 = evaluate(&world, &m1, f, 3, 5).unwrap();
        assert_eq!(report, report2);
    }
}

#[test]
fn macro_actions_per_kind() {
    let favae = toy_favae();
    let z = vec![0.1; 12];
    let acts = macro_actions(&PolicyKind::Latent { latent_dim: 12 }, Some(&favae), &z, None)
        .unwrap();
    assert!(!acts.is_empty() && acts.len() <= 11);

    let acts = macro_actions(&PolicyKind::Primitive, None, &[0.4, -0.2], None).unwrap();
    assert_eq!(acts, vec![PrimitiveAction::new(0.4, -0.2)]);

    let acts =
        macro_actions(&PolicyKind::Figar { max_repeat: 6 }, None, &[0.4, -0.2], Some(2)).unwrap();
    assert_eq!(acts.len(), 3);
    assert!(acts.iter().all(|a| *a == PrimitiveAction::new(0.4, -0.2)));
}

#[test]
fn checkpoint_round_trip() {
    let model = PolicyModel::new(PolicyKind::Figar { max_repeat: 20 }, &small_ppo(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    model.save(&path).unwrap();
    let loaded = PolicyModel::load(&path).unwrap();
    assert_eq!(model, loaded);
    let obs = vec![0.0; OBSERVATION_DIM];
    assert_eq!(model.mean_action(&obs).unwrap(), loaded.mean_action(&obs).unwrap());
}

#[test]
fn simple_task_is_learnable_with_primitive_ppo() {
    // A short training run on the Base task should already raise the mean
    // return well above the initial random policy.
    let world = WorldConfig::base(0);
    let cfg = PpoConfig {
        horizon: 1024,
        total_steps: 30_000,
        hidden: 32,
        ..PpoConfig::default()
    };
    let (_, logs) = train_policy(&world, PolicyKind::Primitive, None, &cfg, 3).unwrap();
    let first: Vec<f64> = logs.iter().take(3).filter_map(|l| l.mean_return).collect();
    let last: Vec<f64> = logs.iter().rev().take(3).filter_map(|l| l.mean_return).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&last) > mean(&first),
        "no improvement: {:?} -> {:?}",
        first,
        last
    );
}
