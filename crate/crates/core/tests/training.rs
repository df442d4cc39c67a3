mod common;

use framesonic::autograd::Graph;
use framesonic::checkpoint::{decode_training, encode_training, Checkpoint};
use framesonic::params::ParamStore;
use framesonic::pipeline;
use framesonic::tensor::Mat;
use framesonic::train::{
    ect_map, loss_and_grads, train, train_step, EctMapCfg, EctPreset, Objective, TrainState,
};
use framesonic::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn heldout_loss(
    arch: &framesonic::model::Arch,
    params: &ParamStore<f64>,
    clips: &[framesonic::model::TrainClip],
    objective: &Objective,
    rope: &framesonic::rope::RopeConfig,
) -> f64 {
    (0..16)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + s);
            loss_and_grads(arch, params, params, clips, objective, 0, rope, &mut rng).unwrap().0
        })
        .sum::<f64>()
        / 16.0
}

#[test]
fn stage1_loss_falls_on_heldout_batch() {
    let cfg = common::tiny_config();
    let (pre, arch, params) = common::setup::<f64>(&cfg);
    let held = common::clips(&cfg, &pre, 8, cfg.clip_frames, 77);
    let objective = Objective::Stage1(cfg.stage1());
    let rope = cfg.rope();
    let before = heldout_loss(&arch, &params, &held, &objective, &rope);
    let mut state = TrainState::fresh(params, &cfg.optim(1));
    let mut src = pipeline::source(&cfg, &pre, 1);
    train(&arch, &mut state, &mut src, &objective, &cfg.optim(1), 2000, &rope, |_, _| Ok(())).unwrap();
    let after = heldout_loss(&arch, &state.ema, &held, &objective, &rope);
    assert!(after < before - 1.0, "held-out loss {before} -> {after}");
}

#[test]
fn teacher_receives_no_gradient() {
    let mut cfg = common::tiny_config();
    cfg.teacher_rate = 1.0;
    let (pre, arch, mut params) = common::setup::<f64>(&cfg);
    common::perturb(&mut params, 3, 0.1);
    let s1 = TrainState::fresh(params, &cfg.optim(1));
    let mut state = pipeline::begin_stage2(&cfg, &s1).unwrap();
    let teacher = common::fingerprint(&state.teacher);
    let student = common::fingerprint(&state.student);
    let mut src = pipeline::source(&cfg, &pre, 2);
    let objective = Objective::Stage2(cfg.stage2());
    for _ in 0..3 {
        train_step(&arch, &mut state, &mut src, &objective, &cfg.optim(2), 10, &cfg.rope()).unwrap();
    }
    assert_eq!(common::fingerprint(&state.teacher), teacher);
    assert_ne!(common::fingerprint(&state.student), student);
}

#[test]
fn stage2_requires_stage1_state() {
    let cfg = common::tiny_config();
    let (_, _, params) = common::setup::<f64>(&cfg);
    let s1 = TrainState::fresh(params, &cfg.optim(1));
    let s2 = pipeline::begin_stage2(&cfg, &s1).unwrap();
    assert!(matches!(pipeline::begin_stage2(&cfg, &s2), Err(Error::Config(_))));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = common::tiny_config();
    cfg.s1_iters = 40;
    let (pre, arch, params) = common::setup::<f32>(&cfg);
    let meta = pipeline::meta(&cfg);

    let mut whole = TrainState::fresh(params.clone(), &cfg.optim(1));
    pipeline::run_stage(&cfg, &arch, &mut whole, &pre, |_, _| Ok(())).unwrap();

    let mut half = TrainState::fresh(params, &cfg.optim(1));
    let mut src = pipeline::source(&cfg, &pre, 1);
    let obj = Objective::Stage1(cfg.stage1());
    train(&arch, &mut half, &mut src, &obj, &cfg.optim(1), 40, &cfg.rope(), |log, _| {
        if log.iter == 19 {
            Err(Error::Invalid("stop".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert_eq!(half.iter, 20);
    let bytes = encode_training(&half, &pre, &meta).unwrap().to_bytes();
    let (_, mut resumed, pre2) =
        decode_training::<f32>(&Checkpoint::from_bytes(&bytes).unwrap(), &cfg.model(), &meta.model_hash).unwrap();
    let mut losses = Vec::new();
    pipeline::run_stage(&cfg, &arch, &mut resumed, &pre2, |log, _| {
        losses.push(log.loss);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 20);
    assert_eq!(common::fingerprint(&resumed.student), common::fingerprint(&whole.student));
    assert_eq!(common::fingerprint(&resumed.ema), common::fingerprint(&whole.ema));
}

#[test]
fn non_finite_loss_names_iteration_and_token() {
    let cfg = common::tiny_config();
    let (pre, arch, mut params) = common::setup::<f64>(&cfg);
    let id = params.id("head.u.b").unwrap();
    params.get_mut(id).as_mut_slice().fill(f64::NAN);
    let mut state = TrainState::fresh(params, &cfg.optim(1));
    let mut src = pipeline::source(&cfg, &pre, 1);
    let err = train_step(&arch, &mut state, &mut src, &Objective::Stage1(cfg.stage1()), &cfg.optim(1), 10, &cfg.rope())
        .unwrap_err();
    match err {
        Error::NonFiniteLoss { iter, t, token } => {
            assert_eq!(iter, 0);
            assert!(t > 0.0);
            assert!(token < cfg.batch * cfg.clip_frames);
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(Error::NonFiniteLoss { iter: 0, t: 1.0, token: 0 }.exit_code(), 4);
}

/// Gradient descent on `lambda e^{-u} L + u` through the autograd engine
/// settles at the analytic minimizer `ln(lambda L)`.
#[test]
fn uncertainty_minimizer_is_log_of_weighted_residual() {
    for (lambda, resid) in [(8.0, 0.3), (1.0, std::f64::consts::E), (2.5, 4.0)] {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("u", Mat::zeros(1, 1)).unwrap();
        for _ in 0..2000 {
            let mut g = Graph::new(&store);
            let u = g.param(id);
            let neg = g.scale(u, -1.0);
            let e = g.exp(neg);
            let w = g.scale(e, lambda * resid);
            let loss = g.add(w, u);
            let grad = g.backward(loss).into_param_grads(&store);
            let step = 0.5 * grad[0].get(0, 0);
            store.get_mut(id).as_mut_slice()[0] -= step;
        }
        let u = store.get(id).get(0, 0);
        assert!((u - (lambda * resid).ln()).abs() <= 1e-3, "u = {u}, want {}", (lambda * resid).ln());
    }
}

proptest! {
    #[test]
    fn ect_map_stays_below_t_and_anneals(t in 1e-3f64..80.0, it in 0u64..50_000, total in 8u64..40_000, cf in any::<bool>()) {
        let p = if cf { EctPreset::Cf } else { EctPreset::In };
        let m = EctMapCfg::preset(p, total);
        let r = ect_map(t, it, &m);
        prop_assert!(r >= 0.0 && r <= t);
        // Strictly below t wherever the analytic gap is representable.
        let gap = m.q.powf(-(it.div_ceil(m.s) as f64)) * m.k / (1.0 + (m.b * t).exp());
        if gap > 1e-12 {
            prop_assert!(r < t);
        }
        let later = ect_map(t, it + m.s, &m);
        prop_assert!(t - later <= t - r);
    }

    #[test]
    fn ect_map_is_continuous_in_t(t in 1e-2f64..80.0, it in 0u64..10_000) {
        let m = EctMapCfg::preset(EctPreset::Cf, 10_000);
        let (a, b) = (ect_map(t, it, &m), ect_map(t + 1e-9, it, &m));
        prop_assert!((a - b).abs() <= 1e-7);
    }
}

#[test]
fn ect_map_reaches_identity_at_infinite_iterations() {
    let m = EctMapCfg::preset(EctPreset::Cf, 8000);
    for t in [0.01, 1.0, 80.0] {
        assert!((ect_map(t, u64::MAX / 2, &m) - t).abs() <= 1e-12 * t);
    }
}
