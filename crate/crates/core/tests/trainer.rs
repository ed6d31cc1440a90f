use icl_lab::features::{make_features, FeatureMode, FeatureSet};
use icl_lab::model::{forward, AttentionState};
use icl_lab::task::{sample_task, TaskFamily, TaskSpec};
use icl_lab::trainer::{
    default_learning_rate, evaluate_icl, icl_eval_prompts, icl_mse, parse_trajectory_csv, resolve_regime, train,
    Regime, TrainConfig,
};

fn grid_features() -> FeatureSet {
    make_features(15, 4, 3.0, FeatureMode::Orthogonal, 0).unwrap()
}

fn short_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: Some(0.05),
        max_epochs: 40,
        prompts_per_epoch: 100,
        eval_prompts: 50,
        prompt_len: 100,
        eps_target: 0.1,
        seed,
        stop_at_convergence: false,
        ..TrainConfig::default()
    }
}

#[test]
fn bilinear_increments_follow_class_gradients() {
    let fs = grid_features();
    let rho = fs.orthogonal_norm().unwrap();
    let rho4 = rho.powi(4);
    let cfg = short_cfg(1);
    let eta = cfg.learning_rate.unwrap();
    let res = train(AttentionState::zeros(15), &fs, &TaskSpec::new(TaskFamily::Exponential, 0.4), &cfg).unwrap();
    let mut worst = 0.0f64;
    for w in res.log.rows.windows(2) {
        let step = &w[1].bilinear - &w[0].bilinear;
        let want = w[0].g.mapv(|x| eta * rho4 * x);
        let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let err = (&step - &want).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(err / scale);
    }
    assert!(worst <= 1e-9, "worst relative deviation {worst:e}");
}

#[test]
fn diagonal_weights_grow_over_windows() {
    let fs = grid_features();
    let cfg = TrainConfig {
        max_epochs: 200,
        ..short_cfg(2)
    };
    let res = train(AttentionState::zeros(15), &fs, &TaskSpec::new(TaskFamily::TwoLevel, 0.2), &cfg).unwrap();
    let rows = &res.log.rows;
    let end = res.log.converged_at.unwrap_or(rows.len() - 1);
    for start in (0..end.saturating_sub(20)).step_by(20) {
        for k in 0..4 {
            let dq = rows[start + 20].q_diag(k) - rows[start].q_diag(k);
            assert!(dq > 0.0, "window at {start}, feature {k}: {dq}");
        }
    }
}

#[test]
fn fixed_seed_reproduces_the_log() {
    let fs = grid_features();
    let task = TaskSpec::new(TaskFamily::Exponential, 1.0);
    let a = train(AttentionState::zeros(15), &fs, &task, &short_cfg(9)).unwrap();
    let b = train(AttentionState::zeros(15), &fs, &task, &short_cfg(9)).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    let c = train(AttentionState::zeros(15), &fs, &task, &short_cfg(10)).unwrap();
    assert_ne!(a.log.to_csv(), c.log.to_csv());
}

#[test]
fn emitted_csv_parses_with_invariants() {
    let fs = grid_features();
    let res = train(
        AttentionState::zeros(15),
        &fs,
        &TaskSpec::new(TaskFamily::Linear, 0.3),
        &short_cfg(4),
    )
    .unwrap();
    let parsed = parse_trajectory_csv(&res.log.to_csv()).unwrap();
    assert_eq!(parsed.feature_count, 4);
    assert_eq!(parsed.epochs.len(), res.log.rows.len());
    assert!(parsed.epochs.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(parsed.bilinear[0].len(), 16);
}

#[test]
fn default_schedule_never_diverges_on_the_grid() {
    let fs = make_features(15, 4, 3.0, FeatureMode::Orthogonal, 0).unwrap();
    for l in [0.1, 0.2, 0.4, 1.0, 1.5, 2.0] {
        let cfg = TrainConfig {
            learning_rate: None,
            max_epochs: 100,
            prompts_per_epoch: 100,
            eval_prompts: 50,
            prompt_len: 100,
            eps_target: 0.1,
            seed: 3,
            stop_at_convergence: false,
            ..TrainConfig::default()
        };
        let res = train(AttentionState::zeros(15), &fs, &TaskSpec::new(TaskFamily::Exponential, l), &cfg);
        let res = res.unwrap_or_else(|e| panic!("L={l}: {e}"));
        assert!(res.log.rows.iter().all(|r| r.loss.is_finite()));
    }
}

#[test]
fn regime_and_rate_defaults() {
    let delta = 0.2;
    assert_eq!(resolve_regime(Regime::Auto, 1.0, 3.0, delta), Regime::Flat);
    assert_eq!(resolve_regime(Regime::Auto, 2.0, 3.0, delta), Regime::Sharp);
    let flat = default_learning_rate(Regime::Flat, 4, 0.5, 3.0, 0.1);
    let sharp = default_learning_rate(Regime::Sharp, 4, 0.5, 3.0, 0.1);
    assert!((flat - 0.4 / 2.25).abs() < 1e-15);
    assert!((sharp - 0.1 * flat).abs() < 1e-15);
}

#[test]
fn untrained_mse_matches_uniform_attention_enumeration() {
    let fs = grid_features();
    let tasks: Vec<_> = (0..5)
        .map(|s| sample_task(TaskFamily::TwoLevel, 0.5, &fs, 100 + s).unwrap())
        .collect();
    let zero = AttentionState::zeros(15);
    let prompts = icl_eval_prompts(&fs, &tasks, 50, 20, 8).unwrap();
    let got = icl_mse(&zero, &prompts).unwrap();
    // oracle: uniform attention averages the responses
    let want: f64 = prompts
        .iter()
        .map(|p| {
            let mean = p.responses.iter().sum::<f64>() / p.len() as f64;
            (mean - p.query_label).powi(2)
        })
        .sum::<f64>()
        / prompts.len() as f64;
    assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
    assert_eq!(evaluate_icl(&zero, &fs, &tasks, 50, 20, 8).unwrap(), got);
}

#[test]
fn evaluation_does_not_touch_the_state() {
    let fs = grid_features();
    let tasks = vec![sample_task(TaskFamily::Linear, 0.5, &fs, 1).unwrap()];
    let state = AttentionState::from_matrix(ndarray::Array2::eye(15)).unwrap();
    let before = state.clone();
    let prompts = icl_eval_prompts(&fs, &tasks, 30, 10, 2).unwrap();
    icl_mse(&state, &prompts).unwrap();
    assert_eq!(state, before);
    let out = forward(&state, &prompts[0]).unwrap();
    assert!(out.loss.is_finite());
}

#[test]
fn grid_run_at_small_lipschitz_converges_with_default_rate() {
    let fs = grid_features();
    let cfg = TrainConfig {
        learning_rate: None,
        max_epochs: 400,
        prompts_per_epoch: 300,
        eval_prompts: 200,
        prompt_len: 100,
        eps_target: 0.1,
        seed: 12,
        stop_at_convergence: false,
        ..TrainConfig::default()
    };
    let res = train(AttentionState::zeros(15), &fs, &TaskSpec::new(TaskFamily::Exponential, 0.1), &cfg).unwrap();
    let loss: Vec<f64> = res.log.rows.iter().map(|r| r.loss).collect();
    let windows: Vec<f64> = loss.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    let t = res.log.converged_at.expect("1 - Attn_k below 0.1 within 400 epochs");
    assert!(t < 400);
}

#[test]
fn two_level_flat_run_ends_concentrated() {
    let fs = grid_features();
    let cfg = TrainConfig {
        learning_rate: Some(0.055),
        max_epochs: 5000,
        prompts_per_epoch: 200,
        eval_prompts: 100,
        prompt_len: 2000,
        eps_target: 0.05,
        seed: 13,
        ..TrainConfig::default()
    };
    let res = train(AttentionState::zeros(15), &fs, &TaskSpec::new(TaskFamily::TwoLevel, 0.5), &cfg).unwrap();
    assert!(res.log.converged_at.is_some());
    let last = res.log.rows.last().unwrap();
    let min_attn = last.attn.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(min_attn >= 1.0 - 0.05, "{min_attn}");
}
