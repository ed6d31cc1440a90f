use icl_lab::features::{make_features, FeatureMode};
use icl_lab::grad::{analytic_grad, fd_oracle, projected_grad, relative_frobenius_error};
use icl_lab::gradcheck::{random_instance, InstanceLimits};
use icl_lab::model::{forward, forward_shifted, loss_identity_residual, AttentionState};
use icl_lab::prompt::{in_concentration_set, sample_prompt_rng};
use icl_lab::rng::rng_from_seed;
use icl_lab::task::{sample_task, TaskFamily};
use proptest::prelude::*;

fn exact_limits() -> InstanceLimits {
    InstanceLimits {
        mode: FeatureMode::Orthogonal,
        ..InstanceLimits::default()
    }
}

fn family() -> impl Strategy<Value = TaskFamily> {
    prop_oneof![
        Just(TaskFamily::Linear),
        Just(TaskFamily::Exponential),
        Just(TaskFamily::TwoLevel)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_a_distribution(seed in any::<u64>()) {
        let inst = random_instance(seed, &InstanceLimits::default()).unwrap();
        let out = forward(&inst.state, &inst.prompt).unwrap();
        let total: f64 = out.token_scores.sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(out.token_scores.iter().all(|&a| (0.0..=1.0).contains(&a)));
        let by_class: f64 = out.feature_scores.iter().sum();
        prop_assert!((by_class - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logit_shift_leaves_output_unchanged(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let inst = random_instance(seed, &InstanceLimits::default()).unwrap();
        let a = forward(&inst.state, &inst.prompt).unwrap();
        let b = forward_shifted(&inst.state, &inst.prompt, shift).unwrap();
        for (x, y) in a.token_scores.iter().zip(b.token_scores.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.prediction - b.prediction).abs() <= 1e-12 * (1.0 + a.prediction.abs()));
    }

    #[test]
    fn prediction_lies_in_response_hull(seed in any::<u64>()) {
        let inst = random_instance(seed, &InstanceLimits::default()).unwrap();
        let out = forward(&inst.state, &inst.prompt).unwrap();
        let lo = inst.prompt.responses.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = inst.prompt.responses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        prop_assert!(out.prediction >= lo - slack && out.prediction <= hi + slack);
    }

    #[test]
    fn zero_state_attends_uniformly(seed in any::<u64>()) {
        let inst = random_instance(seed, &InstanceLimits::default()).unwrap();
        let zero = AttentionState::zeros(inst.features.dim());
        let out = forward(&zero, &inst.prompt).unwrap();
        let n = inst.prompt.len() as f64;
        prop_assert!(out.token_scores.iter().all(|&a| a == 1.0 / n));
    }

    #[test]
    fn loss_decomposition_holds(seed in any::<u64>()) {
        let inst = random_instance(seed, &exact_limits()).unwrap();
        let out = forward(&inst.state, &inst.prompt).unwrap();
        let res = loss_identity_residual(&out, &inst.prompt, &inst.task).unwrap();
        let scale = 1.0 + (out.prediction - inst.prompt.query_label).powi(2);
        prop_assert!(res.abs() <= 1e-12 * scale);
    }

    #[test]
    fn class_gradient_forms(seed in any::<u64>()) {
        let inst = random_instance(seed, &exact_limits()).unwrap();
        let rec = analytic_grad(&inst.state, &inst.prompt).unwrap();
        let out = &rec.output;
        let k = inst.features.count();
        // oracle: class attention summed from the token scores
        let mut attn = vec![0.0; k];
        for (i, &f) in inst.prompt.token_features.iter().enumerate() {
            attn[f] += out.token_scores[i];
        }
        let r = out.prediction - inst.prompt.query_label;
        let ks = inst.prompt.query_feature;
        let scale = 1.0 + r * r;
        prop_assert!((rec.class_grads[ks] - attn[ks] * r * r).abs() <= 1e-12 * scale);
        for m in (0..k).filter(|&m| m != ks) {
            let want = attn[m] * r.abs() * (out.prediction - inst.task.feature_value(m)).abs();
            prop_assert!((rec.class_grads[m].abs() - want).abs() <= 1e-12 * scale);
        }
        let total: f64 = rec.class_grads.iter().sum();
        prop_assert!(total.abs() <= 1e-12 * scale);
        prop_assert!(rec.class_grads[ks] >= 0.0);
    }

    #[test]
    fn projection_scales_by_rho_fourth(seed in any::<u64>()) {
        let inst = random_instance(seed, &exact_limits()).unwrap();
        let pg = projected_grad(&inst.state, &inst.prompt, &inst.features).unwrap();
        let rho4 = pg.rho4.unwrap();
        let ks = inst.prompt.query_feature;
        let g = &pg.record.class_grads;
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (m, &gm) in g.iter().enumerate() {
            prop_assert!((pg.matrix[[ks, m]] - rho4 * gm).abs() <= 1e-9 * rho4 * norm);
        }
    }

    #[test]
    fn concentration_set_grows_with_delta(
        counts in prop::collection::vec(0usize..60, 2..7),
        d1 in 0.0f64..0.5,
        extra in 0.0f64..0.5,
    ) {
        let k = counts.len();
        let probs = vec![1.0 / k as f64; k];
        if in_concentration_set(&counts, &probs, d1) {
            prop_assert!(in_concentration_set(&counts, &probs, d1 + extra));
        }
    }

    #[test]
    fn sampled_tasks_stay_in_class(
        fam in family(),
        seed in any::<u64>(),
        l in 0.05f64..3.0,
        k in 2usize..7,
    ) {
        let fs = make_features(8, k, 2.0, FeatureMode::Perturbed, seed ^ 1).unwrap();
        let t = sample_task(fam, l, &fs, seed).unwrap();
        prop_assert!(t.check_class(&fs, 0.25).is_ok());
        prop_assert!(t.max_pair_slope(&fs) <= l * (1.0 + 1e-9));
    }

    #[test]
    fn generated_features_meet_separation(
        d in 2usize..16,
        k in 1usize..8,
        delta in 0.1f64..10.0,
        perturbed in any::<bool>(),
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= d);
        let mode = if perturbed { FeatureMode::Perturbed } else { FeatureMode::Orthogonal };
        let fs = make_features(d, k, delta, mode, seed).unwrap();
        for (_, _, dist) in fs.pairwise_distances() {
            prop_assert!(dist >= 0.8 * delta && dist <= 1.2 * delta);
        }
        prop_assert!((fs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn analytic_gradient_matches_differences(seed in any::<u64>()) {
        let inst = random_instance(seed, &InstanceLimits::default()).unwrap();
        let a = analytic_grad(&inst.state, &inst.prompt).unwrap().grad_q;
        let fd = fd_oracle(&inst.state, &inst.prompt, 1e-5).unwrap();
        prop_assert!(relative_frobenius_error(&a, &fd) <= 1e-6);
    }

    #[test]
    fn single_and_double_precision_agree(seed in any::<u64>()) {
        let inst = random_instance(seed, &InstanceLimits::default()).unwrap();
        let a = forward(&inst.state, &inst.prompt).unwrap();
        let b = forward(&inst.state.cast::<f32>(), &inst.prompt.cast::<f32>()).unwrap();
        let scale = 1.0 + a.prediction.abs();
        prop_assert!((a.prediction - b.prediction as f64).abs() <= 1e-3 * scale);
    }
}

#[test]
fn exact_prompt_tokens_are_features() {
    let fs = make_features(6, 3, 1.5, FeatureMode::Orthogonal, 2).unwrap();
    let t = sample_task(TaskFamily::Linear, 0.7, &fs, 4).unwrap();
    let p = sample_prompt_rng(&fs, &t, 40, 0.0, &mut rng_from_seed(9)).unwrap();
    for (i, &k) in p.token_features.iter().enumerate() {
        assert_eq!(p.inputs.row(i), fs.vector(k));
        assert_eq!(p.responses[i], t.feature_value(k));
    }
    assert_eq!(p.counts.iter().sum::<usize>(), 40);
}
