use cnnjit::optimizer::{evaluate_plan, fuse_activation, fuse_batchnorm, lower_to_units, UnitKind};
use cnnjit::{build_graph, interpret, optimize, CodegenOptions, CompiledNetwork};
use cnnjit_testkit::{self as kit, BnPattern, BN_PATTERNS};

fn has_batch_norm(plan: &cnnjit::FusionPlan) -> bool {
    plan.units
        .iter()
        .any(|u| matches!(u.kind, UnitKind::BatchNorm(_)))
}

#[test]
fn fused_compiled_matches_unfused_interpreter() {
    let mut rng = kit::rng(2024);
    let mut fused = [0usize; 3];
    for case in 0..1000 {
        let pattern = BN_PATTERNS[case % 3];
        let model = kit::bn_pattern_model(&mut rng, pattern);
        let graph = build_graph(&model.manifest, &model.weights).unwrap();
        let inputs = kit::random_inputs(&mut kit::rng(case as u64), &graph);
        let expected = interpret(&graph, &inputs).unwrap();
        let mut net = CompiledNetwork::from_graph(&graph, &CodegenOptions::default()).unwrap();
        if !has_batch_norm(net.plan()) {
            fused[case % 3] += 1;
        }
        let err = kit::max_abs_diff_all(&kit::run(&mut net, &inputs), &expected);
        assert!(
            err <= 1e-5,
            "{pattern:?} case {case}: {err}\n{}",
            net.plan().dump()
        );
    }
    // pattern (b) stays unfused only for padded convolutions
    assert_eq!(fused[0], 334);
    assert!(fused[1] > 250, "{fused:?}");
    assert_eq!(fused[2], 333);
}

#[test]
fn each_pattern_rewrites_as_expected() {
    let mut rng = kit::rng(6);
    for pattern in BN_PATTERNS {
        for _ in 0..50 {
            let model = kit::bn_pattern_model(&mut rng, pattern);
            let graph = build_graph(&model.manifest, &model.weights).unwrap();
            let plan = optimize(&graph).unwrap();
            let weighted = plan
                .units
                .iter()
                .find(|u| matches!(u.kind, UnitKind::Dense(_) | UnitKind::Conv2D(_)))
                .unwrap();
            match pattern {
                BnPattern::After => {
                    assert!(weighted.post_affine.is_none() && !has_batch_norm(&plan))
                }
                BnPattern::AfterActivation => assert!(weighted.post_affine.is_some()),
                BnPattern::Before => {
                    if !has_batch_norm(&plan) {
                        assert_eq!(weighted.inputs, plan.inputs);
                    }
                }
            }
        }
    }
}

#[test]
fn optimization_reaches_a_fixpoint() {
    let mut rng = kit::rng(17);
    for _ in 0..300 {
        let model = kit::random_graph_model(&mut rng, 10);
        let graph = build_graph(&model.manifest, &model.weights).unwrap();
        let plan = optimize(&graph).unwrap();
        assert_eq!(fuse_batchnorm(&fuse_activation(&plan)), plan);
    }
}

#[test]
fn every_rewrite_preserves_semantics() {
    let mut rng = kit::rng(18);
    for case in 0..300 {
        let model = if case % 2 == 0 {
            kit::random_graph_model(&mut rng, 10)
        } else {
            kit::bn_pattern_model(&mut rng, BN_PATTERNS[case % 3])
        };
        let graph = build_graph(&model.manifest, &model.weights).unwrap();
        let inputs = kit::random_inputs(&mut rng, &graph);
        let expected = interpret(&graph, &inputs).unwrap();
        let lowered = lower_to_units(&graph).unwrap();
        let stages = [
            lowered.clone(),
            fuse_activation(&lowered),
            fuse_batchnorm(&lowered),
            optimize(&graph).unwrap(),
        ];
        for (i, plan) in stages.iter().enumerate() {
            let got = evaluate_plan(plan, &inputs);
            let got: Vec<Vec<f32>> = got.into_iter().map(|t| t.data).collect();
            let err = kit::max_abs_diff_all(&got, &expected);
            assert!(err <= 1e-5, "case {case} stage {i}: {err}\n{}", plan.dump());
        }
    }
}

#[test]
fn each_graph_node_lands_in_at_most_one_unit() {
    let mut rng = kit::rng(19);
    for _ in 0..300 {
        let model = kit::random_graph_model(&mut rng, 10);
        let graph = build_graph(&model.manifest, &model.weights).unwrap();
        let plan = optimize(&graph).unwrap();
        for (node, units) in plan.node_units() {
            assert_eq!(units.len(), 1, "node {node} in {units:?}");
        }
    }
}
