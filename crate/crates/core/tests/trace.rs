use cnnjit::codegen::asm::Insn;
use cnnjit::codegen::{Marker, TraceItem};
use cnnjit::model::{Activation, LayerKind};
use cnnjit::{
    ActivationMode, ApproximationOptions, CodegenOptions, CompiledNetwork, Model, RegisterBudget,
    SoftmaxExp, TensorShape,
};
use cnnjit_testkit::{self as kit, Net};
use iced_x86::{Decoder, DecoderOptions, Mnemonic, OpKind, Register};

fn options(n_xmm: usize, k: usize) -> CodegenOptions {
    CodegenOptions {
        budget: RegisterBudget { n_xmm, k },
        ..Default::default()
    }
}

fn compile(model: &Model, options: &CodegenOptions) -> CompiledNetwork {
    CompiledNetwork::compile(model, options).unwrap()
}

/// Every traced instruction decodes back from the code bytes at its
/// offset, with the same length and mnemonic, and the code has no bytes
/// the trace does not account for.
fn assert_trace_matches_bytes(net: &CompiledNetwork, n_xmm: usize) {
    let artifact = net.artifact();
    let mut decoder = Decoder::with_ip(64, &artifact.code, 0, DecoderOptions::NONE);
    let mut traced = artifact.trace.instructions();
    let mut end = 0;
    while decoder.can_decode() {
        let insn = decoder.decode();
        assert!(!insn.is_invalid(), "undecodable bytes at {:#x}", insn.ip());
        let (offset, len, ours) = traced
            .next()
            .expect("decoded more instructions than traced");
        assert_eq!(insn.ip() as usize, offset);
        assert_eq!(insn.len(), len, "length at {offset:#x}");
        let expected = match ours {
            Insn::Jnz { .. } => "jne".to_string(),
            other => other.mnemonic().to_string(),
        };
        let decoded = format!("{:?}", insn.mnemonic()).to_lowercase();
        assert_eq!(decoded, expected, "mnemonic at {offset:#x}");
        for i in 0..insn.op_count() {
            if insn.op_kind(i) != OpKind::Register {
                continue;
            }
            let reg = insn.op_register(i) as usize;
            if (Register::XMM0 as usize..=Register::XMM31 as usize).contains(&reg) {
                let index = reg - Register::XMM0 as usize;
                assert!(
                    index < n_xmm,
                    "xmm{index} at {offset:#x} with n_xmm = {n_xmm}"
                );
            }
        }
        end = offset + len;
    }
    assert!(
        traced.next().is_none(),
        "traced more instructions than decoded"
    );
    assert_eq!(end, artifact.code.len());
}

fn activation_model(n: usize, activation: Activation) -> Model {
    let mut net = Net::new();
    let x = net.input(TensorShape::Flat(n));
    let y = net.activation(&x, activation);
    net.build(&[&y])
}

fn batches(net: &CompiledNetwork) -> Vec<(usize, usize, usize)> {
    net.artifact()
        .trace
        .markers()
        .filter_map(|m| match *m {
            Marker::Batch { lanes, repeat, k } => Some((lanes, repeat, k)),
            _ => None,
        })
        .collect()
}

#[test]
fn decoder_agrees_with_trace_on_random_networks() {
    let mut rng = kit::rng(11);
    let modes = [
        ApproximationOptions::default(),
        ApproximationOptions {
            activation_mode: ActivationMode::FastExp,
            softmax_exp: SoftmaxExp::Precise,
        },
    ];
    for case in 0..300 {
        let model = if case % 3 == 0 {
            kit::random_graph_model(&mut rng, 8)
        } else {
            let kind = kit::CASE_KINDS[case % kit::CASE_KINDS.len()];
            kit::single_layer_model(&mut rng, kind)
        };
        let n_xmm = [4, 6, 9, 16][case % 4];
        let opts = CodegenOptions {
            budget: RegisterBudget { n_xmm, k: 2 },
            approximations: modes[case % 2],
        };
        assert_trace_matches_bytes(&compile(&model, &opts), n_xmm);
    }
    for activation in [Activation::Tanh, Activation::Sigmoid, Activation::Relu] {
        for mode in [ActivationMode::Rational, ActivationMode::FastExp] {
            let opts = CodegenOptions {
                approximations: ApproximationOptions {
                    activation_mode: mode,
                    ..Default::default()
                },
                ..Default::default()
            };
            assert_trace_matches_bytes(&compile(&activation_model(37, activation), &opts), 16);
        }
    }
}

#[test]
fn elementwise_batches_take_the_largest_fitting_slice() {
    for (n, expected) in [
        (56, vec![(56, 1, 2)]),
        (57, vec![(56, 1, 2), (1, 1, 2)]),
        (112, vec![(56, 2, 2)]),
        (170, vec![(56, 3, 2), (2, 1, 2)]),
        (3, vec![(3, 1, 2)]),
    ] {
        let net = compile(&activation_model(n, Activation::Relu), &options(16, 2));
        assert_eq!(batches(&net), expected, "n = {n}");
    }
}

#[test]
fn batch_sizes_follow_the_budget() {
    let mut rng = kit::rng(5);
    for _ in 0..200 {
        use rand::Rng;
        let n = rng.gen_range(1..600);
        let n_xmm = rng.gen_range(4..=16);
        let k = rng.gen_range(1..n_xmm - 1);
        let net = compile(&activation_model(n, Activation::Relu), &options(n_xmm, k));
        let mut remaining = n;
        for (lanes, repeat, used_k) in batches(&net) {
            let capacity = 4 * (n_xmm - used_k);
            assert!(used_k >= k);
            for _ in 0..repeat {
                assert_eq!(
                    lanes,
                    remaining.min(capacity),
                    "n = {n}, budget ({n_xmm}, {k})"
                );
                remaining -= lanes;
            }
        }
        assert_eq!(remaining, 0);
        assert_trace_matches_bytes(&net, n_xmm);
    }
}

#[derive(PartialEq, PartialOrd, Debug, Clone, Copy)]
enum Phase {
    Load,
    Compute,
    Store,
}

#[test]
fn batches_load_then_compute_then_store() {
    for activation in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        let net = compile(
            &activation_model(131, activation),
            &CodegenOptions::default(),
        );
        let items = &net.artifact().trace.unit(0)[1..];
        let mut phase = None;
        let mut seen = 0;
        for item in items {
            match item {
                TraceItem::Marker(Marker::Batch { .. }) => {
                    phase = Some(Phase::Load);
                    seen += 1;
                }
                TraceItem::Insn { insn, .. } => {
                    let Some(current) = phase else { continue };
                    let this = match insn.memory() {
                        Some((m, true)) if m.base == cnnjit::codegen::asm::Gpr::Rdi => Phase::Store,
                        Some((m, false)) if m.base == cnnjit::codegen::asm::Gpr::Rdi => Phase::Load,
                        _ if matches!(
                            insn,
                            Insn::AddImm { .. } | Insn::Jnz { .. } | Insn::Pop(_) | Insn::Ret
                        ) =>
                        {
                            continue
                        }
                        _ => Phase::Compute,
                    };
                    assert!(
                        this >= current,
                        "{activation}: {insn} after {current:?} phase"
                    );
                    phase = Some(this);
                }
                _ => {}
            }
        }
        assert!(seen >= 2);
    }
}

fn rotations_per_block(net: &CompiledNetwork) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for item in &net.artifact().trace.items {
        match item {
            TraceItem::Marker(Marker::MatvecBlock { .. }) => current = Some((0, 0)),
            TraceItem::Marker(Marker::MatvecBlockEnd) => out.push(current.take().unwrap()),
            TraceItem::Insn { insn, .. } => {
                if let Some((rot, mul)) = current.as_mut() {
                    *rot += usize::from(insn.is_lane_rotation());
                    *mul += usize::from(insn.mnemonic() == "mulps");
                }
            }
            _ => {}
        }
    }
    out
}

#[test]
fn every_matvec_block_rotates_three_times() {
    let mut rng = kit::rng(8);
    for case in 0..200 {
        let kind = [LayerKind::Dense, LayerKind::Conv2D][case % 2];
        let model = kit::single_layer_model(&mut rng, kind);
        let net = compile(&model, &options([5, 8, 16][case % 3], 2));
        let blocks = rotations_per_block(&net);
        assert!(!blocks.is_empty());
        assert!(
            blocks.iter().all(|&b| b == (3, 4)),
            "case {case}: {blocks:?}"
        );
    }
}

#[test]
fn rotation_count_is_visible_in_the_decoded_bytes() {
    let mut rng = kit::rng(21);
    let mut net = Net::new();
    // one full input block plus a partial one, so no runtime loop
    let x = net.input(TensorShape::Flat(6));
    let y = net.dense(&mut rng, &x, 8, Activation::Linear);
    let net = compile(&net.build(&[&y]), &CodegenOptions::default());
    let mut decoder = Decoder::with_ip(64, &net.artifact().code, 0, DecoderOptions::NONE);
    let rotations = decoder
        .iter()
        .filter(|i| i.mnemonic() == Mnemonic::Pshufd && i.immediate8() == 0x39)
        .count();
    // 2 input blocks times 2 output blocks
    assert_eq!(rotations, 4 * 3);
}

#[test]
fn dense_example_computes_row_dot_products() {
    let mut builder = cnnjit::model::ModelBuilder::new();
    builder.input("x", &[4]);
    // kernel is (in, units); row o of the matrix is 4o+1 ..= 4o+4
    let kernel: Vec<f32> = (0..4)
        .flat_map(|i| (0..4).map(move |o| (4 * o + i + 1) as f32))
        .collect();
    builder.dense("y", "x", Activation::Linear, kernel, vec![0.0; 4]);
    let mut net = compile(&builder.build(&["y"]).unwrap(), &CodegenOptions::default());
    net.input_view(0)
        .unwrap()
        .copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    net.apply();
    assert_eq!(net.output_view(0).unwrap(), &[30.0, 70.0, 110.0, 150.0]);
}

#[test]
fn dense_identity_is_exact_for_every_width() {
    for n in 1..=21 {
        let mut builder = cnnjit::model::ModelBuilder::new();
        builder.input("x", &[n]);
        let kernel = (0..n * n)
            .map(|i| f32::from(u8::from(i / n == i % n)))
            .collect();
        builder.dense("y", "x", Activation::Linear, kernel, vec![0.0; n]);
        let mut net = compile(&builder.build(&["y"]).unwrap(), &options(6, 2));
        let x: Vec<f32> = (0..n).map(|i| i as f32 * 0.5 - 3.0).collect();
        net.input_view(0).unwrap().copy_from_slice(&x);
        net.apply();
        assert_eq!(net.output_view(0).unwrap(), x.as_slice(), "n = {n}");
    }
}

#[test]
fn empty_plan_is_a_single_ret() {
    let mut builder = cnnjit::model::ModelBuilder::new();
    builder.input("x", &[3, 3, 2]);
    let mut net = compile(&builder.build(&["x"]).unwrap(), &CodegenOptions::default());
    assert_eq!(net.artifact().code, vec![0xC3]);
    assert_eq!(net.outputs()[0].offset, net.inputs()[0].offset);
    net.input_view(0).unwrap().fill(2.5);
    net.apply();
    assert!(net.output_view(0).unwrap().iter().all(|&v| v == 2.5));
}

#[test]
fn pool_constants_are_within_the_pool() {
    let mut rng = kit::rng(31);
    for case in 0..100 {
        let model = kit::random_graph_model(&mut rng, 8);
        let net = compile(&model, &CodegenOptions::default());
        let artifact = net.artifact();
        let pool_bytes = artifact.pool.len() * 4;
        assert_eq!(pool_bytes % 16, 0);
        for r in &artifact.relocations {
            assert!(
                r.pool_offset + 4 <= pool_bytes,
                "case {case}: {r:?} past {pool_bytes}"
            );
            assert!(r.code_offset < artifact.code.len());
        }
    }
}
