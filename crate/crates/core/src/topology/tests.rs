use super::*;
use crate::transform::ProjectionSpace;
use crate::verify::{random, NetworkCase};
use crate::voxel::{sparsify, synth_sample, zscore, SynthParams};

fn node_named<T: Scalar>(net: &NetworkSpec<T>, name: &str) -> NodeId {
    net.graph.nodes.iter().position(|n| n.name == name).unwrap_or_else(|| panic!("no node {name}"))
}

#[test]
fn bottleneck_worked_example() {
    let net = build_network::<f32>(&TopologyConfig::paper(TopologyKind::Hybrid3to2d), 0).unwrap();
    let shapes = net.shapes(1).unwrap();
    assert_eq!(shapes[net.levels[4]], vec![1, 256, 2, 8, 8]);
    match &net.graph.nodes[net.skips[4]].layer {
        Layer::DepthToChannel { spec, .. } => assert_eq!((spec.lambda, spec.mu), (256, 128)),
        other => panic!("{other:?}"),
    }
    for &s in &net.skips {
        assert_eq!(shapes[s][1], 256);
    }
}

#[test]
fn pure2d_head_emits_patch_depth() {
    let net = build_network::<f32>(&TopologyConfig::paper(TopologyKind::Pure2d), 0).unwrap();
    let shapes = net.shapes(1).unwrap();
    assert_eq!(shapes[node_named(&net, "head.out")], vec![1, 32, 128, 128]);
    assert_eq!(shapes[net.output], vec![1, 1, 32, 128, 128]);
}

#[test]
fn none_interp_rejected_for_3d_decoders() {
    let mut c = TopologyConfig::paper(TopologyKind::Pure3d);
    c.interp = InterpKind::None;
    assert!(matches!(build_network::<f32>(&c, 0), Err(SspError::Config(_))));
}

#[test]
fn postfix_runs_at_sparse_depth() {
    let mut c = TopologyConfig::paper(TopologyKind::Pure3d);
    c.interp = InterpKind::Postfix;
    c.ratio = 4;
    let net = build_network::<f32>(&c, 0).unwrap();
    let shapes = net.shapes(1).unwrap();
    assert_eq!(shapes[node_named(&net, "head.out")], vec![1, 1, 8, 128, 128]);
    assert_eq!(shapes[net.output], vec![1, 1, 32, 128, 128]);
}

#[test]
fn output_shape_for_every_kind_ratio_and_patch() {
    for kind in TopologyKind::ALL {
        for patch in [[16, 32, 32], [32, 64, 48]] {
            for r in [1, 2, 4, 8] {
                for interp in [InterpKind::Prefix, InterpKind::Postfix, InterpKind::None] {
                    if interp == InterpKind::None && kind.decoder_is_3d() {
                        continue;
                    }
                    let mut c = TopologyConfig::tiny(kind);
                    c.patch = patch;
                    c.u_dim = 2 * patch[0];
                    c.ratio = r;
                    c.interp = interp;
                    let net = build_network::<f32>(&c, 1).unwrap_or_else(|e| panic!("{kind} {patch:?} r={r} {interp}: {e}"));
                    let shapes = net.shapes(2).unwrap();
                    assert_eq!(shapes[net.output], vec![2, 1, patch[0], patch[1], patch[2]]);
                    if patch[0] == 16 {
                        let x = random::<f32>(&net.input_shape(1), 2);
                        let y = net.predict(&x, &[0]).unwrap();
                        assert_eq!(y.shape(), &[1, 1, 16, 32, 32]);
                    }
                }
            }
        }
    }
}

#[test]
fn uniform_dimension_across_levels() {
    for space in [ProjectionSpace::Embed2d, ProjectionSpace::Embed3d] {
        let mut c = TopologyConfig::desk(TopologyKind::Hybrid3to2d);
        c.projection_space = space;
        let net = build_network::<f32>(&c, 0).unwrap();
        let shapes = net.shapes(1).unwrap();
        for &s in &net.skips {
            assert_eq!(shapes[s][1], c.u_dim);
        }
    }
}

#[test]
fn desk_forward_shape_and_init_bound() {
    let c = TopologyConfig::desk(TopologyKind::Hybrid3to2d);
    let net = build_network::<f32>(&c, 3).unwrap();
    let s = synth_sample(4, 1, 3, [16, 64, 64], 2, &SynthParams::default()).unwrap();
    let y = net.forward(&s.x, 1).unwrap();
    assert_eq!(y.dims(), [16, 64, 64]);
    assert!(y.data().iter().all(|v| v.is_finite() && v.abs() < 1e4));
}

#[test]
fn task_code_swap_is_pure() {
    let net = build_network::<f32>(&TopologyConfig::tiny(TopologyKind::Hybrid3to2d), 5).unwrap();
    let x = random::<f32>(&net.input_shape(1), 6);
    let a = net.predict(&x, &[0]).unwrap();
    let b = net.predict(&x, &[1]).unwrap();
    assert_ne!(a, b);
    assert_eq!(net.predict(&x, &[0]).unwrap(), a);
    assert!(net.predict(&x, &[2]).is_err());
}

#[test]
fn mismatch_names_the_layer() {
    let mut net = build_network::<f32>(&TopologyConfig::tiny(TopologyKind::Pure3d), 0).unwrap();
    let id = net.graph.nodes.iter().find_map(|n| match (&n.name[..], &n.layer) {
        ("enc2.block1.conv1", Layer::Conv { w, .. }) => Some(*w),
        _ => None,
    });
    let id = id.unwrap();
    net.params.get_mut(id).value = Tensor::zeros(&[8, 3, 3, 3, 3]).unwrap();
    let x = random::<f32>(&net.input_shape(1), 1);
    match net.predict(&x, &[0]) {
        Err(SspError::Contract { op, .. }) => assert!(op.contains("enc2.block1.conv1"), "{op}"),
        other => panic!("{other:?}"),
    }
    let bad = random::<f32>(&[1, 1, 8, 16, 16], 1);
    assert!(matches!(net.predict(&bad, &[0]), Err(SspError::Contract { .. })));
}

#[test]
fn running_stats_follow_momentum() {
    let mut net = build_network::<f64>(&TopologyConfig::tiny(TopologyKind::Pure2d), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(random(&net.input_shape(2), 3));
    let f = net.forward_tape(&mut tape, x, &[0, 1], Mode::Train).unwrap();
    let u = f.bn[0].clone();
    net.apply_batch_stats(&f.bn);
    let m = net.params.value(u.running_mean).data()[0];
    let v = net.params.value(u.running_var).data()[0];
    assert!((m - 0.1 * u.stats.mean[0]).abs() < 1e-15);
    assert!((v - (0.9 + 0.1 * u.stats.var[0])).abs() < 1e-15);
}

#[test]
fn prefix_input_is_pseudo_grid() {
    let c = TopologyConfig::desk(TopologyKind::Pure2d);
    let net = build_network::<f32>(&c, 0).unwrap();
    let dense = zscore(&Volume::from_fn([16, 64, 64], |z, y, x| (z + y + x) as f32).unwrap());
    let s = sparsify(&dense, 2).unwrap();
    assert_eq!(net.prepare_input(&s).unwrap().depth(), 16);
    let s4 = sparsify(&dense, 4).unwrap();
    assert!(net.prepare_input(&s4).is_err());
}

#[test]
fn end_to_end_gradients() {
    // the other kinds run in the acceptance suite
    let out = NetworkCase::tiny(TopologyKind::Pure2d, 40).unwrap().run(1).unwrap();
    assert!(out.passed(), "{out:?}");
}
