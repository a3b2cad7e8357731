use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, grad_check_params};
use crate::graph::FeatureGraph;
use crate::mesh::VertexAttributes;
use crate::synth::icosphere;
use crate::tensor::ParamId;

fn sphere_graph(level: usize) -> FeatureGraph {
    let m = icosphere(level).map_vertices(|v| [v[0] * 12.0, v[1] * 13.0, v[2] * 15.0]).unwrap();
    FeatureGraph::build(&m, &VertexAttributes::compute(&m).unwrap()).unwrap()
}

fn prepared(g: &FeatureGraph, kernel: &SplineKernelSpec) -> PreparedBatch {
    PreparedBatch::new(GraphBatch::single(g), kernel).unwrap()
}

fn small_config(blocks: usize) -> ModelConfig {
    ModelConfig {
        hidden_channels: 4,
        n_hidden_layers: 2 * blocks,
        dense_block_depth: 2,
        dropout: 0.0,
        ..Default::default()
    }
}

#[test]
fn default_parameter_count_matches_closed_form() {
    let net = EcapNet::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(net.count_parameters(), ModelConfig::default().expected_parameter_count());
    // Hand expansion for the defaults (K = 125, h = 32, d = 4, B = 5).
    let conv = |a: usize, b: usize| 125 * a * b + a * b;
    let block: usize = [32, 64, 96, 128].iter().map(|&c| conv(c, 32) + 64).sum::<usize>() + 160 * 32 + 32;
    assert_eq!(net.count_parameters(), conv(4, 32) + 64 + 5 * block + conv(32, 1) + 1);
    let net = EcapNet::new(small_config(3), 1).unwrap();
    assert_eq!(net.count_parameters(), small_config(3).expected_parameter_count());
}

#[test]
fn layer_structure_and_names() {
    let net = EcapNet::new(ModelConfig::default(), 0).unwrap();
    let names: Vec<&str> = net.store().params().iter().map(|p| p.name.as_str()).collect();
    let convs = names.iter().filter(|n| n.ends_with(".root")).count();
    let transitions = names.iter().filter(|n| n.ends_with("transition.weight")).count();
    assert_eq!((convs, transitions), (22, 5));
    assert_eq!(names[0], "input.weight");
    assert_eq!(*names.last().unwrap(), "output.bias");
    let again = EcapNet::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(net, again);
}

#[test]
fn config_validation() {
    let bad = ModelConfig {
        n_hidden_layers: 10,
        ..Default::default()
    };
    assert!(matches!(EcapNet::new(bad, 0), Err(ModelError::Config(_))));
    let bad = ModelConfig {
        dropout: 1.0,
        ..Default::default()
    };
    assert!(EcapNet::new(bad, 0).is_err());
}

#[test]
fn fresh_net_output_is_finite_and_spread() {
    let g = sphere_graph(2);
    let net = EcapNet::new(ModelConfig::default(), 7).unwrap();
    let y = net.predict(&prepared(&g, &net.config.kernel)).unwrap();
    assert_eq!(y.len(), g.n_nodes);
    assert!(y.iter().all(|v| v.is_finite()));
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    assert!(std > 1e-6 && std < 1e3, "{std}");
}

#[test]
fn wrong_feature_width_is_rejected() {
    let g = sphere_graph(0);
    let net = EcapNet::new(small_config(1), 0).unwrap();
    let mut input = prepared(&g, &net.config.kernel);
    input.features = Tensor::zeros(vec![g.n_nodes, 3]);
    assert!(matches!(net.predict(&input), Err(ModelError::Tensor(_))));
}

#[test]
fn eval_forward_is_deterministic() {
    let g = sphere_graph(1);
    let net = EcapNet::new(ModelConfig::default(), 3).unwrap();
    let input = prepared(&g, &net.config.kernel);
    let a = net.predict(&input).unwrap();
    let b = net.predict(&input).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn ecapnet_is_permutation_equivariant_and_fcn_is_not() {
    let g = sphere_graph(1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut perm: Vec<usize> = (0..g.n_nodes).collect();
    perm.shuffle(&mut rng);
    let pg = g.permuted(&perm);
    let net = EcapNet::new(ModelConfig::default(), 4).unwrap();
    let a = net.predict(&prepared(&g, &net.config.kernel)).unwrap();
    let b = net.predict(&prepared(&pg, &net.config.kernel)).unwrap();
    for i in 0..g.n_nodes {
        assert!((a[i] - b[perm[i]]).abs() <= 1e-9);
    }

    let fcn = FcnBaseline::new(
        FcnConfig {
            n_vertices: g.n_nodes,
            hidden: vec![16],
        },
        4,
    )
    .unwrap();
    let a = fcn.predict(&prepared(&g, &net.config.kernel)).unwrap();
    let b = fcn.predict(&prepared(&pg, &net.config.kernel)).unwrap();
    let worst = (0..g.n_nodes).map(|i| (a[i] - b[perm[i]]).abs()).fold(0.0, f64::max);
    assert!(worst > 1e-3, "{worst}");
}

#[test]
fn every_parameter_receives_gradient() {
    let g = sphere_graph(1);
    let net = EcapNet::new(ModelConfig::default(), 9).unwrap();
    let input = prepared(&g, &net.config.kernel);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let params = tape.bind_params(net.store());
    let mut ctx = ForwardCtx::train(&mut rng);
    let y = net.forward(&mut tape, &params, &input, &mut ctx).unwrap();
    let target: Vec<f64> = (0..g.n_nodes).map(|i| (i % 7) as f64).collect();
    let t = tape.constant(Tensor::matrix(g.n_nodes, 1, target).unwrap());
    let loss = tape.l1_loss(y, t).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (p, v) in net.store().params().iter().zip(&params) {
        let g = grads.get(*v).unwrap_or_else(|| panic!("{} got no gradient", p.name));
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "{} gradient norm {norm}", p.name);
    }
}

#[test]
fn bn_running_stats_update() {
    let g = sphere_graph(1);
    let mut net = EcapNet::new(small_config(1), 2).unwrap();
    let before = net.store().buffers().to_vec();
    let input = prepared(&g, &net.config.kernel);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let params = tape.bind_params(net.store());
    let mut ctx = ForwardCtx::train(&mut rng);
    net.forward(&mut tape, &params, &input, &mut ctx).unwrap();
    let updates = std::mem::take(&mut ctx.bn_updates);
    assert_eq!(updates.len(), 3);
    net.apply_bn_updates(&updates);
    let u = &updates[0];
    let rm = net.store().buffer(u.mean).tensor.data();
    for (r, m) in rm.iter().zip(&u.stats.mean) {
        assert!((r - 0.1 * m).abs() < 1e-15);
    }
    assert_ne!(net.store().buffers(), &before[..]);
}

fn random_graph(n: usize, seed: u64) -> FeatureGraph {
    FeatureGraph::random(n, seed)
}

#[test]
fn two_block_net_gradients_match_finite_differences() {
    let g = random_graph(12, 3);
    let cfg = ModelConfig {
        hidden_channels: 3,
        n_hidden_layers: 8,
        dense_block_depth: 4,
        dropout: 0.0,
        ..Default::default()
    };
    let net = EcapNet::new(cfg, 11).unwrap();
    let input = prepared(&g, &net.config.kernel);
    let target = Tensor::matrix(12, 1, (0..12).map(|i| i as f64 * 0.3).collect()).unwrap();
    let loss = |tape: &mut Tape, params: &[Var]| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::train(&mut rng);
        let y = net.forward(tape, params, &input, &mut ctx).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let sq = tape.mul(y, y)?;
        let t = tape.constant(target.clone());
        let d = tape.sub(sq, t)?;
        let d2 = tape.mul(d, d)?;
        Ok(tape.sum(d2))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coords: Vec<(ParamId, usize)> = (0..net.store().params().len())
        .flat_map(|p| {
            let n = net.store().params()[p].tensor.numel();
            (0..3).map(|_| (ParamId(p), rng.gen_range(0..n))).collect::<Vec<_>>()
        })
        .collect();
    let err = grad_check_params(net.store(), &coords, 1e-5, loss).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn fcn_parameter_count() {
    let cfg = FcnConfig {
        n_vertices: 10,
        hidden: vec![7],
    };
    let net = FcnBaseline::new(cfg.clone(), 0).unwrap();
    assert_eq!(net.count_parameters(), 30 * 7 + 7 + 7 * 10 + 10);
    assert_eq!(FcnBaseline::expected_parameter_count(&cfg), net.count_parameters());
}

#[test]
fn fcn_zero_weights_give_bias() {
    let mut net = FcnBaseline::new(
        FcnConfig {
            n_vertices: 4,
            hidden: vec![5],
        },
        0,
    )
    .unwrap();
    for p in net.store_mut().params_mut() {
        let v = if p.name == "fc1.bias" { 0.7 } else { 0.0 };
        p.tensor.data_mut().iter_mut().for_each(|x| *x = v);
    }
    assert_eq!(net.predict_flat(&[3.0; 12]).unwrap(), vec![0.7; 4]);
    assert!(matches!(net.predict_flat(&[0.0; 11]), Err(ModelError::LengthMismatch { .. })));
}

#[test]
fn fcn_single_vertex_linear_map() {
    let mut net = FcnBaseline::new(
        FcnConfig {
            n_vertices: 1,
            hidden: vec![],
        },
        0,
    )
    .unwrap();
    let w = [0.5, -2.0, 1.5];
    net.store_mut().params_mut()[0].tensor.data_mut().copy_from_slice(&w);
    net.store_mut().params_mut()[1].tensor.data_mut()[0] = 0.25;
    let y = net.predict_flat(&[1.0, 2.0, 3.0]).unwrap();
    assert!((y[0] - (0.5 - 4.0 + 4.5 + 0.25)).abs() < 1e-15);
}

#[test]
fn fcn_gradients_match_finite_differences() {
    let net = FcnBaseline::new(
        FcnConfig {
            n_vertices: 3,
            hidden: vec![4, 3],
        },
        6,
    )
    .unwrap();
    let x = Tensor::matrix(2, 9, (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let err = grad_check(
        |tape, xv| {
            let params = tape.bind_params(net.store());
            let y = net.forward_flat(tape, &params, xv).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum(y2))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
    let all: Vec<(ParamId, usize)> = (0..net.store().params().len())
        .flat_map(|p| (0..net.store().params()[p].tensor.numel()).map(move |i| (ParamId(p), i)))
        .collect();
    let err = grad_check_params(net.store(), &all, 1e-6, |tape, params| {
        let xv = tape.constant(x.clone());
        let y = net.forward_flat(tape, params, xv).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let y2 = tape.mul(y, y)?;
        Ok(tape.sum(y2))
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let g = sphere_graph(1);
    let mut net = EcapNet::new(small_config(2), 21).unwrap();
    // Non-trivial running stats.
    for b in net.store_mut().buffers_mut() {
        b.tensor.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * i as f64 + 1e-17);
    }
    let ckpt = Checkpoint::EcapNet { net, seed: 21 };
    let mut a = Vec::new();
    write_checkpoint(&ckpt, &mut a).unwrap();
    let back = read_checkpoint(&a[..]).unwrap();
    let mut b = Vec::new();
    write_checkpoint(&back, &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(back, ckpt);
    let input = prepared(&g, &SplineKernelSpec::default());
    assert_eq!(back.predict(&input).unwrap(), ckpt.predict(&input).unwrap());

    let fcn = Checkpoint::Fcn {
        net: FcnBaseline::new(
            FcnConfig {
                n_vertices: 5,
                hidden: vec![3],
            },
            1,
        )
        .unwrap(),
        seed: 1,
    };
    let mut a = Vec::new();
    write_checkpoint(&fcn, &mut a).unwrap();
    let mut b = Vec::new();
    write_checkpoint(&read_checkpoint(&a[..]).unwrap(), &mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ckpt = Checkpoint::EcapNet {
        net: EcapNet::new(small_config(1), 0).unwrap(),
        seed: 0,
    };
    let mut a = Vec::new();
    write_checkpoint(&ckpt, &mut a).unwrap();
    assert!(read_checkpoint(&a[..a.len() - 8]).is_err());
    let mut extra = a.clone();
    extra.extend_from_slice(&[0; 8]);
    assert!(read_checkpoint(&extra[..]).is_err());
    let text = String::from_utf8_lossy(&a[..a.iter().position(|&c| c == b'\n').unwrap()]).replace("ckpt-v1", "ckpt-v0");
    let mut bad = text.into_bytes();
    bad.extend_from_slice(&a[a.iter().position(|&c| c == b'\n').unwrap()..]);
    assert!(matches!(read_checkpoint(&bad[..]), Err(ModelError::Checkpoint(_))));
}

#[test]
fn feature_norm_standardizes_training_features() {
    let graphs = [sphere_graph(1), sphere_graph(2)];
    let norm = FeatureNorm::fit(graphs.iter()).unwrap();
    let rows: Vec<[f64; N_FEATURES]> = graphs.iter().flat_map(|g| g.node_features.clone()).collect();
    let z = norm.apply(&Tensor::from_rows(&rows));
    let n = rows.len() as f64;
    for c in 0..N_FEATURES {
        let col: Vec<f64> = z.data().chunks(N_FEATURES).map(|r| r[c]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "channel {c} variance {var}");
    }
    assert!(FeatureNorm::fit(std::iter::empty()).is_err());
}

#[test]
fn input_norm_equals_prestandardized_features() {
    let g = sphere_graph(1);
    let norm = FeatureNorm::fit([&g]).unwrap();
    let with_norm = EcapNet::new(
        ModelConfig {
            input_norm: Some(norm.clone()),
            ..small_config(1)
        },
        4,
    )
    .unwrap();
    let mut plain = EcapNet::new(small_config(1), 4).unwrap();
    assert_eq!(plain.store(), with_norm.store());
    plain.config.input_norm = None;
    let mut standardized = g.clone();
    for f in &mut standardized.node_features {
        for c in 0..N_FEATURES {
            f[c] = (f[c] - norm.mean[c]) / norm.std[c];
        }
    }
    let kernel = SplineKernelSpec::default();
    let a = with_norm.predict(&prepared(&g, &kernel)).unwrap();
    let b = plain.predict(&prepared(&standardized, &kernel)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn input_norm_is_validated_and_checkpointed() {
    let bad = |mean: Vec<f64>, std: Vec<f64>| ModelConfig {
        input_norm: Some(FeatureNorm { mean, std }),
        ..small_config(1)
    };
    assert!(bad(vec![0.0; 3], vec![1.0; 3]).validate().is_err());
    assert!(bad(vec![0.0; 4], vec![1.0, 0.0, 1.0, 1.0]).validate().is_err());
    assert!(bad(vec![f64::NAN, 0.0, 0.0, 0.0], vec![1.0; 4]).validate().is_err());

    let norm = FeatureNorm::fit([&sphere_graph(1)]).unwrap();
    let net = EcapNet::new(
        ModelConfig {
            input_norm: Some(norm),
            ..small_config(1)
        },
        8,
    )
    .unwrap();
    let ckpt = Checkpoint::EcapNet { net, seed: 8 };
    let mut a = Vec::new();
    write_checkpoint(&ckpt, &mut a).unwrap();
    let back = read_checkpoint(&a[..]).unwrap();
    let mut b = Vec::new();
    write_checkpoint(&back, &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(back, ckpt);
}
