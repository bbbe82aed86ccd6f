use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::numcore::grad_check;
use crate::skeldata::ViewKind;

fn tiny_encoder(joints: usize) -> Encoder {
    Encoder::new(EncoderConfig::tiny(), SkeletonGraph::binary_tree(joints).unwrap()).unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn hidden_of(enc: &Encoder, params: &EncoderParams, x: &Tensor, mode: Mode) -> Tensor {
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, params, false);
    let input = g.constant(x.clone());
    let (h, _) = enc.hidden(&mut g, &bound, params, input, mode).unwrap();
    g.value(h).clone()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    assert!(EncoderConfig::tiny().validate().is_ok());
    let even = EncoderConfig {
        temporal_kernel: 4,
        ..EncoderConfig::tiny()
    };
    assert!(even.validate().unwrap_err().to_string().contains("odd"));
    let mismatch = EncoderConfig {
        hidden_dim: 12,
        ..EncoderConfig::tiny()
    };
    assert!(mismatch.validate().is_err());
    let narrow = EncoderConfig {
        projection_dim: 1,
        ..EncoderConfig::tiny()
    };
    assert!(narrow.validate().is_err());
    let empty = EncoderConfig {
        channels: vec![],
        strides: vec![],
        ..EncoderConfig::tiny()
    };
    assert!(empty.validate().is_err());
}

#[test]
fn param_shapes_follow_config() {
    let cfg = EncoderConfig::default();
    let mut p = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let shapes: Vec<Vec<usize>> = p.learnable().iter().map(|(_, t)| t.shape().to_vec()).collect();
    assert_eq!(shapes[0], vec![3, 16]);
    assert_eq!(shapes[1], vec![16, 9]);
    assert_eq!(shapes[4], vec![16, 32]);
    assert_eq!(shapes[8], vec![32, 64]);
    assert_eq!(shapes[12], vec![64, 32]);
    assert_eq!(shapes[13], vec![32]);
    assert_eq!(p.learnable().len(), p.learnable_mut().len());
    assert!(p.all_finite());
}

#[test]
fn row_stochastic_spatial_step_preserves_constants() {
    // Row sums of 1 map a constant field c to c when W copies channels.
    let (v, c) = (4, 3);
    let a = Tensor::from_rows(&[
        vec![0.5, 0.5, 0.0, 0.0],
        vec![0.25, 0.25, 0.25, 0.25],
        vec![0.0, 0.1, 0.7, 0.2],
        vec![0.0, 0.0, 0.0, 1.0],
    ])
    .unwrap();
    let mut g = Graph::new();
    let adj = g.constant(a);
    let x = g.constant(Tensor::full(&[2, 5, v, c], 1.7));
    let w = g.constant(Tensor::eye(c));
    let y = spatial_step(&mut g, adj, x, w).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 5, v, c]);
    assert!(g.value(y).data().iter().all(|&e| (e - 1.7).abs() < 1e-12));
}

#[test]
fn zero_input_gives_zero_hidden() {
    let enc = tiny_encoder(5);
    let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let x = Tensor::zeros(&[3, 12, 5, 3]);
    for mode in [Mode::Train, Mode::Eval] {
        let h = hidden_of(&enc, &p, &x, mode);
        assert_eq!(h.shape(), &[3, 16]);
        assert!(h.data().iter().all(|&e| e == 0.0));
    }
}

#[test]
fn joint_permutation_leaves_output_unchanged() {
    let joints = 6;
    let enc = tiny_encoder(joints);
    let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(2));
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted = Encoder::new(enc.config().clone(), enc.graph().permuted(&perm).unwrap()).unwrap();
    let x = random_tensor(&[2, 10, joints, 3], 3);
    let mut xp = x.data().to_vec();
    for b in 0..2 {
        for t in 0..10 {
            for (new, &old) in perm.iter().enumerate() {
                for c in 0..3 {
                    xp[((b * 10 + t) * joints + new) * 3 + c] = x.data()[((b * 10 + t) * joints + old) * 3 + c];
                }
            }
        }
    }
    let xp = Tensor::new(x.shape().to_vec(), xp).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        let h = hidden_of(&enc, &p, &x, mode);
        let hp = hidden_of(&permuted, &p, &xp, mode);
        assert!(close(h.data(), hp.data(), 1e-12), "{mode:?}");
    }
}

#[test]
fn projection_examples() {
    let enc = tiny_encoder(3);
    let mut p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(4));
    let (ch, cz) = (16, 8);
    let mut w = vec![0.0; ch * cz];
    for i in 0..cz {
        w[i * cz + i] = 1.0;
    }
    p.proj_weight = Tensor::new(vec![ch, cz], w).unwrap();
    p.proj_bias = Tensor::zeros(&[cz]);
    let mut h = vec![0.0; ch];
    h[0] = 3.0;
    h[1] = 4.0;
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, &p, false);
    let hv = g.constant(Tensor::new(vec![1, ch], h.clone()).unwrap());
    let z = enc.project(&mut g, &bound, hv).unwrap();
    let mut want = vec![0.0; cz];
    want[0] = 0.6;
    want[1] = 0.8;
    assert!(close(g.value(z).data(), &want, 1e-15));

    // positive scaling of h with zero bias does not change z
    let scaled: Vec<f64> = random_tensor(&[1, ch], 5).data().iter().map(|v| v.abs()).collect();
    let z1 = {
        let hv = g.constant(Tensor::new(vec![1, ch], scaled.clone()).unwrap());
        let z = enc.project(&mut g, &bound, hv).unwrap();
        g.value(z).clone()
    };
    let z2 = {
        let hv = g.constant(Tensor::new(vec![1, ch], scaled.iter().map(|v| v * 7.5).collect()).unwrap());
        let z = enc.project(&mut g, &bound, hv).unwrap();
        g.value(z).clone()
    };
    assert!(close(z1.data(), z2.data(), 1e-12));
}

#[test]
fn all_negative_preactivation_maps_to_basis_vector() {
    let enc = tiny_encoder(3);
    let mut p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(6));
    p.proj_bias = Tensor::full(&[8], -100.0);
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, &p, false);
    let hv = g.constant(Tensor::ones(&[2, 16]));
    let z = enc.project(&mut g, &bound, hv).unwrap();
    let z = g.value(z);
    assert_eq!(z.row(0)[0], 1.0);
    assert!(z.row(1)[1..].iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors() {
    let enc = tiny_encoder(5);
    let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(7));
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, &p, false);
    let wrong_joints = g.constant(Tensor::zeros(&[1, 12, 4, 3]));
    assert!(matches!(
        enc.hidden(&mut g, &bound, &p, wrong_joints, Mode::Eval),
        Err(EncoderError::Joints { expected: 5, got: 4 })
    ));
    let short = g.constant(Tensor::zeros(&[1, 4, 5, 3]));
    let msg = enc.hidden(&mut g, &bound, &p, short, Mode::Eval).unwrap_err().to_string();
    assert!(msg.contains("temporal kernel"), "{msg}");
    let channels = g.constant(Tensor::zeros(&[1, 12, 5, 2]));
    assert!(enc.hidden(&mut g, &bound, &p, channels, Mode::Eval).is_err());
}

#[test]
fn eval_mode_is_batch_independent() {
    let enc = tiny_encoder(5);
    let mut p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(8));
    // give the running statistics non-trivial values
    let x = random_tensor(&[4, 12, 5, 3], 9);
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, &p, false);
    let input = g.constant(x.clone());
    let (_, stats) = enc.hidden(&mut g, &bound, &p, input, Mode::Train).unwrap();
    p.update_running_stats(&stats, 0.5);

    let full = hidden_of(&enc, &p, &x, Mode::Eval);
    for b in 0..4 {
        let one = Tensor::new(vec![1, 12, 5, 3], x.data()[b * 180..(b + 1) * 180].to_vec()).unwrap();
        let h = hidden_of(&enc, &p, &one, Mode::Eval);
        assert!(close(h.data(), full.row(b), 1e-12));
    }
    assert_eq!(full, hidden_of(&enc, &p, &x, Mode::Eval));
}

#[test]
fn running_stats_follow_batch_statistics() {
    let enc = tiny_encoder(5);
    let mut p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(10));
    let x = random_tensor(&[3, 12, 5, 3], 11);
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, &p, false);
    let input = g.constant(x);
    let (_, stats) = enc.hidden(&mut g, &bound, &p, input, Mode::Train).unwrap();
    let s0 = stats[0].clone().unwrap();
    p.update_running_stats(&stats, 1.0);
    assert!(close(p.blocks[0].running_mean.data(), &s0.mean, 0.0));
    let n = s0.count as f64;
    let unbiased: Vec<f64> = s0.var.iter().map(|v| v * n / (n - 1.0)).collect();
    assert!(close(p.blocks[0].running_var.data(), &unbiased, 1e-15));
}

#[test]
fn single_sample_train_batch_uses_running_stats() {
    let enc = tiny_encoder(5);
    let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(12));
    let x = random_tensor(&[1, 12, 5, 3], 13);
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, &p, false);
    let input = g.constant(x.clone());
    let (h, stats) = enc.hidden(&mut g, &bound, &p, input, Mode::Train).unwrap();
    assert!(stats.iter().all(Option::is_none));
    assert!(g.value(h).all_finite());
    assert_eq!(g.value(h), &hidden_of(&enc, &p, &x, Mode::Eval));
}

#[test]
fn layout_conversions_agree() {
    let enc = tiny_encoder(4);
    let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(14));
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let seqs: Vec<SkeletonSequence> = (0..3)
        .map(|_| {
            let data = (0..3 * 12 * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
            SkeletonSequence::new(data, 12, 4, None).unwrap()
        })
        .collect();
    let refs: Vec<&SkeletonSequence> = seqs.iter().collect();
    let internal = batch_tensor(&refs).unwrap();
    let mut bctv = Vec::new();
    for s in &seqs {
        bctv.extend_from_slice(s.data());
    }
    let bctv = Tensor::new(vec![3, 3, 12, 4], bctv).unwrap();
    assert_eq!(channels_last(&bctv).unwrap(), internal);
    let h = enc.stgcn_forward(&p, &bctv, Mode::Eval).unwrap();
    let embedded = enc.embed(&p, &refs, 2).unwrap();
    for (b, row) in embedded.iter().enumerate() {
        assert!(close(row, h.row(b), 1e-12));
    }
}

#[test]
fn encoder_input_gradient_matches_finite_differences() {
    let enc = tiny_encoder(4);
    let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(16));
    let weights = random_tensor(&[2, 8], 17);
    let x = random_tensor(&[2, 6, 4, 3], 18);
    let cfg = EncoderConfig {
        temporal_kernel: 3,
        ..EncoderConfig::tiny()
    };
    let enc = Encoder::new(cfg, enc.graph().clone()).unwrap();
    let p = EncoderParams {
        blocks: p
            .blocks
            .iter()
            .map(|b| BlockParams {
                temporal: Tensor::new(
                    vec![b.temporal.shape()[0], 3],
                    b.temporal.data().chunks(5).flat_map(|r| r[1..4].to_vec()).collect(),
                )
                .unwrap(),
                ..b.clone()
            })
            .collect(),
        ..p
    };
    for mode in [Mode::Train, Mode::Eval] {
        let report = grad_check(
            |g, input| {
                let bound = enc.bind(g, &p, false);
                let (h, _) = enc.hidden(g, &bound, &p, input, mode).map_err(|e| match e {
                    EncoderError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let z = enc.project(g, &bound, h)?;
                let w = g.constant(weights.clone());
                let prod = g.mul(z, w)?;
                Ok(g.sum(prod))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{mode:?}: {report:?}");
    }
}

#[test]
fn gradients_reach_every_query_parameter_only() {
    let enc = tiny_encoder(4);
    let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(19));
    let mut g = Graph::new();
    let query = enc.bind(&mut g, &p, true);
    let key = enc.bind(&mut g, &p, false);
    let x = g.constant(random_tensor(&[2, 8, 4, 3], 20));
    let (hq, _) = enc.hidden(&mut g, &query, &p, x, Mode::Train).unwrap();
    let (hk, _) = enc.hidden(&mut g, &key, &p, x, Mode::Train).unwrap();
    let zq = enc.project(&mut g, &query, hq).unwrap();
    let zk = enc.project(&mut g, &key, hk).unwrap();
    let prod = g.mul(zq, zk).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();
    for v in query.learnable() {
        let gv = grads.get(v).expect("query gradient");
        assert!(gv.all_finite());
    }
    for v in key.learnable() {
        assert!(grads.get(v).is_none());
    }
}

#[test]
fn momentum_update_edge_cases() {
    let cfg = EncoderConfig::tiny();
    let q = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(21));
    let k = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(22));
    let mut pair = MomentumEncoderPair::new(q.clone(), 0.9).unwrap();
    assert_eq!(pair.key, q);
    pair.key = k.clone();
    pair.momentum_update_with(1.0);
    assert_eq!(pair.key, k);
    pair.momentum_update_with(0.0);
    assert_eq!(pair.key.learnable(), q.learnable());
    assert_eq!(pair.query, q);
    assert!(MomentumEncoderPair::new(q, 1.5).is_err());
}

#[test]
fn momentum_update_leaves_buffers_alone() {
    let cfg = EncoderConfig::tiny();
    let mut q = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(23));
    q.blocks[0].running_mean = Tensor::full(&[8], 3.0);
    let mut pair = MomentumEncoderPair::new(EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(24)), 0.5).unwrap();
    pair.query = q;
    pair.momentum_update();
    assert_eq!(pair.key.blocks[0].running_mean, Tensor::zeros(&[8]));
}

fn f32_params(p: &EncoderParams) -> EncoderParams {
    let mut out = p.clone();
    for t in out.all_tensors_mut() {
        *t = t.map(|v| v as f32 as f64);
    }
    out
}

#[test]
fn checkpoint_round_trip() {
    let enc = tiny_encoder(5);
    let q = f32_params(&enc.init_params(&mut ChaCha8Rng::seed_from_u64(25)));
    let mut pair = MomentumEncoderPair::new(q, 0.99).unwrap();
    pair.key = f32_params(&enc.init_params(&mut ChaCha8Rng::seed_from_u64(26)));
    let ckpt = Checkpoint {
        encoder: enc,
        pair,
        epoch: 7,
        view: ViewKind::Motion,
        optimizer: vec![("velocity.0".into(), Tensor::vector(&[0.5, -0.25]))],
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, ckpt);

    let header: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ckpt.json")).unwrap()).unwrap();
    assert_eq!(header["view"], "motion");
    assert_eq!(header["params"][1]["offset"], 3 * 8 * 4);
}

#[test]
fn checkpoint_corruption_is_reported() {
    let enc = tiny_encoder(5);
    let pair = MomentumEncoderPair::new(enc.init_params(&mut ChaCha8Rng::seed_from_u64(27)), 0.9).unwrap();
    let ckpt = Checkpoint {
        encoder: enc,
        pair,
        epoch: 0,
        view: ViewKind::Joint,
        optimizer: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let path = dir.path().join("params.f32");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let msg = load_checkpoint(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("bytes"), "{msg}");

    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(missing.path()), Err(EncoderError::Io { .. })));
}

proptest! {
    #[test]
    fn projections_are_unit_norm(seed: u64, scale in 0.01f64..100.0) {
        let enc = tiny_encoder(4);
        let p = enc.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let h = random_tensor(&[3, 16], seed ^ 1).map(|v| v * scale);
        let mut g = Graph::new();
        let bound = enc.bind(&mut g, &p, false);
        let hv = g.constant(h);
        let z = enc.project(&mut g, &bound, hv).unwrap();
        for b in 0..3 {
            let n: f64 = g.value(z).row(b).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn momentum_contracts_by_alpha(seed: u64, alpha in 0.0f64..=1.0) {
        let cfg = EncoderConfig::tiny();
        let q = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let k = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
        let mut pair = MomentumEncoderPair::new(q, alpha).unwrap();
        pair.key = k.clone();
        pair.momentum_update();
        for ((_, q), ((_, before), (_, after))) in pair
            .query
            .learnable()
            .into_iter()
            .zip(k.learnable().into_iter().zip(pair.key.learnable()))
        {
            for ((qv, b), a) in q.data().iter().zip(before.data()).zip(after.data()) {
                prop_assert!(((a - qv).abs() - alpha * (b - qv).abs()).abs() < 1e-12);
            }
        }
    }
}
