use prmnet::data::DatasetStats;
use prmnet::model::{
    backbone_forward, bottleneck_concat, ch_forward, cmod_forward, fuse, idl_forward,
    residual_block, vacm, ArchConfig, BlockId, Checkpoint, ClassPrediction, FeatureMap, ModelState,
    Normalization, Precision, UnitDepth, FORMAT_VERSION,
};
use prmnet::tensor::Tensor;
use prmnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_state(seed: u64) -> ModelState {
    ModelState::init(
        &ArchConfig::tiny(),
        DatasetStats { cc_max: 10 },
        Normalization::default(),
        seed,
    )
    .unwrap()
}

fn noise(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn patch(seed: u64) -> Tensor {
    noise(&[3, 64, 64], 0.0, 255.0, seed)
}

#[test]
fn tiny_schedule_shapes() {
    let state = tiny_state(0);
    let out = backbone_forward(&patch(1), &state).unwrap();
    assert_eq!(out.ifm.shape(), [4, 16, 16]);
    let lfms: Vec<&[usize]> = out.lfms.iter().map(FeatureMap::shape).collect();
    assert_eq!(lfms, [&[4, 16, 16][..], &[8, 8, 8], &[16, 4, 4]]);
    assert_eq!(out.branch_out.shape(), [4, 16, 16]);
    assert_eq!(
        cmod_forward(&patch(2), &state).unwrap().shape(),
        [4, 16, 16]
    );
}

#[test]
fn zero_input_gives_zero_features() {
    let state = tiny_state(3);
    let zero = Tensor::zeros(&[3, 64, 64]);
    assert!(idl_forward(&zero, &state)
        .unwrap()
        .data
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(cmod_forward(&zero, &state)
        .unwrap()
        .data
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn zeroed_residual_path_passes_nonnegative_input() {
    let mut state = tiny_state(4);
    let block = BlockId::Trunk {
        phase: 1,
        rank: 0,
        branch: 1,
    };
    let prefix = format!("{}.u", block.name());
    let mut zeroed = 0;
    for (name, t) in state.params.iter_mut() {
        if name.starts_with(&prefix) && name.ends_with(".weight") {
            *t = Tensor::zeros(t.shape());
            zeroed += 1;
        }
    }
    assert_eq!(zeroed, 12, "four three-layer units");
    let x = FeatureMap::new(noise(&[8, 8, 8], 0.0, 3.0, 5), 2).unwrap();
    let y = residual_block(&x, &state, block).unwrap();
    assert_eq!(y, x);
}

#[test]
fn two_layer_units_have_eight_convolutions() {
    let arch = ArchConfig {
        unit_depth: UnitDepth::TwoLayer,
        ..ArchConfig::tiny()
    };
    let state = ModelState::init(
        &arch,
        DatasetStats { cc_max: 1 },
        Normalization::default(),
        0,
    )
    .unwrap();
    let convs = state
        .params
        .keys()
        .filter(|k| k.starts_with("trunk.p0.b0.br0.") && k.ends_with(".weight"))
        .count();
    assert_eq!(convs, 8);
}

#[test]
fn residual_block_preserves_shape() {
    let state = tiny_state(6);
    for (branch, shape) in [(0, [4, 16, 16]), (1, [8, 8, 8]), (2, [16, 4, 4])] {
        let x = FeatureMap::new(noise(&shape, -1.0, 1.0, branch as u64), branch + 1).unwrap();
        let block = BlockId::Trunk {
            phase: 2,
            rank: 1,
            branch,
        };
        assert_eq!(residual_block(&x, &state, block).unwrap().shape(), shape);
    }
}

#[test]
fn fusion_paths() {
    let state = tiny_state(7);
    let maps: Vec<FeatureMap> = [[4, 16, 16], [8, 8, 8], [16, 4, 4]]
        .iter()
        .enumerate()
        .map(|(b, s)| FeatureMap::new(noise(s, -1.0, 1.0, 10 + b as u64), b + 1).unwrap())
        .collect();
    assert_eq!(fuse(&maps, 1, &state, 2, 0).unwrap().shape(), [4, 16, 16]);
    assert_eq!(fuse(&maps, 3, &state, 2, 0).unwrap().shape(), [16, 4, 4]);
    // Branch-1 to Branch-3 goes through exactly two stride-2 convolutions.
    let downs: Vec<&String> = state
        .params
        .keys()
        .filter(|k| k.starts_with("trunk.p2.f0.to2.from0.down") && k.ends_with(".weight"))
        .collect();
    assert_eq!(downs.len(), 2);
    let single = fuse(&maps[..1], 1, &state, 0, 0).unwrap();
    assert_eq!(single, maps[0]);
}

#[test]
fn bottleneck_selecting_trunk_channels_is_identity() {
    let mut state = tiny_state(8);
    let c = 4;
    let mut w = Tensor::zeros(&[c, 2 * c, 1, 1]);
    for i in 0..c {
        w.data_mut()[i * 2 * c + i] = 1.0;
    }
    state.params.insert("bl.weight".into(), w);
    let eps = state.arch.bn_eps;
    state
        .buffers
        .insert("bl.bn.running_var".into(), Tensor::full(&[c], 1.0 - eps));
    let b1 = FeatureMap::new(noise(&[4, 16, 16], -1.0, 1.0, 9), 1).unwrap();
    let zero = FeatureMap::new(Tensor::zeros(&[4, 16, 16]), 1).unwrap();
    let y = bottleneck_concat(&b1, &zero, &state).unwrap();
    assert!(y.data.max_abs_diff(&b1.data.map(|v| v.max(0.0))) < 1e-12);
}

fn forced_gate(bias: f64) -> (FeatureMap, prmnet::model::AttentionOutput) {
    let mut state = tiny_state(11);
    let w = state.params["vacm.b2.att3.weight"].shape().to_vec();
    state
        .params
        .insert("vacm.b2.att3.weight".into(), Tensor::zeros(&w));
    state
        .params
        .insert("vacm.b2.att3.bias".into(), Tensor::full(&[1], bias));
    let efm = FeatureMap::new(noise(&[16, 4, 4], -1.0, 1.0, 12), 3).unwrap();
    let lfm = FeatureMap::new(noise(&[16, 4, 4], -1.0, 1.0, 13), 3).unwrap();
    let out = vacm(&efm, &lfm, &state).unwrap();
    (efm, out)
}

#[test]
fn attention_gate_extremes() {
    let (efm, open) = forced_gate(1e3);
    assert!(open.sm.data().iter().all(|&v| v == 1.0));
    assert_eq!(open.vafm, efm.data);
    assert_eq!(open.ffm.shape(), [16, 4, 4]);
    let (_, shut) = forced_gate(-1e3);
    assert!(shut.vafm.data().iter().all(|&v| v == 0.0));
}

#[test]
fn classifier_probabilities() {
    let state = tiny_state(14);
    for seed in 0..4 {
        let x = FeatureMap::new(noise(&[4, 16, 16], -2.0, 2.0, seed), 1).unwrap();
        let p = ch_forward(&x, &state).unwrap();
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.probs.iter().all(|&v| v >= 0.0));
    }
    let p = ClassPrediction::from_logits(&[2.0, 1.0, 1.0, 1.0]).unwrap();
    assert_eq!(p.label, prmnet::data::CrowdClass::Ncp);
}

#[test]
fn wrong_branch_is_rejected() {
    let state = tiny_state(15);
    let x = FeatureMap::new(Tensor::zeros(&[4, 16, 16]), 1).unwrap();
    let block = BlockId::Trunk {
        phase: 1,
        rank: 0,
        branch: 1,
    };
    assert!(matches!(
        residual_block(&x, &state, block),
        Err(Error::Argument(_))
    ));
    let bad = FeatureMap::new(Tensor::zeros(&[5, 16, 16]), 1).unwrap();
    assert!(matches!(ch_forward(&bad, &state), Err(Error::Shape { .. })));
}

#[test]
fn init_is_a_function_of_the_seed() {
    let a = tiny_state(21);
    let b = tiny_state(21);
    let c = tiny_state(22);
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert_eq!(
        a.param_count(),
        a.params.values().map(Tensor::len).sum::<usize>()
    );
    assert_eq!(a.param_count(), c.param_count());
}

#[test]
fn vacm_disabled_has_no_attention_parameters() {
    let arch = ArchConfig {
        vacm_enabled: false,
        ..ArchConfig::tiny()
    };
    let state = ModelState::init(
        &arch,
        DatasetStats { cc_max: 1 },
        Normalization::default(),
        0,
    )
    .unwrap();
    assert!(state.params.keys().all(|k| !k.starts_with("vacm.")));
    assert!(state.param_count() < tiny_state(0).param_count());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut state = tiny_state(30);
    state.meta.epoch = 3;
    state.norm = Normalization {
        mean: [0.1 + 1e-17, 2.0 / 3.0, 0.123_456_789_012_345_67],
        std: [1.0 / 7.0, 0.3, 0.299_999_999_999_999_9],
    };
    state.save(&path).unwrap();
    let back = ModelState::load(&path).unwrap();
    assert_eq!(back, state);
    let p = patch(31);
    let a = backbone_forward(&p, &state).unwrap();
    let b = backbone_forward(&p, &back).unwrap();
    for (x, y) in a.lfms.iter().zip(&b.lfms) {
        assert!(x
            .data
            .data()
            .iter()
            .zip(y.data.data())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn f32_checkpoint_is_close() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m32.ckpt");
    let state = tiny_state(32);
    let ck = Checkpoint {
        state: state.clone(),
        extras: Default::default(),
    };
    ck.save(&path, Precision::F32).unwrap();
    let back = Checkpoint::load(&path).unwrap().state;
    for (k, t) in &state.params {
        assert!(t.max_abs_diff(&back.params[k]) < 1e-6, "{k}");
    }
}

#[test]
fn checkpoint_version_mismatch_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    tiny_state(33).save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(ModelState::load(&path), Err(Error::Load { .. })));
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(ModelState::load(&path), Err(Error::Load { .. })));
}
