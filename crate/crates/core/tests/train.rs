use prmnet::data::{generate_synthetic_with, CrowdClass, DatasetStats, SynthOptions};
use prmnet::model::{ArchConfig, ModelState, Net, Normalization};
use prmnet::pipeline::RoutingPolicy;
use prmnet::tensor::Mode;
use prmnet::tiling::{tile_image_sized, Patch};
use prmnet::train::{
    batch_loss, fit_metrics, grad_check, gradcheck_batch, lr_at, patch_mae, prepare,
    GradCheckOptions, Objective, RunConfig, TrainConfig, Trainer,
};

fn short_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        n_patches: 8,
        seed,
        ..TrainConfig::tiny_overfit()
    }
}

fn tiny_patches(n: usize, seed: u64) -> Vec<Patch> {
    let opts = SynthOptions {
        blob_radius: (1.5, 2.0),
        noise: 8.0,
    };
    generate_synthetic_with(n, (64, 64), (0, 30), seed, &opts)
        .unwrap()
        .iter()
        .flat_map(|r| tile_image_sized(r, 64))
        .collect()
}

fn fresh_state(cfg: &TrainConfig, patches: &[Patch]) -> ModelState {
    let stats = DatasetStats::from_counts(patches.iter().map(Patch::gt_count));
    ModelState::init(
        &cfg.arch,
        stats,
        Normalization::from_patches(patches),
        cfg.seed,
    )
    .unwrap()
}

#[test]
fn schedule_halves_every_period() {
    let cfg = TrainConfig::default();
    for e in 0..120 {
        let want = 0.001 * 0.5f64.powi((e / 30) as i32);
        assert_eq!(lr_at(e, &cfg), want);
    }
    let custom = TrainConfig {
        base_lr: 0.02,
        lr_halving_period: 15,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(44, &custom), 0.005);
}

#[test]
fn same_seed_same_weights() {
    let cfg = short_cfg(3);
    let patches = tiny_patches(16, 1);
    let run = || {
        Trainer::new(&cfg, fresh_state(&cfg, &patches), &patches, &[])
            .unwrap()
            .run(|_, _| Ok(()))
            .unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.steps, 4);
    assert_eq!(a.meta.epoch, 2);
}

#[test]
fn epoch_order_is_a_permutation_that_varies_by_epoch() {
    let cfg = short_cfg(4);
    let patches = tiny_patches(16, 2);
    let t = Trainer::new(&cfg, fresh_state(&cfg, &patches), &patches, &[]).unwrap();
    let mut o0 = t.epoch_order(0);
    let o1 = t.epoch_order(1);
    assert_ne!(o0, o1);
    assert_eq!(o0, t.epoch_order(0));
    o0.sort_unstable();
    assert_eq!(o0, (0..16).collect::<Vec<_>>());
}

#[test]
fn resuming_from_a_checkpoint_continues_exactly() {
    let cfg = short_cfg(5);
    let patches = tiny_patches(16, 3);
    let straight = Trainer::new(&cfg, fresh_state(&cfg, &patches), &patches, &[])
        .unwrap()
        .run(|_, _| Ok(()))
        .unwrap()
        .0;

    let one = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    let mut first = Trainer::new(&one, fresh_state(&cfg, &patches), &patches, &[]).unwrap();
    first.run_epoch().unwrap().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e1.ckpt");
    first
        .checkpoint()
        .save(&path, prmnet::model::Precision::F64)
        .unwrap();
    let ckpt = prmnet::model::Checkpoint::load(&path).unwrap();
    let resumed = Trainer::resume(&cfg, ckpt, &patches, &[])
        .unwrap()
        .run(|_, _| Ok(()))
        .unwrap()
        .0;
    assert_eq!(resumed, straight);
}

#[test]
fn max_steps_stops_mid_epoch() {
    let cfg = TrainConfig {
        max_steps: Some(1),
        ..short_cfg(6)
    };
    let patches = tiny_patches(16, 4);
    let (state, report) = Trainer::new(&cfg, fresh_state(&cfg, &patches), &patches, &[])
        .unwrap()
        .run(|_, _| Ok(()))
        .unwrap();
    assert_eq!(report.steps, 1);
    assert!(report.stopped_early);
    assert_eq!(state.meta.epoch, 0);
}

#[test]
fn regression_gradient_vanishes_at_its_own_prediction() {
    let cfg = short_cfg(7);
    let patches = tiny_patches(2, 5);
    let state = fresh_state(&cfg, &patches);
    let mut net = Net::new(&state, Mode::Train).unwrap();
    let pixels: Vec<_> = patches.iter().map(|p| &p.pixels).collect();
    let mut prefix = net.stem(&pixels).unwrap();
    net.to_hook(&mut prefix).unwrap();
    let heads = net.continue_routes(&prefix, &[0, 1], &pixels).unwrap();
    let target = net.graph.value(heads.counts).data().to_vec();
    let loss = net.graph.mse(heads.counts, &target).unwrap();
    let grads = net.graph.backward(loss).unwrap().params(&net.graph);
    assert!(grads.values().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn inference_error_never_exceeds_the_training_view() {
    // Clamping and discarding can only move a prediction toward a non-negative truth.
    let cfg = TrainConfig {
        max_steps: Some(6),
        ..short_cfg(8)
    };
    let patches = tiny_patches(16, 6);
    let (state, _) = Trainer::new(&cfg, fresh_state(&cfg, &patches), &patches, &[])
        .unwrap()
        .run(|_, _| Ok(()))
        .unwrap();
    let fit = fit_metrics(&state, &patches, &cfg).unwrap();
    let (mae, _) = patch_mae(&state, &patches, RoutingPolicy::GroundTruth).unwrap();
    assert!(mae <= fit.mae + 1e-6, "{mae} > {}", fit.mae);
}

#[test]
fn batch_loss_routes_by_label() {
    let cfg = short_cfg(9);
    let (patches, stats) = gradcheck_batch(64, 0).unwrap();
    let state = ModelState::init(&cfg.arch, stats, Normalization::default(), 0).unwrap();
    let obj = Objective::new(&state, &cfg).unwrap();
    let refs: Vec<&Patch> = patches.iter().collect();
    let labels: Vec<CrowdClass> = CrowdClass::ALL.to_vec();
    let mut net = Net::new(&state, Mode::Train).unwrap();
    let out = batch_loss(&mut net, &refs, &labels, &obj).unwrap();
    assert_eq!(out.routed, labels);
    assert_eq!(out.patch_counts.len(), 4);
    let p = out.parts;
    assert!((p.total - (p.regressor + p.ch + p.sm)).abs() < 1e-12);
    let w = cfg.loss_weights;
    let weighted = w.regressor * p.regressor + w.ch * p.ch + w.sm * p.sm;
    assert!((net.graph.value(out.total).data()[0] - weighted).abs() < 1e-12);
}

#[test]
fn gradcheck_without_attention_has_no_attention_group() {
    let cfg = TrainConfig {
        arch: ArchConfig {
            vacm_enabled: false,
            ..ArchConfig::tiny()
        },
        ..TrainConfig::tiny_overfit()
    };
    let opts = GradCheckOptions {
        samples_per_tensor: 1,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&cfg, 1, &opts).unwrap();
    assert!(report.groups.iter().all(|g| !g.group.starts_with("vacm")));
    assert!(report.groups.iter().any(|g| g.group == "crh"));
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn prepare_splits_and_samples() {
    let cfg = TrainConfig {
        n_patches: 5,
        val_fraction: 0.25,
        ..short_cfg(10)
    };
    let opts = SynthOptions::default();
    let records = generate_synthetic_with(8, (64, 96), (0, 10), 1, &opts).unwrap();
    let prep = prepare(&records, &cfg).unwrap();
    assert_eq!(prep.train.len(), 6);
    assert_eq!(prep.val.len(), 2);
    assert_eq!(prep.patches.len(), 10);
    assert!(prep.patches.iter().all(|p| p.side() == 64));
}

#[test]
fn run_config_parses_and_rejects_unknown_keys() {
    let text = r#"
        output = "out"
        [data.synthetic]
        n_images = 4
        size_range = [64, 64]
        count_range = [0, 5]
        [train]
        epochs = 1
        base_lr = 0.01
        [train.arch]
        base_channels = 4
        input_size = 64
    "#;
    let cfg = RunConfig::from_toml_str(text).unwrap();
    assert_eq!(cfg.train.arch.base_channels, 4);
    assert_eq!(cfg.train.batch_size, 16);
    assert!(RunConfig::from_toml_str("[train]\nepoch = 3\n").is_err());
    assert!(RunConfig::from_toml_str("[train]\nbatch_size = 0\n").is_err());
}
