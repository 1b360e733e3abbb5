//! Generator, dataset and training pipeline behavior.

use scenenet::dataset::{load_manifest_dataset, voxel_samples};
use scenenet::pointcloud::crop_around_point;
use scenenet::synth::{
    build_dataset, generate_dataset, generate_scene, template_kernel, template_match, SceneConfig, TemplateConfig,
    LABEL_TOWER,
};
use scenenet::pointcloud::VoxelGrid;
use scenenet::grid::Grid3;
use scenenet::training::{mean_loss, train, TrainConfig};
use scenenet::training::loss::LossConfig;

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        kernel_shape: [7, 7, 7],
        grid_shape: [24, 24, 24],
        ..TrainConfig::default()
    }
}

#[test]
fn requested_tower_fraction_is_met() {
    for target in [0.005, 0.02, 0.1] {
        let cfg = SceneConfig {
            extent: [160.0, 160.0],
            tower_fraction: Some(target),
            seed: 9,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg).unwrap();
        let n = scene.cloud.len();
        assert!(n >= 100_000, "only {n} points");
        let got = scene.cloud.count_label(LABEL_TOWER) as f64 / n as f64;
        assert!((got / target - 1.0).abs() <= 0.2, "target {target}, got {got}");
    }
}

#[test]
fn towers_stay_inside_their_radius_and_height() {
    for seed in 0..5 {
        let cfg = SceneConfig { seed, tower_count: 2, ..SceneConfig::default() };
        let scene = generate_scene(&cfg).unwrap();
        let towers: Vec<[f32; 3]> = scene
            .cloud
            .points
            .iter()
            .zip(&scene.cloud.labels)
            .filter(|(_, &l)| l == LABEL_TOWER)
            .map(|(p, _)| *p)
            .collect();
        for p in towers {
            let owner = scene.towers.iter().find(|t| {
                let d = (f64::from(p[0]) - t.center[0]).hypot(f64::from(p[1]) - t.center[1]);
                d <= t.radius + 1e-4 && f64::from(p[2]) >= t.base_z - 1e-4 && f64::from(p[2]) <= t.base_z + t.height + 1e-4
            });
            assert!(owner.is_some(), "seed {seed}: stray tower point {p:?}");
        }
        for t in &scene.towers {
            assert!(t.height >= cfg.tower_height[0] && t.height <= cfg.tower_height[1]);
        }
    }
}

#[test]
fn crop_at_tower_height_keeps_whole_tower() {
    let cfg = SceneConfig { tower_height: [25.0, 25.0], seed: 4, ..SceneConfig::default() };
    let scene = generate_scene(&cfg).unwrap();
    let t = &scene.towers[0];
    let cropped = crop_around_point(&scene.cloud, [t.center[0], t.center[1], t.base_z], t.height);
    assert_eq!(cropped.count_label(LABEL_TOWER), scene.cloud.count_label(LABEL_TOWER));
}

#[test]
fn dataset_on_disk_round_trips_and_is_reproducible() {
    let cfg = SceneConfig { seed: 7, ..SceneConfig::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ma, _) = build_dataset(&cfg, 10, (0.2, 0.1, 0.7), a.path()).unwrap();
    let (mb, _) = build_dataset(&cfg, 10, (0.2, 0.1, 0.7), b.path()).unwrap();
    assert_eq!(ma.to_json(), mb.to_json());
    for e in &ma.scenes {
        let fa = std::fs::read(a.path().join(&e.path)).unwrap();
        let fb = std::fs::read(b.path().join(&e.path)).unwrap();
        assert_eq!(fa, fb);
    }
    let (_, loaded) = load_manifest_dataset(&a.path().join("manifest.json")).unwrap();
    let direct = generate_dataset(&cfg, 10, (0.2, 0.1, 0.7)).unwrap();
    assert_eq!(loaded.train, direct.train);
    assert_eq!(loaded.val, direct.val);
    assert_eq!(loaded.test, direct.test);
    assert_eq!((loaded.train.len(), loaded.val.len(), loaded.test.len()), (2, 1, 7));
}

#[test]
fn template_peaks_on_its_own_shell() {
    let t = TemplateConfig { radius: 2.5, shape: [7, 9, 9] };
    let k = template_kernel(&t).unwrap();
    let mut g = Grid3::<f64>::zeros([21, 21, 21]);
    for z in 0..7 {
        for y in 0..9 {
            for x in 0..9 {
                if k.get([z, y, x]) > &0.0 {
                    *g.get_mut([z + 5, y + 6, x + 6]) = 1.0;
                }
            }
        }
    }
    let score = template_match(&VoxelGrid::from_values(g), &t).unwrap();
    let best = (0..score.len()).max_by(|&a, &b| score.as_slice()[a].total_cmp(&score.as_slice()[b])).unwrap();
    assert_eq!(score.coords(best), [5 + 3, 6 + 4, 6 + 4]);
}

#[test]
fn training_is_bit_reproducible() {
    let ds = generate_dataset(&SceneConfig { seed: 3, ..SceneConfig::default() }, 10, (0.4, 0.2, 0.4)).unwrap();
    let a = train(&ds, &small_config(), 5).unwrap();
    let b = train(&ds, &small_config(), 5).unwrap();
    assert_eq!(a.params, b.params);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
    }
}

#[test]
fn smoke_training_lowers_train_loss() {
    let ds = generate_dataset(&SceneConfig { seed: 11, ..SceneConfig::default() }, 20, (0.5, 0.25, 0.25)).unwrap();
    let cfg = TrainConfig { epochs: 5, learning_rate: 0.01, ..small_config() };
    let out = train(&ds, &cfg, 2).unwrap();
    let samples = voxel_samples(&ds.train, cfg.grid_shape, ds.target_label).unwrap();
    let loss = LossConfig::default();
    let before = mean_loss(&out.initial.observer().unwrap(), &samples, &loss).unwrap();
    let after = mean_loss(&out.params.observer().unwrap(), &samples, &loss).unwrap();
    assert!(after < before, "train loss {before} -> {after}");
}

#[test]
fn zero_epochs_keeps_initialization() {
    let ds = generate_dataset(&SceneConfig::default(), 6, (0.5, 0.25, 0.25)).unwrap();
    let out = train(&ds, &TrainConfig { epochs: 0, ..small_config() }, 1).unwrap();
    assert_eq!(out.params, out.initial);
    assert!(out.history.is_empty() && out.best_epoch.is_none());
}
