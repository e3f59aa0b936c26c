use gazeformer::data::{generate_sample, load_manifest, tag_label_correlation};
use gazeformer::gaze::{apply_gaze_mask, heatmap_from_fixations};
use gazeformer::metrics::{attention_grid, upsample};
use gazeformer::train::{ablation_cells, batch_loss, median, prepare_split, train_alpha};
use gazeformer::{
    accuracy, f1_score, generate_dataset, load_dataset, roc_auc, save_dataset, ssim, train_model, DatasetConfig, Error,
    ModelConfig, Tensor, TrainConfig,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn small_data(train: usize, test: usize) -> DatasetConfig {
    DatasetConfig {
        image_size: 16,
        train_size: train,
        test_size: test,
        ..DatasetConfig::default()
    }
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        timesteps: 2,
        epochs: 1,
        batch_size: 4,
        learning_rate: 0.05,
        eval_batch_size: 16,
        dataset: small_data(8, 8),
        model: ModelConfig {
            image_size: 16,
            stem_channels: 4,
            conv_blocks: 1,
            token_dim: 8,
            attention_blocks: 1,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_is_deterministic_per_seed() {
    let cfg = small_data(40, 20);
    let a = generate_dataset(&cfg, 7).unwrap();
    let b = generate_dataset(&cfg, 7).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&cfg, 8).unwrap();
    assert_ne!(a.train[0].image, c.train[0].image);
}

#[test]
fn class_balance_is_exact() {
    for (n, frac) in [(100, 0.5), (37, 0.3), (10, 1.0)] {
        let cfg = DatasetConfig {
            positive_fraction: frac,
            ..small_data(n, n)
        };
        let d = generate_dataset(&cfg, 1).unwrap();
        let want = (n as f64 * frac).round() as usize;
        assert_eq!(d.train.iter().filter(|s| s.label == 1).count(), want);
        assert_eq!(d.test.iter().filter(|s| s.label == 1).count(), want);
    }
}

#[test]
fn tag_correlation_matches_request() {
    let cfg = DatasetConfig {
        train_size: 1000,
        test_size: 1000,
        ..DatasetConfig::default()
    };
    for seed in [0, 1, 2] {
        let d = generate_dataset(&cfg, seed).unwrap();
        let train = tag_label_correlation(&d.train);
        let test = tag_label_correlation(&d.test);
        assert!((train - 0.95).abs() <= 0.03, "train correlation {train}");
        assert!(test.abs() <= 0.03, "test correlation {test}");
    }
}

#[test]
fn positives_carry_a_lesion_under_the_gaze() {
    let cfg = DatasetConfig::default();
    let pos = generate_sample(&cfg, "p".into(), true, false, 3);
    let neg = generate_sample(&cfg, "n".into(), false, false, 3);
    assert_eq!(pos.label, 1);
    assert_eq!(neg.label, 0);
    // the positive's fixations gather, the negative's scatter
    let spread = |s: &gazeformer::SyntheticSample| {
        let f = &s.gaze.fixations;
        let n = f.len() as f64;
        let (mx, my) = (
            f.iter().map(|p| p.x).sum::<f64>() / n,
            f.iter().map(|p| p.y).sum::<f64>() / n,
        );
        f.iter().map(|p| (p.x - mx).hypot(p.y - my)).sum::<f64>() / n
    };
    assert!(spread(&pos) < spread(&neg));
    let mean_dur = |s: &gazeformer::SyntheticSample| {
        s.gaze.fixations.iter().map(|p| p.duration).sum::<f64>() / s.gaze.fixations.len() as f64
    };
    assert!(mean_dur(&pos) > mean_dur(&neg));
    // the image is brighter where the positive's gaze lands
    let f = &pos.gaze.fixations[0];
    let at = |s: &gazeformer::SyntheticSample| s.image.at(&[0, f.y.round() as usize, f.x.round() as usize]);
    let mean = pos.image.sum() / pos.image.numel() as f64;
    assert!(at(&pos) > mean);
    for s in [&pos, &neg] {
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn tag_marks_the_corner() {
    let cfg = DatasetConfig::default();
    let tagged = generate_sample(&cfg, "t".into(), false, true, 5);
    let plain = generate_sample(&cfg, "u".into(), false, false, 5);
    assert!(tagged.shortcut_tag_present && !plain.shortcut_tag_present);
    assert!(tagged.image.at(&[0, 2, 2]) > 0.9);
    assert!(plain.image.at(&[0, 2, 2]) < 0.9);
}

#[test]
fn invalid_sizes_are_contract_errors() {
    let cfg = small_data(0, 5);
    assert!(matches!(generate_dataset(&cfg, 0), Err(Error::Contract { .. })));
}

#[test]
fn dataset_round_trips_through_disk() {
    let cfg = small_data(6, 4);
    let data = generate_dataset(&cfg, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &data, &cfg, 11).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    let m = load_manifest(dir.path()).unwrap();
    assert_eq!(m.seed, 11);
    assert_eq!(m.generator, cfg);
    let labels = std::fs::read_to_string(dir.path().join("train/labels.csv")).unwrap();
    assert!(labels.starts_with("image_id,label,shortcut_tag\n"));
}

#[test]
fn saving_twice_gives_identical_bytes() {
    let cfg = small_data(4, 4);
    let data = generate_dataset(&cfg, 3).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(a.path(), &data, &cfg, 3).unwrap();
    save_dataset(b.path(), &data, &cfg, 3).unwrap();
    for name in [
        "manifest.json",
        "train/labels.csv",
        "train/gaze.csv",
        "test/train-00000.pgm",
    ] {
        let pa = a.path().join(name);
        if pa.exists() {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
    }
    let pgm = a.path().join("train/train-00000.pgm");
    assert_eq!(
        std::fs::read(&pgm).unwrap(),
        std::fs::read(b.path().join("train/train-00000.pgm")).unwrap()
    );
}

fn pairwise_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn perfect_classifier_scores_one() {
    let labels = vec![0, 1, 1, 0, 1, 0];
    let scores: Vec<f64> = labels.iter().map(|&l| l as f64 * 0.8 + 0.1).collect();
    assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
    assert_eq!(f1_score(&labels, &labels).unwrap(), 1.0);
    assert_eq!(roc_auc(&scores, &labels).unwrap(), Some(1.0));
}

#[test]
fn f1_and_accuracy_by_hand() {
    let labels = [1, 1, 1, 0, 0];
    let preds = [1, 0, 1, 1, 0];
    assert_eq!(accuracy(&preds, &labels).unwrap(), 0.6);
    // tp 2, fp 1, fn 1
    assert!((f1_score(&preds, &labels).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(f1_score(&[0, 0], &[1, 0]).unwrap(), 0.0);
}

#[test]
fn single_class_auc_is_absent() {
    assert_eq!(roc_auc(&[0.1, 0.9], &[1, 1]).unwrap(), None);
}

#[test]
fn shuffled_scores_give_chance_auc() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let n = 20_000;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut scores: Vec<f64> = labels.iter().map(|&l| l as f64 + rng.random::<f64>()).collect();
    scores.shuffle(&mut rng);
    let auc = roc_auc(&scores, &labels).unwrap().unwrap();
    assert!((auc - 0.5).abs() < 0.05, "auc {auc}");
}

#[test]
fn auc_matches_pairwise_oracle_exactly() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
    for n in [2usize, 5, 17, 64, 200] {
        for _ in 0..20 {
            let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            // coarse scores force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..7) as f64 / 4.0).collect();
            assert_eq!(
                roc_auc(&scores, &labels).unwrap().unwrap(),
                pairwise_auc(&scores, &labels)
            );
        }
    }
}

#[test]
fn ssim_of_identical_maps_is_one() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    for (h, w) in [(11, 11), (16, 16), (12, 30)] {
        let x = Tensor::from_fn([h, w], |_| rng.random::<f64>());
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }
}

#[test]
fn ssim_of_inverted_checkerboard_is_negative() {
    let x = Tensor::from_fn([16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
    let inv = x.map(|v| 1.0 - v);
    assert!(ssim(&x, &inv).unwrap() < 0.0);
}

#[test]
fn ssim_rejects_bad_shapes() {
    let a = Tensor::zeros([16, 16]);
    assert!(matches!(
        ssim(&a, &Tensor::zeros([16, 15])),
        Err(Error::Dimension { .. })
    ));
    assert!(ssim(&Tensor::zeros([8, 8]), &Tensor::zeros([8, 8])).is_err());
}

#[test]
fn attention_grid_sums_columns() {
    // token 2 receives everything
    let mut att = Tensor::zeros([4, 4]);
    for r in 0..4 {
        att.set(&[r, 2], 1.0);
    }
    let g = attention_grid(&att, 2).unwrap();
    assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);
    let up = upsample(&g, 2);
    assert_eq!(up.shape(), &[4, 4]);
    assert_eq!(up.at(&[3, 1]), 1.0);
}

proptest! {
    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), h in 11usize..20, w in 11usize..20) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let a = Tensor::from_fn([h, w], |_| rng.random::<f64>());
        let b = Tensor::from_fn([h, w], |_| rng.random::<f64>());
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!(ab.abs() <= 1.0);
    }

    #[test]
    fn inverted_scores_flip_auc(seed in any::<u64>(), n in 2usize..80) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let inv: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = roc_auc(&scores, &labels).unwrap().unwrap();
        let b = roc_auc(&inv, &labels).unwrap().unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        let preds: Vec<usize> = scores.iter().map(|&s| (s >= 2.0) as usize).collect();
        let acc = accuracy(&preds, &labels).unwrap();
        let f1 = f1_score(&preds, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f1));
    }
}

#[test]
fn config_parses_with_overrides() {
    let text = "seed = 3\nalpha = 0.25\n[model]\ntoken_dim = 16\n";
    let ov = vec![
        ("lambda-loss".to_string(), "2".to_string()),
        ("model.attention_blocks".to_string(), "1".to_string()),
        ("enable_gm".to_string(), "false".to_string()),
        ("output.dir".to_string(), "out/x".to_string()),
    ];
    let cfg = TrainConfig::from_toml(text, &ov).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.alpha, 0.25);
    assert_eq!(cfg.lambda_loss, 2.0);
    assert_eq!(cfg.model.token_dim, 16);
    assert_eq!(cfg.model.attention_blocks, 1);
    assert!(!cfg.enable_gm);
    assert_eq!(cfg.output.dir, std::path::PathBuf::from("out/x"));
    let again = TrainConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn config_rejects_unknown_and_invalid_keys() {
    assert!(matches!(TrainConfig::from_toml("sed = 1", &[]), Err(Error::Config(_))));
    assert!(matches!(
        TrainConfig::from_toml("timesteps = 3", &[]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        TrainConfig::from_toml("momentum = 1.5", &[]),
        Err(Error::Config(_))
    ));
    let ov = vec![("model.nope".to_string(), "1".to_string())];
    assert!(matches!(TrainConfig::from_toml("", &ov), Err(Error::Config(_))));
}

#[test]
fn disabling_gm_leaves_images_as_alpha_zero() {
    let mut cfg = small_config(0);
    cfg.enable_gm = false;
    let data = generate_dataset(&cfg.dataset, 0).unwrap();
    let split = prepare_split(&data.train, &cfg, train_alpha(&cfg)).unwrap();
    for (s, img) in data.train.iter().zip(&split.images) {
        let mask = heatmap_from_fixations(&s.gaze, cfg.heatmap_sigma(), 16, 16).unwrap();
        let direct = apply_gaze_mask(&s.image, &mask, 0.0).unwrap();
        assert_eq!(img.data(), direct.data());
    }
}

#[test]
fn disabled_alignment_logs_zero() {
    let mut cfg = small_config(1);
    cfg.enable_alh = false;
    let data = generate_dataset(&cfg.dataset, 1).unwrap();
    let out = train_model(&cfg, &data, None).unwrap();
    for r in &out.rows {
        assert_eq!(r.align_loss, 0.0);
        assert_eq!(r.total_loss, r.cls_loss);
    }
}

#[test]
fn logged_total_decomposes() {
    let mut cfg = small_config(2);
    cfg.epochs = 2;
    cfg.lambda_loss = 3.0;
    let data = generate_dataset(&cfg.dataset, 2).unwrap();
    let out = train_model(&cfg, &data, None).unwrap();
    for r in &out.rows {
        assert!(r.align_loss > 0.0);
        assert!((r.total_loss - (r.cls_loss + 3.0 * r.align_loss)).abs() <= 1e-12);
    }
}

#[test]
fn one_epoch_lowers_the_training_loss() {
    let mut improved = 0;
    for seed in 0..5 {
        let cfg = TrainConfig {
            batch_size: 8,
            ..small_config(seed)
        };
        let data = generate_dataset(&cfg.dataset, seed).unwrap();
        let split = prepare_split(&data.train, &cfg, train_alpha(&cfg)).unwrap();
        let all: Vec<usize> = (0..split.len()).collect();
        let init = gazeformer::EgSpikeFormer::new(cfg.model.clone(), seed).unwrap();
        let before = batch_loss(&init, &cfg, &split, &all).unwrap().total;
        let out = train_model(&cfg, &data, None).unwrap();
        let after = batch_loss(&out.model, &cfg, &split, &all).unwrap().total;
        improved += (after < before) as usize;
    }
    assert!(improved >= 4, "loss fell in {improved} of 5 seeds");
}

#[test]
fn training_writes_identical_artifacts() {
    let cfg = small_config(4);
    let data = generate_dataset(&cfg.dataset, 4).unwrap();
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg.clone();
        c.output.dir = dir.path().to_path_buf();
        c.output.metrics_csv = true;
        train_model(&c, &data, Some(&c.output)).unwrap();
        bytes.push((
            std::fs::read(c.output.checkpoint_path()).unwrap(),
            std::fs::read(c.output.metrics_path()).unwrap(),
        ));
        assert!(c.output.metrics_path().with_extension("csv").exists());
    }
    assert_eq!(bytes[0], bytes[1]);
    let log = String::from_utf8(bytes[0].1.clone()).unwrap();
    let row: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(row["schema_version"], 1);
    assert!(row.get("wall_time_s").is_none());
}

#[test]
fn divergence_leaves_last_good_checkpoint() {
    let mut cfg = small_config(5);
    cfg.epochs = 2;
    cfg.learning_rate = 1e300;
    let data = generate_dataset(&cfg.dataset, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cfg.output.dir = dir.path().to_path_buf();
    let err = train_model(&cfg, &data, Some(&cfg.output)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let good = gazeformer::load_checkpoint(cfg.output.last_good_path()).unwrap();
    assert!(good.params.tensors().iter().all(|t| t.all_finite()));
}

#[test]
fn evaluation_metrics_are_in_range() {
    let cfg = small_config(6);
    let data = generate_dataset(&cfg.dataset, 6).unwrap();
    let e = train_model(&cfg, &data, None).unwrap().evaluation;
    assert_eq!(e.samples, 8);
    assert!((0.0..=1.0).contains(&e.accuracy) && (0.0..=1.0).contains(&e.f1));
    assert!(e.auc.is_some_and(|a| (0.0..=1.0).contains(&a)));
    assert!(e.ssim.abs() <= 1.0);
}

#[test]
fn ablation_grid_has_eight_cells() {
    let cells = ablation_cells(&[2, 4]);
    assert_eq!(cells.len(), 8);
    let mut labels: Vec<String> = cells.iter().map(|c| c.label()).collect();
    labels.sort();
    labels.dedup();
    assert_eq!(labels.len(), 8);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(&[]), None);
}
