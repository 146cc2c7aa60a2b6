use lctr_core::checkpoint;
use lctr_core::data::generate_dataset;
use lctr_core::harness::{self, EvalOptions};
use lctr_core::vit::BackboneConfig;
use lctr_core::{LctrError, LctrModel, RunConfig};

fn tiny() -> RunConfig {
    RunConfig {
        backbone: BackboneConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
        },
        epochs: 1,
        batch_size: 4,
        n_train: 24,
        n_test: 6,
        seed: 3,
        ..RunConfig::default()
    }
}

#[test]
fn attention_rows_stay_stochastic_after_training() {
    let mut cfg = tiny();
    cfg.batch_size = 1;
    cfg.n_train = 100;
    cfg.optimizer.lr = 1e-2;
    let (train, test) = generate_dataset(cfg.n_train, 3, 32, 3, cfg.seed).unwrap();
    let init = LctrModel::new(cfg.model_config(), cfg.seed).unwrap();
    let (trained, logs) = harness::train(&cfg, &train).unwrap();
    assert_eq!(logs.len(), 1);
    for model in [&init, &trained] {
        for s in &test {
            let rec = model.predict(&s.image).unwrap().record;
            assert_eq!(rec.num_blocks(), 2);
            assert!(rec.max_row_sum_error() <= 1e-6);
        }
    }
    assert_ne!(init.store.checksum(), trained.store.checksum());
}

#[test]
fn checkpoint_round_trip_reproduces_forward_bits() {
    let cfg = tiny();
    let (train, test) = generate_dataset(cfg.n_train, cfg.n_test, 32, 3, cfg.seed).unwrap();
    let (model, _) = harness::train(&cfg, &train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model.store, &path).unwrap();
    let mut restored = LctrModel::new(cfg.model_config(), 999).unwrap();
    checkpoint::load(&path, &mut restored.store).unwrap();
    for s in &test {
        let (a, b) = (model.predict(&s.image).unwrap(), restored.predict(&s.image).unwrap());
        assert_eq!(a.probs.data(), b.probs.data());
        assert_eq!(a.class_maps.data(), b.class_maps.data());
    }
}

#[test]
fn incompatible_checkpoint_is_a_manifest_error() {
    let cfg = tiny();
    let model = LctrModel::new(cfg.model_config(), 1).unwrap();
    let mut other_cfg = cfg.clone();
    other_cfg.backbone.embed_dim = 12;
    let mut other = LctrModel::new(other_cfg.model_config(), 1).unwrap();
    let err = checkpoint::load_into(&checkpoint::encode(&model.store), &mut other.store).unwrap_err();
    assert!(matches!(err, LctrError::Manifest(_)), "{err}");
}

#[test]
fn rpam_changes_neither_parameters_nor_classification() {
    let cfg = tiny();
    let (train, test) = generate_dataset(cfg.n_train, cfg.n_test, 32, 3, cfg.seed).unwrap();
    let (model, _) = harness::train(&cfg, &train).unwrap();
    let before = model.param_count();
    let run = |rpam_enabled| {
        harness::evaluate_model(&model, &test, EvalOptions { rpam_enabled, threshold_ratio: 0.35 })
            .unwrap()
            .report
    };
    let (off, on) = (run(false), run(true));
    assert_eq!(model.param_count(), before);
    assert_eq!((off.top1_cls, off.top5_cls), (on.top1_cls, on.top5_cls));
}

#[test]
fn run_eval_writes_artifacts_deterministically() {
    let cfg = tiny();
    let (train, test) = generate_dataset(cfg.n_train, cfg.n_test, 32, 3, cfg.seed).unwrap();
    let texts: Vec<String> = (0..2)
        .map(|_| {
            let (model, _) = harness::train(&cfg, &train).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let out = harness::run_eval(&model, &test, EvalOptions::from_config(&cfg), dir.path()).unwrap();
            assert!(out.report.is_consistent());
            for f in ["metrics.json", "boxes.csv", "heatmap_0.pgm", "heatmap_5.pgm"] {
                assert!(dir.path().join(f).exists(), "{f}");
            }
            let boxes = std::fs::read_to_string(dir.path().join("boxes.csv")).unwrap();
            assert_eq!(boxes.lines().count(), cfg.n_test + 1);
            std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap()
        })
        .collect();
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn ablation_emits_four_rows() {
    let cfg = tiny();
    let (train, test) = generate_dataset(cfg.n_train, cfg.n_test, 32, 3, cfg.seed).unwrap();
    let rows = harness::ablate(&cfg, &train, &test).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label()).collect();
    assert_eq!(labels, ["baseline", "rpam", "cdm", "rpam+cdm"]);
    assert_eq!(rows[0].report.top1_cls, rows[1].report.top1_cls);
    assert_eq!(rows[2].report.top1_cls, rows[3].report.top1_cls);
    assert_eq!(harness::ablation_table(&rows).lines().count(), 5);
}

#[test]
fn sweep_produces_one_point_per_ratio() {
    let cfg = tiny();
    let (_, test) = generate_dataset(0, cfg.n_test, 32, 3, cfg.seed).unwrap();
    let model = LctrModel::new(cfg.model_config(), 0).unwrap();
    let ratios = harness::default_sweep_ratios();
    let curve = harness::sweep_threshold(&model, &test, true, &ratios).unwrap();
    assert_eq!(curve.len(), 18);
    assert!(curve.iter().all(|&(_, g)| (0.0..=1.0).contains(&g)));
    assert!(harness::sweep_csv(&curve).starts_with("ratio,gt_known\n0.05,"));
}
