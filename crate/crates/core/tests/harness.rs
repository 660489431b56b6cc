use cllora_core::adapters::count_trainable_params;
use cllora_core::classifier::adapter_pass_count;
use cllora_core::harness::{
    cross_product, gradcheck, run_ablation, run_experiment, Axis, ExperimentConfig, Preset, RunReport, RunRngs,
};
use cllora_core::streams::gen_synthetic;
use cllora_core::Error;

fn quick() -> ExperimentConfig {
    ExperimentConfig {
        train_per_class: 4,
        test_per_class: 2,
        ..ExperimentConfig::micro()
    }
}

/// Three tasks over three blocks so position and flip make a difference.
fn three() -> ExperimentConfig {
    ExperimentConfig {
        num_classes: 6,
        num_tasks: 3,
        num_blocks: 3,
        epochs: 1,
        ..quick()
    }
}

#[test]
fn config_documents_merge_over_presets() {
    let cfg = ExperimentConfig::from_json(r#"{"rank": 3, "kd": false}"#, Preset::Desk).unwrap();
    assert_eq!(cfg.rank, 3);
    assert!(!cfg.kd);
    assert_eq!(cfg.num_blocks, ExperimentConfig::desk().num_blocks);

    let paper = ExperimentConfig::from_json(r#"{"preset": "paper", "epochs": 1}"#, Preset::Desk).unwrap();
    assert_eq!(paper.num_classes, 100);
    assert_eq!(paper.epochs, 1);

    let err = ExperimentConfig::from_json(r#"{"rank": 3, "lamda_kd": 1, "zzz": 0}"#, Preset::Desk).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    assert!(msg.contains("lamda_kd") && msg.contains("zzz"), "{msg}");

    assert!(matches!(ExperimentConfig::from_json(r#"{"rank": 0}"#, Preset::Desk), Err(Error::Config(_) | Error::InvalidRank { .. })));
    assert!(ExperimentConfig::from_json(r#"{"position": 99}"#, Preset::Desk).is_err());
    assert!(ExperimentConfig::from_json("[1]", Preset::Desk).is_err());
}

#[test]
fn report_json_round_trips_and_renders() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&quick(), 1, Some(dir.path())).unwrap();
    let loaded = RunReport::load(&dir.path().join("report.json")).unwrap();
    assert_eq!(loaded, out.report);
    let text = loaded.render();
    assert!(text.contains("A_bar") && text.contains("adapter passes per query 3"), "{text}");
    let acc = &loaded.accuracy;
    assert_eq!(acc.last, acc.per_task[1]);
    assert!((acc.average - (acc.per_task[0] + acc.per_task[1]) / 2.0).abs() < 1e-15);
}

#[test]
fn position_sweep_tracks_pass_formula() {
    let cfg = three();
    let axis = Axis::parse("l-sweep", &cfg).unwrap();
    assert_eq!(axis.values, ["0", "2", "3"]);
    let sweep = run_ablation(&cfg, &[axis], &[0], None).unwrap();
    for (row, report) in sweep.rows.iter().zip(&sweep.reports) {
        let l: usize = row.values[0].parse().unwrap();
        assert_eq!(row.pass_count, adapter_pass_count(l, 3, 3).unwrap());
        let expected: Vec<usize> = (1..=3).map(|t| adapter_pass_count(l, 3, t).unwrap()).collect();
        assert_eq!(report.observed_pass_counts, expected);
    }
}

#[test]
fn flipped_layout_runs_every_block_per_task() {
    let cfg = ExperimentConfig {
        flip: true,
        position: 1,
        ..three()
    };
    let out = run_experiment(&cfg, 2, None).unwrap();
    assert_eq!(out.report.observed_pass_counts, [3, 6, 9]);
    assert!(out.logs[1].steps.iter().all(|s| s.kd > 0.0));
}

#[test]
fn sweep_csv_has_one_row_per_combination_and_seed() {
    let cfg = quick();
    let axes = Axis::parse_list("fixB,rank=1:2:4", &cfg).unwrap();
    assert_eq!(cross_product(&axes).len(), 6);
    let dir = tempfile::tempdir().unwrap();
    let sweep = run_ablation(&cfg, &axes, &[0, 1], Some(dir.path())).unwrap();
    assert_eq!(sweep.rows.len(), 12);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "fixB,rank,seed,A_T,A_bar,params_pct,pass_count");
    assert_eq!(lines.count(), 12);
    assert!(dir.path().join("runs/fixB-off_rank-4_s1/report.json").exists());

    // Trainable shared down-projections add parameters; rank scales them.
    let pct = |fix: &str, rank: &str| {
        sweep.rows.iter().find(|r| r.values == [fix, rank]).unwrap().params_pct
    };
    assert!(pct("off", "2") > pct("on", "2"));
    assert!(pct("on", "4") > pct("on", "1"));
    assert_eq!(sweep.means().len(), 6);
}

#[test]
fn axis_parsing_rejects_bad_input() {
    let cfg = quick();
    assert!(Axis::parse("speed", &cfg).is_err());
    assert!(Axis::parse("kd=maybe", &cfg).is_err());
    assert!(Axis::parse("rank=0", &cfg).is_err());
    assert!(Axis::parse("attach=qz", &cfg).is_err());
    assert!(Axis::parse_list("kd,kd", &cfg).is_err());
    assert_eq!(Axis::parse("attach", &cfg).unwrap().values, ["q", "v", "qv", "qkv"]);
    assert!(run_ablation(&cfg, &[], &[], None).is_err());
}

#[test]
fn dataset_file_can_replace_generation() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.clld");
    let mut rngs = RunRngs::new(4);
    gen_synthetic(&cfg.synthetic_spec(), &mut rngs.data).unwrap().save(&path).unwrap();

    let generated = run_experiment(&cfg, 4, None).unwrap();
    let loaded_cfg = ExperimentConfig {
        dataset: Some(path),
        ..cfg.clone()
    };
    let loaded = run_experiment(&loaded_cfg, 4, None).unwrap();
    assert_eq!(generated.report.accuracy, loaded.report.accuracy);
    assert_eq!(generated.model.frozen_hashes(), loaded.model.frozen_hashes());

    let mismatched = ExperimentConfig {
        num_classes: 6,
        num_tasks: 3,
        ..loaded_cfg
    };
    assert!(matches!(run_experiment(&mismatched, 4, None), Err(Error::Config(_))));
}

#[test]
fn paper_preset_accounting() {
    let cfg = ExperimentConfig::paper();
    let counts = count_trainable_params(&cfg.adapter_config(), &cfg.backbone_config(), cfg.num_tasks).unwrap();
    assert!(counts.ratio_pct > 0.0 && counts.ratio_pct < 10.0);
    assert_eq!(adapter_pass_count(cfg.position, cfg.num_blocks, cfg.num_tasks).unwrap(), 6 + 6 * 10);
}

#[test]
fn gradcheck_passes_on_micro_model() {
    let report = gradcheck(&ExperimentConfig::micro(), 0, 1e-5).unwrap();
    assert!(report.zero_lr_unchanged);
    assert!(report.max_rel_error <= 1e-4, "{}", report.render());
    assert_eq!(report.terms.len(), 3);
}
