use super::*;
use crate::federation::FederationConfig;
use crate::losses::LossMode;
use crate::model::ArchConfig;
use crate::phantom::{AppearanceProfile, LesionSpec, SplitCounts};

fn site(id: &str, gamma: f64) -> SiteSpec {
    SiteSpec {
        id: id.into(),
        profile: AppearanceProfile {
            gamma,
            ..AppearanceProfile::IDENTITY
        },
    }
}

fn tiny(strategy: Strategy) -> ExperimentConfig {
    ExperimentConfig {
        name: None,
        seed: 11,
        data: DataSpec {
            size: (32, 32),
            counts: SplitCounts {
                train: 2,
                val: 1,
                test: 2,
            },
            clients: vec![site("a", 1.0), site("b", 0.6)],
            unseen: site("u", 1.6),
            lesions: LesionSpec {
                count_range: (1, 2),
                radius_range_px: (1.5, 2.5),
                hyperintensity: 0.6,
            },
        },
        arch: ArchConfig {
            base_filters: 4,
            max_filters: 8,
            bottleneck_channels: 8,
            input_size: (32, 32),
            ..ArchConfig::default()
        },
        federation: FederationConfig {
            rounds: 2,
            local_epochs: 1,
            batch_size: 2,
            lr0: 1e-3,
            strategy,
            ..FederationConfig::default()
        },
        postprocess: Default::default(),
        metrics: Default::default(),
        output_dir: None,
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), read(&p)));
            }
        }
    }
    out.sort();
    out
}

type Mutation = Box<dyn Fn(&mut ExperimentConfig)>;

#[test]
fn validation_rejects_inconsistent_configs() {
    let ok = tiny(Strategy::FedDis);
    ok.validate().unwrap();
    let cases: Vec<Mutation> = vec![
        Box::new(|c| c.data.size = (64, 64)),
        Box::new(|c| c.data.clients[1].id = "a".into()),
        Box::new(|c| c.data.unseen.id = "a".into()),
        Box::new(|c| c.data.clients[0].id = "a/b".into()),
        Box::new(|c| c.data.clients.clear()),
        Box::new(|c| c.federation.seed = 3),
        Box::new(|c| c.metrics.bucket_thresholds_mm2 = vec![10.0, 5.0]),
        Box::new(|c| c.arch.bottleneck_channels = 7),
        Box::new(|c| c.data.counts.test = 0),
    ];
    for (i, mutate) in cases.iter().enumerate() {
        let mut c = ok.clone();
        mutate(&mut c);
        let err = c.validate().expect_err(&format!("case {i} accepted"));
        assert!(err.is_validation(), "case {i}: {err}");
    }
}

#[test]
fn config_json_round_trips_and_rejects_unknown_fields() {
    let c = tiny(Strategy::FedAvg);
    let text = serde_json::to_string_pretty(&c).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, c);
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["federation"]["rounds_typo"] = 3.into();
    assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
}

#[test]
fn stage_hashes_follow_dependencies() {
    let a = tiny(Strategy::FedDis);
    let mut b = a.clone();
    b.federation.strategy = Strategy::FedAvg;
    let (ha, hb) = (a.stage_hashes().unwrap(), b.stage_hashes().unwrap());
    assert_eq!(ha.data, hb.data);
    assert_ne!(ha.train, hb.train);
    assert_ne!(ha.config, hb.config);

    let mut c = a.clone();
    c.postprocess.min_area = 9;
    let hc = c.stage_hashes().unwrap();
    assert_eq!(
        (ha.data.as_str(), ha.train.as_str()),
        (hc.data.as_str(), hc.train.as_str())
    );
    assert_ne!(ha.segment, hc.segment);

    let mut d = a.clone();
    d.seed = 12;
    assert_ne!(ha.data, d.stage_hashes().unwrap().data);

    let mut e = a.clone();
    e.output_dir = Some("elsewhere".into());
    assert_eq!(ha, e.stage_hashes().unwrap());
}

#[test]
fn labels_name_strategy_and_ablation() {
    let mut c = tiny(Strategy::FedDis);
    assert_eq!(c.label(), "feddis");
    c.federation.loss_mode = LossMode::NoLcl;
    assert_eq!(c.label(), "feddis_no_LCL");
    c.federation.strategy = Strategy::FedAvg;
    assert_eq!(c.label(), "fedavg");
    c.name = Some("custom".into());
    assert_eq!(c.label(), "custom");
}

#[test]
fn end_to_end_run_is_idempotent_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (one, two) = (tmp.path().join("one"), tmp.path().join("two"));
    let m1 = run_experiment(tiny(Strategy::FedDis), &one).unwrap();
    for stage in STAGES {
        assert!(m1.is_complete(stage), "{stage} incomplete");
    }
    assert!(m1.artifact_paths().iter().all(|p| p.exists()));

    let (report, scores) = load_report(&m1).unwrap();
    assert_eq!(report.label, "feddis");
    assert_eq!(report.datasets.len(), 2);
    assert!(report.similarity.is_some());
    assert_eq!(scores.iter().map(|s| s.dice.len()).sum::<usize>(), 4);
    assert!(one.join("evaluate/embeddings.csv").exists());

    // a rerun does not touch any stage
    let before = files_under(&one);
    let m1b = run_experiment(tiny(Strategy::FedDis), &one).unwrap();
    assert_eq!(m1b, m1);
    assert_eq!(files_under(&one), before);

    // an independent run reproduces every metric file byte for byte
    run_experiment(tiny(Strategy::FedDis), &two).unwrap();
    for f in [
        "metrics.csv",
        "per_slice.csv",
        "ssim.csv",
        "buckets.csv",
        "embeddings.csv",
        "report.md",
    ] {
        assert_eq!(
            read(&one.join("evaluate").join(f)),
            read(&two.join("evaluate").join(f)),
            "{f}"
        );
    }
    assert_eq!(read(&one.join("train/rounds.csv")), read(&two.join("train/rounds.csv")));
}

#[test]
fn deleted_report_stage_is_regenerated_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    run_experiment(tiny(Strategy::FedAvg), &root).unwrap();
    let before = files_under(&root.join("evaluate"));
    let train_before = read(&root.join("train/state/global.ckpt"));
    fs::remove_dir_all(root.join("evaluate")).unwrap();
    let m = run_experiment(tiny(Strategy::FedAvg), &root).unwrap();
    assert!(m.is_complete("evaluate"));
    assert_eq!(files_under(&root.join("evaluate")), before);
    assert_eq!(read(&root.join("train/state/global.ckpt")), train_before);
}

#[test]
fn mismatched_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let mut runner = Runner::open(tiny(Strategy::FedDis), &root).unwrap();
    runner.data().unwrap();
    let err = Runner::open(tiny(Strategy::FedAvg), &root).unwrap_err();
    assert!(matches!(err, Error::State(_)), "{err}");
}

#[test]
fn strategy_change_reuses_identical_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    Runner::open(tiny(Strategy::FedDis), &a).unwrap().data().unwrap();
    Runner::open(tiny(Strategy::SiloBn), &b).unwrap().data().unwrap();
    assert_eq!(files_under(&a.join("data")), files_under(&b.join("data")));
    let (ma, mb) = (RunManifest::load(&a).unwrap(), RunManifest::load(&b).unwrap());
    assert_eq!(ma.data_hash, mb.data_hash);
    assert_ne!(ma.config_hash, mb.config_hash);
}

#[test]
fn interrupted_training_resumes_to_the_same_state() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, cut) = (tmp.path().join("full"), tmp.path().join("cut"));
    let config = tiny(Strategy::FedDis);
    Runner::open(config.clone(), &full).unwrap().train().unwrap();

    let mut runner = Runner::open(config.clone(), &cut).unwrap();
    runner.data().unwrap();
    // leave a one-round checkpoint behind, as a crash after round 1 would
    let fed = config.effective_federation();
    let clients = runner.load_sites("healthy").unwrap();
    let parts = participants(&clients, fed.strategy);
    let mut state = FederationState::initial(&parts, &config.arch, &fed).unwrap();
    state.step_round(&parts, &fed).unwrap();
    state
        .save(
            &cut.join("train/state"),
            &BTreeMap::from([("global".to_string(), config.seed)]),
        )
        .unwrap();
    let resumed = runner.train().unwrap();
    assert_eq!(resumed.rounds_done(), 2);
    assert_eq!(
        read(&full.join("train/rounds.csv")),
        read(&cut.join("train/rounds.csv"))
    );
    assert_eq!(
        read(&full.join("train/loss_log.csv")),
        read(&cut.join("train/loss_log.csv"))
    );
}

#[test]
fn restart_without_resume_discards_the_partial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let config = tiny(Strategy::FedAvg);
    let mut runner = Runner::open(config.clone(), &root).unwrap();
    runner.data().unwrap();
    // a foreign checkpoint that would be rejected if it were resumed
    let fed = FederationConfig {
        strategy: Strategy::FedDis,
        ..config.effective_federation()
    };
    let clients = runner.load_sites("healthy").unwrap();
    let parts = participants(&clients, fed.strategy);
    let mut state = FederationState::initial(&parts, &config.arch, &fed).unwrap();
    state.step_round(&parts, &fed).unwrap();
    state.save(&root.join("train/state"), &BTreeMap::new()).unwrap();
    assert!(matches!(runner.train(), Err(Error::State(_))));
    runner.set_resume(false);
    assert_eq!(runner.train().unwrap().rounds_done(), 2);
}

#[test]
fn local_only_runs_without_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let m = run_experiment(tiny(Strategy::LocalOnly), &root).unwrap();
    let (report, _) = load_report(&m).unwrap();
    assert_eq!(report.similarity, None);
    assert!(!root.join("evaluate/embeddings.csv").exists());
    let mut runner = Runner::open(tiny(Strategy::LocalOnly), &root).unwrap();
    let err = runner.export_embeddings(&root.join("emb.csv")).unwrap_err();
    assert!(err.is_validation());
}

#[test]
fn comparison_against_itself_and_across_strategies() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_experiment(tiny(Strategy::FedDis), &tmp.path().join("a")).unwrap();
    let b = run_experiment(tiny(Strategy::Centralized), &tmp.path().join("b")).unwrap();

    let own = compare_strategies(std::slice::from_ref(&a), "feddis").unwrap();
    assert_eq!(own.rows.len(), 1);
    assert_eq!(own.rows[0].relative_improvement, 0.0);
    assert!(own.rows[0].cells.iter().all(|c| c.statistic == 0.0 && !c.significant()));

    let table = compare_strategies(&[a.clone(), b.clone()], "centralized").unwrap();
    assert_eq!(table.datasets, vec!["a", "b"]);
    for (row, m) in table.rows.iter().zip([&a, &b]) {
        let (report, _) = load_report(m).unwrap();
        assert_eq!(row.label, report.label);
        assert_eq!(row.mean_dice, report.mean_dice);
        assert_eq!(row.ssim_unseen, report.ssim_unseen);
        for (cell, d) in row.cells.iter().zip(&report.datasets) {
            assert_eq!(cell.dice, d.dice);
        }
    }
    let md = table.to_markdown();
    assert!(md.contains("| feddis |") && md.contains("| centralized |"));
    assert_eq!(table.to_csv().lines().count(), 3);

    assert!(matches!(
        compare_strategies(std::slice::from_ref(&a), "fedavg"),
        Err(Error::Input(_))
    ));
    let mut other = b.clone();
    other.data_hash = "0".repeat(64);
    assert!(matches!(
        compare_strategies(&[a, other], "feddis"),
        Err(Error::Input(_))
    ));
}

fn cell(p: f64) -> ComparisonCell {
    ComparisonCell {
        dice: MeanStd::of(&[0.5]).unwrap(),
        p_value: p,
        statistic: 0.5,
    }
}

#[test]
fn stars_mark_exactly_the_significant_cells() {
    let table = Comparison {
        baseline: "base".into(),
        datasets: vec!["x".into(), "y".into(), "z".into()],
        rows: vec![ComparisonRow {
            label: "m".into(),
            cells: vec![cell(0.05), cell(0.0500001), cell(0.01)],
            mean_dice: 0.5,
            relative_improvement: 0.4,
            ssim_healthy: 0.9,
            ssim_unseen: 0.8,
        }],
    };
    let md = table.to_markdown();
    let row = md.lines().find(|l| l.starts_with("| m |")).unwrap();
    let cells: Vec<&str> = row.split('|').map(str::trim).filter(|s| !s.is_empty()).collect();
    assert!(cells[1].ends_with('*'));
    assert!(!cells[2].ends_with('*'));
    assert!(cells[3].ends_with('*'));
    assert!(row.contains("40%"));
}
