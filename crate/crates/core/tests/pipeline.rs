mod common;

use std::fs;

use ovqa::checkpoint;
use ovqa::pipeline::{
    self, arms_for, init_closed_model, init_open_model, run_experiment, run_sweep, Layout,
    ReportFile, Stage,
};
use ovqa::vocab::{load_samples, AnswerVocabulary};
use ovqa::AnswerGraph;

use common::{small, snapshot};

fn read_report(path: &std::path::Path) -> ReportFile {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn rerunning_single_stages_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = small(dir.path(), &[]);
    let layout = run_experiment(&loaded).unwrap();
    let before = snapshot(&layout.root);

    let c = &loaded.config;
    pipeline::stage_vocab(c, &layout).unwrap();
    pipeline::stage_graph(c, &layout).unwrap();
    pipeline::stage_train(c, &layout).unwrap();
    pipeline::stage_predict(c, &layout).unwrap();
    pipeline::stage_eval(c, &layout).unwrap();
    assert_eq!(snapshot(&layout.root), before);

    // Stage by stage into a fresh directory gives the same downstream files.
    let other = tempfile::tempdir().unwrap();
    let loaded2 = small(other.path(), &[]);
    let l2 = Layout::new(other.path());
    pipeline::write_manifest(&loaded2, &l2).unwrap();
    pipeline::stage_gen(&loaded2.config, &l2).unwrap();
    pipeline::stage_vocab(&loaded2.config, &l2).unwrap();
    pipeline::stage_graph(&loaded2.config, &l2).unwrap();
    pipeline::stage_train(&loaded2.config, &l2).unwrap();
    pipeline::stage_predict(&loaded2.config, &l2).unwrap();
    pipeline::stage_eval(&loaded2.config, &l2).unwrap();
    let mut a = before;
    let mut b = snapshot(other.path());
    a.remove("manifest.json");
    b.remove("manifest.json");
    assert_eq!(a, b);
}

#[test]
fn zero_epochs_reports_the_initial_models() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = small(dir.path(), &["train.epochs=0"]);
    let layout = run_experiment(&loaded).unwrap();
    let c = &loaded.config;

    let train = load_samples(&layout.train_samples()).unwrap();
    let vocab = AnswerVocabulary::load(&layout.vocab()).unwrap();
    let (gp, fp) = layout.graph("train");
    let graph = AnswerGraph::load(&gp, &fp).unwrap();
    let f = train[0].feature.len();

    let (open, _) = checkpoint::decode_open(&fs::read(layout.checkpoint("open")).unwrap()).unwrap();
    assert_eq!(
        open,
        init_open_model(c, graph.dim(), f, c.verbalizer.epsilon).unwrap()
    );
    let (closed, _) =
        checkpoint::decode_closed(&fs::read(layout.checkpoint("closed")).unwrap()).unwrap();
    assert_eq!(
        closed,
        init_closed_model(c, &vocab, graph.dim(), f).unwrap()
    );

    let again = tempfile::tempdir().unwrap();
    run_experiment(&small(again.path(), &["train.epochs=0"])).unwrap();
    for arm in arms_for(c) {
        assert_eq!(
            fs::read(layout.report(&arm.name)).unwrap(),
            fs::read(Layout::new(again.path()).report(&arm.name)).unwrap()
        );
    }
}

#[test]
fn artifacts_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = small(dir.path(), &["verbalizer.epsilon=0.6"]);
    let layout = run_experiment(&loaded).unwrap();
    let files = snapshot(&layout.root);
    for name in files.keys() {
        if name.ends_with(".jsonl") || name.ends_with(".csv") || name.ends_with(".txt") {
            assert!(
                files.contains_key(&format!("{name}.meta.json")),
                "{name} has no sidecar"
            );
        }
    }
    let open = read_report(&layout.report("open"));
    assert_eq!(open.provenance.fingerprint.epsilon, 0.6);
    assert_eq!(open.provenance.fingerprint.seed, 7);
    assert_eq!(open.provenance.tool_version, ovqa::provenance::TOOL_VERSION);
    assert_eq!(
        read_report(&layout.report("ablation"))
            .provenance
            .fingerprint
            .epsilon,
        1.0
    );
    for arm in ["open", "ablation", "closed"] {
        let (_, header) = match arm {
            "closed" => {
                let (_, h) =
                    checkpoint::decode_closed(&fs::read(layout.checkpoint(arm)).unwrap()).unwrap();
                ((), h)
            }
            _ => {
                let (_, h) =
                    checkpoint::decode_open(&fs::read(layout.checkpoint(arm)).unwrap()).unwrap();
                ((), h)
            }
        };
        assert_eq!(
            header.provenance.tool_version,
            ovqa::provenance::TOOL_VERSION
        );
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(layout.manifest()).unwrap()).unwrap();
    assert_eq!(manifest["config"]["verbalizer"]["epsilon"], 0.6);
    assert_eq!(manifest["config"]["graph"]["k_neighbors"], 3);
    let overrides: Vec<&str> = manifest["overrides"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(overrides.contains(&"verbalizer.epsilon=0.6"));
    let defaulted: Vec<&str> = manifest["defaulted"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert!(defaulted.contains(&"train.learning_rate"));
    assert!(defaulted.contains(&"verbalizer.leaky_slope"));
    assert!(!defaulted.contains(&"graph.k_neighbors"));
}

#[test]
fn sweep_fingerprints_differ_only_in_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = small(dir.path(), &["train.epochs=1"]);
    let grid = pipeline::default_grid();
    let dirs = run_sweep(&loaded, &grid).unwrap();
    assert_eq!(dirs.len(), 5);
    let reports: Vec<ReportFile> = dirs
        .iter()
        .map(|d| read_report(&d.report("open")))
        .collect();
    for (r, &eps) in reports.iter().zip(&grid) {
        let mut f = r.provenance.fingerprint;
        assert_eq!(f.epsilon, eps);
        f.epsilon = reports[0].provenance.fingerprint.epsilon;
        assert_eq!(f, reports[0].provenance.fingerprint);
    }
    let csv = fs::read_to_string(dir.path().join("sweep").join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    // Concurrent arms match a sequential retrain of the same ε.
    let single = tempfile::tempdir().unwrap();
    let l = run_experiment(&small(
        single.path(),
        &["train.epochs=1", "verbalizer.epsilon=0.5"],
    ))
    .unwrap();
    assert_eq!(
        fs::read(l.checkpoint("open")).unwrap(),
        fs::read(dirs[0].checkpoint("open")).unwrap()
    );
}

#[test]
fn missing_upstream_is_a_tagged_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let loaded = small(dir.path(), &[]);
    let layout = Layout::new(dir.path());
    pipeline::stage_gen(&loaded.config, &layout).unwrap();
    let err = pipeline::stage_graph(&loaded.config, &layout).unwrap_err();
    assert_eq!(err.stage, Stage::Graph);
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn divergence_is_reported_as_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&small(dir.path(), &["train.learning_rate=1e300"])).unwrap_err();
    assert_eq!(err.stage, Stage::Train);
    assert_eq!(err.exit_code(), 4, "{err}");
}
