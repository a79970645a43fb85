use std::fs;
use std::path::Path;

use tagrank::candidates::TagBudget;
use tagrank::eval::{dcg, dcg_at_k, TestKind};
use tagrank::ranker::PairMode;
use tagrank::pipeline::{
    cmd_dump_candidates, cmd_dump_stats, cmd_evaluate, cmd_prepare, cmd_train, fit_embeddings, Context,
    ExperimentConfig, Method, ModeKind, Prepared, REPORT_FILE,
};
use tagrank::synthgen::{generate, SynthSpec};
use tagrank::Error;

fn small_spec() -> SynthSpec {
    SynthSpec {
        n_users: 6,
        images_per_user: 14,
        vocab_size: 80,
        noise: 0.3,
        ..SynthSpec::default()
    }
}

fn write_raw(dir: &Path, spec: &SynthSpec) -> ExperimentConfig {
    let raw = dir.join("records.jsonl");
    generate::<f64>(spec).unwrap().write_records(fs::File::create(&raw).unwrap()).unwrap();
    ExperimentConfig {
        corpus: raw,
        min_occurrences: 1,
        m: 10,
        epochs: 5,
        ..ExperimentConfig::default()
    }
}

#[test]
fn prepare_train_evaluate_on_disk() {
    let root = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        n_tags: [10, 40, 100, 200].map(TagBudget::Limited).into_iter().chain([TagBudget::Unbounded]).collect(),
        ..write_raw(root.path(), &small_spec())
    };
    let run = root.path().join("run");
    let summary = cmd_prepare(&config, &run).unwrap();
    assert_eq!(summary.sessions, 84);
    assert_eq!(summary.train + summary.test, 84);
    for f in ["corpus.jsonl", "split.csv", "vocabulary.csv", "config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let skipped = cmd_train(&config, &run).unwrap();
    assert!(skipped.is_empty());
    for n in ["10", "40", "100", "200", "inf"] {
        assert!(run.join(format!("models_combined_{n}.txt")).exists());
    }
    let reports = cmd_evaluate(&config, &run, &[Method::Ranker, Method::PtRerank], None).unwrap();
    let csv = fs::read_to_string(run.join(REPORT_FILE)).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "config,n_tags,dcg_per_image,dcg10_per_image,dcg_per_user,dcg10_per_user,compared_to,t_dcg10,p_dcg10"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(reports.len(), 6);
    let ranker_rows: Vec<&&str> = rows.iter().filter(|r| r.starts_with("ranker(")).collect();
    assert_eq!(ranker_rows.len(), 5);
    assert!(ranker_rows.iter().all(|r| r.contains(",ptrerank,")));
    let saved = ExperimentConfig::from_toml_file(run.join("config.toml")).unwrap();
    assert_eq!(saved, config);
}

#[test]
fn candidates_only_keeps_the_mined_order() {
    let root = tempfile::tempdir().unwrap();
    let config = write_raw(root.path(), &small_spec());
    let prepared = Prepared::<f64>::load_raw(&config).unwrap();
    let embeddings = fit_embeddings(&prepared, &config).unwrap();
    let ctx = Context::new(&prepared, &config, &embeddings).unwrap();
    let reports = ctx.evaluate(&[], &[Method::CandidatesOnly]).unwrap();
    let report = &reports[0].report;
    let candidates = ctx.test_candidates().unwrap();
    for score in &report.per_image {
        let truth = &prepared.corpus.sessions[score.session.0].tags;
        let order = candidates[&score.session].tags();
        assert_eq!(score.dcg, dcg::<f64>(&order, truth));
        assert_eq!(score.dcg_at_k, dcg_at_k::<f64>(&order, truth, 10));
    }
}

#[test]
fn users_without_pairs_are_skipped_not_fatal() {
    let root = tempfile::tempdir().unwrap();
    let mut records = generate::<f64>(&small_spec()).unwrap().records;
    // One user only ever gives a single tag, so the supervised order is empty.
    for r in records.iter_mut().filter(|r| r.user_id == "user002") {
        r.tags.truncate(1);
    }
    let raw = root.path().join("records.jsonl");
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).unwrap());
        text.push('\n');
    }
    fs::write(&raw, text).unwrap();
    let config = ExperimentConfig {
        corpus: raw,
        min_occurrences: 1,
        m: 10,
        mode: ModeKind::SupervisedOnly,
        ..ExperimentConfig::default()
    };
    let run = root.path().join("run");
    cmd_prepare(&config, &run).unwrap();
    let skipped = cmd_train(&config, &run).unwrap();
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0].user, "user002");
    let report = fs::read_to_string(run.join("train_report.csv")).unwrap();
    assert!(report.contains("user002,supervised_only,skipped: no constraints,0"));
    // Evaluation still covers that user's images, in candidate order.
    let reports = cmd_evaluate(&config, &run, &[Method::Ranker, Method::CandidatesOnly], None).unwrap();
    assert_eq!(reports[0].report.per_image.len(), reports[1].report.per_image.len());
}

#[test]
fn missing_artifacts_are_named() {
    let root = tempfile::tempdir().unwrap();
    let config = write_raw(root.path(), &small_spec());
    let run = root.path().join("run");
    match cmd_train(&config, &run) {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with("corpus.jsonl")),
        other => panic!("unexpected {other:?}"),
    }
    cmd_prepare(&config, &run).unwrap();
    let err = cmd_evaluate(&config, &run, &[Method::Ranker], None).unwrap_err();
    assert!(err.to_string().contains("embeddings.txt"), "{err}");
    let missing = ExperimentConfig {
        corpus: root.path().join("absent.jsonl"),
        ..config
    };
    assert!(matches!(cmd_prepare(&missing, &run), Err(Error::MissingArtifact(_))));
}

#[test]
fn rerunning_prepare_and_train_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        n_tags: vec![TagBudget::Limited(10)],
        ..write_raw(root.path(), &small_spec())
    };
    let mut artifacts = Vec::new();
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        cmd_prepare(&config, &dir).unwrap();
        cmd_train(&config, &dir).unwrap();
        let files: Vec<Vec<u8>> = ["corpus.jsonl", "split.csv", "vocabulary.csv", "embeddings.txt", "models_combined_10.txt"]
            .iter()
            .map(|f| fs::read(dir.join(f)).unwrap())
            .collect();
        artifacts.push(files);
    }
    assert_eq!(artifacts[0], artifacts[1]);
}

#[test]
fn dumps_candidates_and_statistics() {
    let root = tempfile::tempdir().unwrap();
    let config = write_raw(root.path(), &small_spec());
    let run = root.path().join("run");
    cmd_prepare(&config, &run).unwrap();
    let mut stats = Vec::new();
    cmd_dump_stats(&config, &run, &mut stats).unwrap();
    let stats = String::from_utf8(stats).unwrap();
    assert!(stats.starts_with("tag,cb,mp,vp\n"));
    let prepared = Prepared::<f64>::read(&run, &config).unwrap();
    assert_eq!(stats.lines().count(), prepared.corpus.vocabulary.len() + 1);
    let mut cands = Vec::new();
    cmd_dump_candidates(&config, &run, "img000_0000", &mut cands).unwrap();
    let cands = String::from_utf8(cands).unwrap();
    assert!(cands.starts_with("rank,tag,score\n"));
    assert!(cands.lines().count() > 1);
    assert!(cmd_dump_candidates(&config, &run, "nope", &mut Vec::new()).is_err());
}

#[test]
fn welch_flag_switches_the_report_test() {
    let root = tempfile::tempdir().unwrap();
    let paired = write_raw(root.path(), &small_spec());
    let welch = ExperimentConfig { welch: true, ..paired.clone() };
    let prepared = Prepared::<f64>::load_raw(&paired).unwrap();
    let embeddings = fit_embeddings(&prepared, &paired).unwrap();
    let methods = [Method::Ranker, Method::PtRerank];
    let a = Context::new(&prepared, &paired, &embeddings).unwrap();
    let b = Context::new(&prepared, &welch, &embeddings).unwrap();
    let training = a.training_candidates().unwrap();
    let variants = [a.train_variant(PairMode::Combined(TagBudget::Limited(10)), &training).unwrap()];
    let ra = a.evaluate(&variants, &methods).unwrap();
    let rb = b.evaluate(&variants, &methods).unwrap();
    let (ta, tb) = (ra[1].test.unwrap(), rb[1].test.unwrap());
    assert_eq!(ta.kind, TestKind::PairedTwoSided);
    assert_eq!(tb.kind, TestKind::WelchTwoSided);
    assert_eq!(ra[1].report.per_image, rb[1].report.per_image);
}
