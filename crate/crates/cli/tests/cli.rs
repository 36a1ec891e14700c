use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

use mobal_cli::{subcommands, SERVICE_PARITY};

const SUBCOMMANDS: [&str; 19] = [
    "ingest",
    "segment",
    "dedupe",
    "index",
    "keywords-report",
    "keywords-accept",
    "retrieve",
    "init",
    "seed-import",
    "select",
    "pretag-export",
    "import-annotations",
    "iterate",
    "train",
    "evaluate",
    "iaa",
    "export",
    "serve",
    "synth-corpus",
];

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn json(&self) -> Value {
        serde_json::from_str(&self.stdout).unwrap_or_else(|e| panic!("{e}: {}", self.stdout))
    }
}

fn mobal_env(args: &[&str], env: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mobal"));
    for v in ["MOBAL_PROJECT", "MOBAL_CONFIG", "MOBAL_K", "MOBAL_BETA", "MOBAL_SEED", "MOBAL_PORT"] {
        cmd.env_remove(v);
    }
    cmd.args(args).envs(env.iter().copied());
    let out = cmd.output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn mobal(args: &[&str]) -> Run {
    mobal_env(args, &[])
}

fn ok(args: &[&str]) -> Run {
    let r = mobal(args);
    assert_eq!(r.code, 0, "{args:?}\nstdout: {}\nstderr: {}", r.stdout, r.stderr);
    r
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn every_subcommand_is_present() {
    assert_eq!(subcommands(), SUBCOMMANDS);
    for sub in SUBCOMMANDS {
        let r = mobal(&[sub, "--help"]);
        assert_eq!(r.code, 0, "{sub}");
        assert!(r.stdout.contains("Usage: mobal"), "{sub}");
    }
}

#[test]
fn every_route_has_a_subcommand() {
    let subs = subcommands();
    for (method, path) in mobal_service::ROUTES {
        let route = format!("{method} {path}");
        let (_, sub) =
            SERVICE_PARITY.iter().find(|(r, _)| *r == route).unwrap_or_else(|| panic!("{route} has no subcommand"));
        assert!(subs.iter().any(|s| s == sub), "{sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let r = mobal(&[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("Usage"));
    assert_eq!(mobal(&["dedupe", "--bogus"]).code, 2);
    assert_eq!(mobal(&["frobnicate"]).code, 2);
    assert_eq!(mobal(&["dedupe"]).code, 2);
    assert_eq!(mobal(&["export", "--project", "x", "--format", "xml", "--out", "o"]).code, 2);
}

#[test]
fn validation_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let r = mobal(&["dedupe", "--in", p(&missing), "--out", p(&dir.path().join("pool.jsonl"))]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.starts_with("error:"));
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    assert_eq!(mobal(&["dedupe", "--in", p(&bad), "--out", p(&dir.path().join("pool.jsonl"))]).code, 1);
}

#[test]
fn notes_become_a_deduplicated_pool() {
    let dir = tempfile::tempdir().unwrap();
    let notes = dir.path().join("notes");
    fs::create_dir(&notes).unwrap();
    fs::write(notes.join("a.txt"), "Patient walks with a cane. Patient walks with a cane. She climbs stairs.").unwrap();
    fs::write(notes.join("b.txt"), "she  climbs STAIRS. Needs help with transfers.").unwrap();
    let docs = dir.path().join("docs.jsonl");
    let sents = dir.path().join("s.jsonl");
    let pool = dir.path().join("pool.jsonl");

    let r = ok(&["--json", "ingest", "--in", p(&notes), "--out", p(&docs)]);
    assert_eq!(r.json()["documents"], 2);
    let r = ok(&["--json", "segment", "--in", p(&docs), "--out", p(&sents)]);
    assert_eq!(r.json()["sentences"], 5);
    let r = ok(&["--json", "dedupe", "--in", p(&sents), "--out", p(&pool)]);
    assert_eq!(r.json()["pool"], 3);
    let pool_lines = lines(&pool);
    assert_eq!(pool_lines.len(), 3);
    let stairs = pool_lines.iter().find(|s| s["text"] == "She climbs stairs.").unwrap();
    assert_eq!(stairs["doc_ids"].as_array().unwrap().len(), 2);

    let index = dir.path().join("index.json");
    let r = ok(&["--json", "index", "--pool", p(&pool), "--out", p(&index)]);
    assert_eq!(r.json()["sentences"], 3);
    assert!(index.exists());
}

#[test]
fn keyword_expansion_round() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.jsonl");
    let gold = dir.path().join("gold.jsonl");
    ok(&["synth-corpus", "--sentences", "200", "--out-pool", p(&pool), "--out-gold", p(&gold)]);
    let ks = dir.path().join("keywords.json");
    let r = ok(&["--json", "keywords-accept", "--seed", "--keywords", p(&ks), "--accept", "walk"]);
    assert_eq!(r.json()["version"], 0);
    assert_eq!(r.json()["keywords"], 4);

    let r = ok(&["--json", "keywords-report", "--keywords", p(&ks), "--pool", p(&pool), "--top", "5"]);
    let report = r.json();
    let terms = report["terms"].as_array().unwrap();
    assert_eq!(terms.len(), 5);
    let top = terms[0]["term"].as_str().unwrap().to_string();

    let before = dir.path().join("before.jsonl");
    let r = ok(&["--json", "retrieve", "--keywords", p(&ks), "--pool", p(&pool), "--out", p(&before)]);
    let n_before = r.json()["retrieved"].as_u64().unwrap();
    assert_eq!(n_before, report["retrieved"].as_u64().unwrap());

    // a term missing from the report needs --force
    let r = mobal(&["keywords-accept", "--keywords", p(&ks), "--pool", p(&pool), "--accept", "zzzz"]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    let r = ok(&["--json", "keywords-accept", "--keywords", p(&ks), "--pool", p(&pool), "--accept", &top]);
    assert_eq!(r.json()["version"], 1);
    let after = dir.path().join("after.jsonl");
    let r = ok(&["--json", "retrieve", "--keywords", p(&ks), "--pool", p(&pool), "--out", p(&after)]);
    assert!(r.json()["retrieved"].as_u64().unwrap() >= n_before);
}

fn config_k(project: &Path) -> u64 {
    let cfg: Value = serde_json::from_str(&fs::read_to_string(project.join("config.json")).unwrap()).unwrap();
    cfg["learner"]["k"].as_u64().unwrap()
}

#[test]
fn flag_beats_env_beats_config_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.jsonl");
    let gold = dir.path().join("gold.jsonl");
    ok(&["synth-corpus", "--sentences", "30", "--out-pool", p(&pool), "--out-gold", p(&gold)]);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"learner": {"k": 7}}"#).unwrap();

    // (name, pass --config, MOBAL_K, --k, expected k)
    type Case<'a> = (&'a str, bool, Option<&'a str>, Option<&'a str>, u64);
    let cases: [Case; 4] = [
        ("all", true, Some("9"), Some("11"), 11),
        ("env", true, Some("9"), None, 9),
        ("config", true, None, None, 7),
        ("default", false, None, None, 125),
    ];
    for (name, use_cfg, env_k, flag_k, want) in cases {
        let proj = dir.path().join(name);
        let mut args = vec!["init", "--project", p(&proj), "--pool", p(&pool)];
        if use_cfg {
            args.extend(["--config", p(&cfg)]);
        }
        if let Some(k) = flag_k {
            args.extend(["--k", k]);
        }
        let env: Vec<(&str, &str)> = env_k.map(|k| ("MOBAL_K", k)).into_iter().collect();
        let r = mobal_env(&args, &env);
        assert_eq!(r.code, 0, "{name}: {}", r.stderr);
        assert_eq!(config_k(&proj), want, "{name}");
    }
    // the project directory can also come from the environment
    let proj = dir.path().join("from-env");
    let r = mobal_env(&["init", "--pool", p(&pool)], &[("MOBAL_PROJECT", p(&proj))]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(proj.join("config.json").exists());
}

/// Writes `records` with the annotator and phase fields replaced.
fn relabel(records: &[Value], annotator: &str, phase: &str, out: &Path) {
    let text: String = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r["annotator"] = annotator.into();
            r["phase"] = phase.into();
            r.to_string() + "\n"
        })
        .collect();
    fs::write(out, text).unwrap();
}

#[test]
fn headless_loop_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let (pool, gold, proj) = (d("pool.jsonl"), d("gold.jsonl"), d("project"));
    ok(&["synth-corpus", "--sentences", "300", "--out-pool", p(&pool), "--out-gold", p(&gold)]);
    let cfg = d("cfg.json");
    fs::write(&cfg, r#"{"learner": {"train": {"epochs": 5, "hash_buckets": 4096}}}"#).unwrap();
    ok(&["init", "--config", p(&cfg), "--project", p(&proj), "--pool", p(&pool), "--k", "40", "--etypes", "Action"]);

    let all_gold = lines(&gold);
    let by_id = |id: &str| all_gold.iter().find(|g| g["sentence_id"] == id).unwrap().clone();
    let seed: Vec<Value> = all_gold.iter().take(20).cloned().collect();
    relabel(&seed, "adj", "gold", &d("seed.jsonl"));

    // nothing is trained before the seed batch closes
    assert_eq!(mobal(&["select", "--project", p(&proj), "--out", p(&d("sel0.json"))]).code, 1);
    let r = ok(&["--json", "seed-import", "--project", p(&proj), "--gold", p(&d("seed.jsonl"))]);
    assert_eq!(r.json()["seed"], 20);
    assert_eq!(r.json()["import"]["imported"], 20);

    let r = ok(&["--json", "iterate", "--project", p(&proj)]);
    assert_eq!(r.json()["status"], "ready");
    assert_eq!(r.json()["record"]["iteration"], 1);
    let selected: Vec<String> =
        r.json()["record"]["selected"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    assert_eq!(selected.len(), 40);

    let sel = d("selection.json");
    let r = ok(&["--json", "select", "--project", p(&proj), "--k", "125", "--beta", "1", "--out", p(&sel)]);
    assert_eq!(r.json()["chosen"].as_array().unwrap().len(), 125);
    let sel_file: Value = serde_json::from_str(&fs::read_to_string(&sel).unwrap()).unwrap();
    assert_eq!(sel_file["k"], 125);
    assert_eq!(sel_file["beta"], 1.0);
    assert_eq!(sel_file["ranked"].as_array().unwrap().len(), 300 - 20 - 40);

    let pretags = d("pretags.jsonl");
    ok(&["pretag-export", "--project", p(&proj), "--out", p(&pretags)]);
    let pre = lines(&pretags);
    assert_eq!(pre.len(), 40);
    assert!(pre.iter().all(|a| a["phase"] == "pretag"));
    let payload = d("payload.json");
    ok(&["pretag-export", "--project", p(&proj), "--out", p(&payload), "--annotator", "a"]);
    let payload: Value = serde_json::from_str(&fs::read_to_string(&payload).unwrap()).unwrap();
    assert_eq!(payload["items"].as_array().unwrap().len(), 40);

    // the batch cannot close without gold
    let r = mobal(&["iterate", "--project", p(&proj)]);
    assert_eq!(r.code, 1);

    let batch_gold: Vec<Value> = selected.iter().map(|id| by_id(id)).collect();
    relabel(&batch_gold, "a", "blind", &d("a.jsonl"));
    relabel(&batch_gold, "b", "blind", &d("b.jsonl"));
    relabel(&batch_gold, "adj", "gold", &d("g.jsonl"));
    // gold before the blind passes is refused record by record
    let r =
        mobal(&["--json", "import-annotations", "--project", p(&proj), "--in", p(&d("g.jsonl")), "--phase", "gold"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.json()["imported"], 0);
    for who in ["a", "b"] {
        let f = d(&format!("{who}.jsonl"));
        let r = ok(&["--json", "import-annotations", "--project", p(&proj), "--in", p(&f), "--phase", "blind"]);
        assert_eq!(r.json()["imported"], 40);
    }
    ok(&["import-annotations", "--project", p(&proj), "--in", p(&d("g.jsonl")), "--phase", "gold"]);

    let r = ok(&["--json", "iaa", "--a", p(&d("a.jsonl")), "--b", p(&d("b.jsonl")), "--gold", p(&d("g.jsonl"))]);
    assert!(r.json()["cells"].as_array().unwrap().iter().all(|c| c["score"]["f1"] == 1.0 || c["score"]["tp"] == 0));

    let r = ok(&["--json", "iterate", "--project", p(&proj)]);
    assert_eq!(r.json()["record"]["iteration"], 2);

    let r = ok(&["--json", "evaluate", "--project", p(&proj)]);
    let m = r.json();
    assert_eq!(m["iteration"], 2);
    assert_eq!(m["trace"].as_array().unwrap().len(), 2);
    assert_eq!(m["counts"]["sentences"], 60);
    assert!(m["counts_table"].as_str().unwrap().starts_with("Dataset | Sentences | Act"));

    let out = d("export");
    let r = ok(&["--json", "export", "--project", p(&proj), "--out", p(&out), "--format", "conll", "--folds", "3"]);
    assert_eq!(r.json()["files"].as_array().unwrap().len(), 3);
    let r = ok(&["export", "--project", p(&proj), "--sentence", &selected[0]]);
    let view: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(view["labeled"], true);
    assert_eq!(view["blind"].as_array().unwrap().len(), 2);
    assert_eq!(mobal(&["export", "--project", p(&proj), "--sentence", "nope"]).code, 1);

    // a second writer is refused while the project is held
    let _held = mobal_core::project::Project::open(&proj).unwrap();
    assert_eq!(mobal(&["iterate", "--project", p(&proj)]).code, 1);
}

#[test]
fn train_and_evaluate_standalone() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    ok(&["synth-corpus", "--sentences", "200", "--out-pool", p(&d("pool.jsonl")), "--out-gold", p(&d("gold.jsonl"))]);
    let gold = lines(&d("gold.jsonl"));
    let write = |name: &str, part: &[Value]| {
        fs::write(d(name), part.iter().map(|v| v.to_string() + "\n").collect::<String>()).unwrap();
    };
    write("train.jsonl", &gold[..150]);
    write("test.jsonl", &gold[150..]);
    let r = ok(&[
        "--json",
        "train",
        "--pool",
        p(&d("pool.jsonl")),
        "--gold",
        p(&d("train.jsonl")),
        "--kind",
        "perceptron",
        "--etype",
        "Action",
        "--epochs",
        "10",
        "--out",
        p(&d("model.json")),
    ]);
    assert_eq!(r.json()["train"], 150);
    let r = ok(&[
        "--json",
        "evaluate",
        "--model",
        p(&d("model.json")),
        "--pool",
        p(&d("pool.jsonl")),
        "--gold",
        p(&d("test.jsonl")),
    ]);
    let f1 = r.json()["score"]["f1"].as_f64().unwrap();
    assert!(f1 > 0.5, "{f1}");
    let r = ok(&[
        "--json",
        "evaluate",
        "--pool",
        p(&d("pool.jsonl")),
        "--gold",
        p(&d("gold.jsonl")),
        "--kind",
        "perceptron",
        "--folds",
        "3",
        "--epochs",
        "5",
        "--etypes",
        "Action",
    ]);
    assert_eq!(r.json()["folds"].as_array().unwrap().len(), 3);
    // a model file with a broken body is a validation failure
    fs::write(d("broken.json"), "{}").unwrap();
    let r = mobal(&[
        "evaluate",
        "--model",
        p(&d("broken.json")),
        "--pool",
        p(&d("pool.jsonl")),
        "--gold",
        p(&d("test.jsonl")),
    ]);
    assert_eq!(r.code, 1);
}
