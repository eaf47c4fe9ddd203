use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn treerag(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treerag"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_world(dir: &Path) {
    fs::write(
        dir.join("spec.toml"),
        "seed = 3\nn_entities = 40\nn_questions = 6\nretrieval_noise = 0.2\n",
    )
    .unwrap();
    let out = treerag(&["worldgen", "--spec", "spec.toml", "--out", "world"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_world(dir);
    for f in ["corpus.jsonl", "questions.jsonl", "facts.jsonl", "plans.jsonl", "spec.json"] {
        assert!(dir.join("world").join(f).is_file(), "{f}");
    }
    let steps: [&[&str]; 4] = [
        &["annotate", "--world", "world", "--out", "trees.jsonl"],
        &["extract", "--trees", "trees.jsonl", "--out", "records.jsonl"],
        &["infer", "--world", "world", "--out", "preds.jsonl", "--traces", "traces.jsonl"],
        &["eval", "--pred", "preds.jsonl", "--gold", "world/questions.jsonl", "--report", "report.json"],
    ];
    for args in steps {
        let out = treerag(args, dir);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read_to_string(dir.join("trees.jsonl")).unwrap().lines().count(), 6);
    let header: Value =
        serde_json::from_str(fs::read_to_string(dir.join("records.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["header"]["w"], 1.4);
    let first: Value =
        serde_json::from_str(fs::read_to_string(dir.join("preds.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["trace_path"], "traces.jsonl");
    assert!(dir.join("traces.trees.jsonl").is_file());
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert!(report["em"].as_f64().unwrap() >= 0.0);
    assert!(report["summary"].as_str().unwrap().contains("EM"));
}

#[test]
fn invalid_config_exits_one_and_names_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_world(dir);
    fs::write(dir.join("bad.toml"), "[mcts]\nw = -1.0\n[hbs]\nb2 = 0\n").unwrap();
    let out = treerag(&["infer", "--config", "bad.toml", "--world", "world", "--out", "p.jsonl"], dir);
    assert_eq!(code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mcts.w") && stderr.contains("hbs.b2"), "{stderr}");
}

#[test]
fn usage_and_input_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&treerag(&["infer"], dir)), 1);
    assert_eq!(code(&treerag(&["bogus"], dir)), 1);
    assert_eq!(code(&treerag(&["--help"], dir)), 0);
    // Oracle backends without a world.
    fs::write(dir.join("q.jsonl"), "{\"id\":\"q1\",\"question\":\"who?\",\"gold_answers\":[\"x\"]}\n").unwrap();
    assert_eq!(code(&treerag(&["infer", "--input", "q.jsonl", "--out", "p.jsonl"], dir)), 1);
    assert_eq!(
        code(&treerag(&["eval", "--pred", "missing.jsonl", "--gold", "q.jsonl", "--report", "r.json"], dir)),
        1
    );
}

#[test]
fn unreachable_backend_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    fs::write(
        dir.join("remote.toml"),
        format!(
            "[backend]\nkind = \"remote\"\ngeneration_url = \"http://127.0.0.1:{port}/g\"\n\
             retrieval_url = \"http://127.0.0.1:{port}/r\"\ntimeout_secs = 2\n"
        ),
    )
    .unwrap();
    fs::write(dir.join("q.jsonl"), "{\"id\":\"q1\",\"question\":\"who?\",\"gold_answers\":[\"x\"]}\n").unwrap();
    let out = treerag(&["infer", "--config", "remote.toml", "--input", "q.jsonl", "--out", "p.jsonl"], dir);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    // The failed question is still written, without an answer.
    let line: Value = serde_json::from_str(fs::read_to_string(dir.join("p.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(line["answer"], Value::Null);
}

#[test]
fn sweep_rows_and_reruns_match() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_world(dir);
    fs::write(dir.join("grid.toml"), "b2 = [1, 2, 3, 4, 5]\nnoise = [0.3]\nepsilon = [0.1]\n").unwrap();
    for out_dir in ["a", "b"] {
        let out = treerag(&["sweep", "--sweep", "grid.toml", "--world", "world", "--out", out_dir], dir);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let matrix = fs::read_to_string(dir.join("a/matrix.md")).unwrap();
    assert_eq!(matrix.lines().count(), 2 + 5);
    assert_eq!(matrix, fs::read_to_string(dir.join("b/matrix.md")).unwrap());
    assert_eq!(
        fs::read(dir.join("a/results.json")).unwrap(),
        fs::read(dir.join("b/results.json")).unwrap()
    );
}

#[test]
fn failed_sweep_cell_exits_three_and_keeps_going() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_world(dir);
    fs::write(dir.join("grid.toml"), "b1 = [0, 2]\n").unwrap();
    let out = treerag(&["sweep", "--sweep", "grid.toml", "--world", "world", "--out", "s"], dir);
    assert_eq!(code(&out), 3);
    let results: Value = serde_json::from_str(&fs::read_to_string(dir.join("s/results.json")).unwrap()).unwrap();
    let cells = results.as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells[0]["error"].as_str().unwrap().contains("hbs.b1"));
    assert!(cells[1]["report"]["em"].is_number());
    assert!(fs::read_to_string(dir.join("s/matrix.md")).unwrap().contains("failed"));
}

#[test]
fn scripted_backend_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let q = "Who is the father of the spouse of Ada?";
    fs::write(
        dir.join("q.jsonl"),
        serde_json::json!({"id": "s1", "question": q, "gold_answers": ["Ivo"]}).to_string() + "\n",
    )
    .unwrap();
    let corpus = [
        serde_json::json!({"doc_id": "a", "title": "Ada", "text": "Ada's spouse is Bea."}),
        serde_json::json!({"doc_id": "b", "title": "Bea", "text": "Bea's father is Ivo."}),
        serde_json::json!({"doc_id": "c", "title": "Cy", "text": "Cy's father is Max."}),
    ];
    fs::write(
        dir.join("corpus.jsonl"),
        corpus.iter().map(|d| d.to_string() + "\n").collect::<String>(),
    )
    .unwrap();
    let entries = [
        serde_json::json!({"kind": "policy", "question": q, "step": 0, "sample": 0,
            "text": "**Thought:** Find Ada's spouse.\n**Action:** Search([\"Ada spouse\"])"}),
        serde_json::json!({"kind": "policy", "question": q, "step": 1, "sample": 0,
            "text": "**Thought:** Find Bea's father.\n**Action:** Search([\"Bea father\"])"}),
        serde_json::json!({"kind": "policy", "question": q, "step": 2, "sample": 0,
            "text": "**Thought:** Ivo it is.\n**Action:** Finish(Ivo)"}),
        serde_json::json!({"kind": "queries", "question": q, "step": 0, "sample": 0, "text": "\"spouse of Ada\"])"}),
        serde_json::json!({"kind": "queries", "question": q, "step": 1, "sample": 0, "text": "\"father of Bea\"])"}),
        serde_json::json!({"kind": "judge", "question": q, "step": 0,
            "text": "the value of the thought is ***0.8*** and the value of the search result is ***0.9***"}),
        serde_json::json!({"kind": "judge", "question": q, "step": 1,
            "text": "the value of the thought is ***0.7*** and the value of the search result is ***0.6***"}),
        serde_json::json!({"kind": "judge", "question": q, "step": 2,
            "text": "the value of the thought is ***0.9*** and the value of the search result is ***0.5***"}),
    ];
    fs::write(
        dir.join("script.jsonl"),
        entries.iter().map(|e| e.to_string() + "\n").collect::<String>(),
    )
    .unwrap();
    fs::write(
        dir.join("scripted.toml"),
        "[backend]\nkind = \"scripted\"\nscript = \"script.jsonl\"\n[hbs]\nb1 = 2\nb2 = 2\n",
    )
    .unwrap();
    let common = ["--config", "scripted.toml", "--input", "q.jsonl", "--corpus", "corpus.jsonl"];
    for run in ["1", "2"] {
        let preds = format!("p{run}.jsonl");
        let trees = format!("t{run}.jsonl");
        let infer = treerag(&[&["infer"][..], &common, &["--out", &preds]].concat(), dir);
        assert_eq!(code(&infer), 0, "{}", String::from_utf8_lossy(&infer.stderr));
        let annotate = treerag(&[&["annotate"][..], &common, &["--out", &trees]].concat(), dir);
        assert_eq!(code(&annotate), 0, "{}", String::from_utf8_lossy(&annotate.stderr));
    }
    let pred: Value = serde_json::from_str(fs::read_to_string(dir.join("p1.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(pred["answer"], "Ivo");
    assert_eq!(fs::read(dir.join("p1.jsonl")).unwrap(), fs::read(dir.join("p2.jsonl")).unwrap());
    assert_eq!(fs::read(dir.join("t1.jsonl")).unwrap(), fs::read(dir.join("t2.jsonl")).unwrap());
}
