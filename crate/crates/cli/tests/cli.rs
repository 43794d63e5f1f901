use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn sdt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdt")).args(args).output().expect("spawn sdt")
}

fn sdt_ok(args: &[&str]) -> Output {
    let out = sdt(args);
    assert!(out.status.success(), "sdt {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    sdt(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small widths, halved dropouts, no holdout and no early stopping: enough
/// to fit a keyword corpus.
const OVERFIT: &str = r#"{"d":16,"p":12,"h":8,"d2":16,"hidden":12,"lr":0.01,
 "dropouts":{"embedding":0.2,"dense":0.2,"attention":0.3,"lstm":0.25},
 "max_epochs":200,"patience":200,"validation_ratio":0.0}"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn keywords(paragraphs: usize, seed: u64) -> Self {
        let dir = TempDir::new().unwrap();
        let n = paragraphs.to_string();
        let s = seed.to_string();
        sdt_ok(&["synth", "keywords", "--paragraphs", &n, "--seed", &s, "--out", p(&dir.path().join("kw"))]);
        fs::write(dir.path().join("overfit.json"), OVERFIT).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn corpus(&self) -> PathBuf {
        self.path("kw/corpus.jsonl")
    }

    fn embeddings(&self) -> PathBuf {
        self.path("kw/embeddings.sdte")
    }

    fn train(&self, out: &str, seed: &str) -> PathBuf {
        let out = self.path(out);
        sdt_ok(&[
            "train", "--task", "discourse", "--corpus", p(&self.corpus()), "--embeddings", p(&self.embeddings()),
            "--config", p(&self.path("overfit.json")), "--seed", seed, "--out", p(&out),
        ]);
        out
    }

    fn eval(&self, model: &Path, extra: &[&str]) -> Value {
        let (report, corpus, embeddings) = (self.path("eval.json"), self.corpus(), self.embeddings());
        let mut args = vec!["eval", "--model", p(model), "--corpus", p(&corpus), "--embeddings", p(&embeddings), "--out", p(&report)];
        args.extend_from_slice(extra);
        sdt_ok(&args);
        json(&report)
    }
}

#[test]
fn missing_inputs_exit_with_io_status() {
    let fx = Fixture::keywords(3, 1);
    let missing = fx.path("absent.jsonl");
    let out = fx.path("m.bin");
    assert_eq!(code(&["train", "--task", "discourse", "--corpus", p(&missing), "--embeddings", p(&fx.embeddings()), "--out", p(&out)]), 2);
    assert_eq!(code(&["train", "--task", "discourse", "--corpus", p(&fx.corpus()), "--embeddings", p(&missing), "--out", p(&out)]), 2);
    assert_eq!(code(&["eval", "--model", p(&missing), "--corpus", p(&fx.corpus()), "--embeddings", p(&fx.embeddings()), "--out", p(&out)]), 2);
    assert!(!out.exists());
}

#[test]
fn invalid_inputs_exit_with_validation_status() {
    let fx = Fixture::keywords(3, 1);
    let (corpus, emb, out) = (fx.corpus(), fx.embeddings(), fx.path("m.bin"));
    assert_eq!(code(&["train", "--task", "claim", "--corpus", p(&corpus), "--embeddings", p(&emb), "--out", p(&out)]), 3);
    fs::write(fx.path("bad.json"), r#"{"d":16,"no_such_field":1}"#).unwrap();
    assert_eq!(code(&["train", "--task", "discourse", "--corpus", p(&corpus), "--embeddings", p(&emb), "--config", p(&fx.path("bad.json")), "--out", p(&out)]), 3);
    fs::write(fx.path("wide.json"), r#"{"d":32}"#).unwrap();
    assert_eq!(code(&["train", "--task", "discourse", "--corpus", p(&corpus), "--embeddings", p(&emb), "--config", p(&fx.path("wide.json")), "--out", p(&out)]), 3);
    fs::write(fx.path("garbled.jsonl"), "{not json\n").unwrap();
    assert_eq!(code(&["split", "--corpus", p(&fx.path("garbled.jsonl")), "--out", p(&fx.path("sp"))]), 3);
    assert_eq!(code(&["train", "--bogus-flag"]), 3);
}

#[test]
fn same_seed_gives_identical_checkpoints_and_manifests_record_inputs() {
    let fx = Fixture::keywords(6, 2);
    fs::write(fx.path("short.json"), r#"{"d":16,"p":12,"h":8,"d2":16,"hidden":12,"max_epochs":3}"#).unwrap();
    let run = |out: &str, seed: &str| {
        let path = fx.path(out);
        sdt_ok(&[
            "train", "--task", "discourse", "--corpus", p(&fx.corpus()), "--embeddings", p(&fx.embeddings()),
            "--config", p(&fx.path("short.json")), "--seed", seed, "--out", p(&path),
        ]);
        path
    };
    let (a, b, c) = (run("a.bin", "5"), run("b.bin", "5"), run("c.bin", "6"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(fs::read(fx.path("a.bin.losses.tsv")).unwrap(), fs::read(fx.path("b.bin.losses.tsv")).unwrap());

    let manifest = json(&fx.path("a.bin.manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["tagger"]["max_epochs"], 3);
    let digest = hex_sha(&fx.corpus());
    assert_eq!(manifest["inputs"][p(&fx.corpus())], Value::String(digest));
    assert_eq!(manifest["outputs"][p(&a)], Value::String(hex_sha(&a)));
    assert!(manifest["wall_time_secs"].as_f64().unwrap() >= 0.0);
    let log = fs::read_to_string(fx.path("a.bin.losses.tsv")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

fn hex_sha(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn trained_checkpoint_fits_its_training_fixture() {
    let fx = Fixture::keywords(20, 7);
    let model = fx.train("m.bin", "11");
    let report = fx.eval(&model, &["--exclude-none"]);
    assert!(report["micro_f1"].as_f64().unwrap() >= 0.99, "{report}");
    for key in ["label_set", "paragraphs", "clauses", "excluding_none", "confusion", "confusion_row_normalized"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert!(report.get("binary_f1").is_none());
    let counts: u64 = report["confusion"]["counts"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(counts, report["clauses"].as_u64().unwrap());

    let compared = fx.eval(&model, &["--compare", p(&model)]);
    let m = &compared["compare"]["mcnemar"];
    assert_eq!((m["b"].as_u64(), m["c"].as_u64(), m["p_value"].as_f64()), (Some(0), Some(0), Some(1.0)));

    let threaded = |n: &str| {
        let out = fx.path(&format!("eval{n}.json"));
        let status = Command::new(env!("CARGO_BIN_EXE_sdt"))
            .env("SDT_THREADS", n)
            .args(["eval", "--model", p(&model), "--corpus", p(&fx.corpus()), "--embeddings", p(&fx.embeddings()), "--out", p(&out)])
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(out).unwrap()
    };
    assert_eq!(threaded("1"), threaded("4"));

    let att = fx.path("att");
    sdt_ok(&["attention", "--model", p(&model), "--corpus", p(&fx.corpus()), "--embeddings", p(&fx.embeddings()), "--out", p(&att)]);
    let first = fs::read_to_string(fx.corpus()).unwrap().lines().nth(1).map(str::to_string).unwrap();
    let para: Value = serde_json::from_str(&first).unwrap();
    let tsv = fs::read_to_string(att.join(format!("00000_{}.tsv", para["id"].as_str().unwrap()))).unwrap();
    let tokens: usize = para["clauses"].as_array().unwrap().iter().map(|c| c["tokens"].as_array().unwrap().len()).sum();
    assert_eq!(tsv.lines().count() - 1, tokens);
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    for line in tsv.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        *sums.entry(cols[0].parse().unwrap()).or_default() += cols[2].parse::<f64>().unwrap();
    }
    assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-9), "{sums:?}");
}

#[test]
fn claim_corpus_reports_binary_f1_and_rejects_discourse_model() {
    let fx = Fixture::keywords(4, 3);
    let claim = fx.path("claim.jsonl");
    sdt_ok(&["synth", "keywords", "--label-set", "claim", "--paragraphs", "6", "--seed", "4", "--out", p(&fx.path("cl"))]);
    fs::copy(fx.path("cl/corpus.jsonl"), &claim).unwrap();
    let emb = fx.path("both.sdte");
    sdt_ok(&["synth", "embeddings", "--corpus", p(&fx.corpus()), p(&claim), "--out", p(&emb)]);
    fs::write(fx.path("tiny.json"), r#"{"d":16,"p":12,"h":8,"d2":16,"hidden":12,"max_epochs":2}"#).unwrap();
    let tiny = fx.path("tiny.json");
    let disc = fx.path("disc.bin");
    sdt_ok(&["train", "--task", "discourse", "--corpus", p(&fx.corpus()), "--embeddings", p(&emb), "--config", p(&tiny), "--out", p(&disc)]);
    let tuned = fx.path("tuned.bin");
    sdt_ok(&["train", "--task", "claim", "--corpus", p(&claim), "--embeddings", p(&emb), "--config", p(&tiny), "--pretrained", p(&disc), "--out", p(&tuned)]);
    let report = fx.path("claim_eval.json");
    sdt_ok(&["eval", "--model", p(&tuned), "--corpus", p(&claim), "--embeddings", p(&emb), "--out", p(&report)]);
    let f1 = json(&report)["binary_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(code(&["eval", "--model", p(&disc), "--corpus", p(&claim), "--embeddings", p(&emb), "--out", p(&report)]), 3);
    assert!(json(&fx.path("tuned.bin.manifest.json"))["inputs"].get(p(&disc)).is_some());
}

#[test]
fn zeroshot_recovers_a_planted_permutation() {
    let fx = Fixture::keywords(120, 100);
    fs::write(fx.path("source.json"), r#"{"d":16,"p":12,"h":8,"d2":16,"hidden":12,"lr":0.01,
      "dropouts":{"embedding":0.2,"dense":0.2,"attention":0.3,"lstm":0.25},"max_epochs":150,"patience":10}"#)
        .unwrap();
    let model = fx.path("src.bin");
    sdt_ok(&[
        "train", "--task", "discourse", "--corpus", p(&fx.corpus()), "--embeddings", p(&fx.embeddings()),
        "--config", p(&fx.path("source.json")), "--seed", "0", "--out", p(&model),
    ]);
    // rotate the label order by one; the cue words stay with the old labels
    let labels = ["goal", "fact", "result", "hypothesis", "method", "problem", "implication", "none"];
    let perm: BTreeMap<&str, &str> = labels.iter().zip(labels.iter().cycle().skip(1)).map(|(a, b)| (*a, *b)).collect();
    let text = fs::read_to_string(fx.corpus()).unwrap();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let mut v: Value = serde_json::from_str(line).unwrap();
        if i > 0 {
            for c in v["clauses"].as_array_mut().unwrap() {
                let l = c["label"].as_str().unwrap();
                c["label"] = Value::String(perm[l].to_string());
            }
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    let target = fx.path("target.jsonl");
    fs::write(&target, out).unwrap();
    let dir = fx.path("zs");
    sdt_ok(&["zeroshot", "--model", p(&model), "--target-train", p(&target), "--target-test", p(&target), "--embeddings", p(&fx.embeddings()), "--out", p(&dir)]);
    let map = json(&dir.join("label_map.json"));
    for (s, t) in &perm {
        assert_eq!(map["mapping"][s], *t, "{map}");
    }
    let report = json(&dir.join("report.json"));
    assert!(report["micro_f1"].as_f64().unwrap() >= 0.95);
    assert_eq!(report["degenerate"], Value::Array(vec![]));
    assert!(dir.join("manifest.json").exists());
}

#[test]
fn fragment_pipeline_tags_help_and_gold_bio_path_runs() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    sdt_ok(&["synth", "fragments", "--paragraphs", "150", "--seed", "21", "--out", p(&d.join("train"))]);
    sdt_ok(&["synth", "fragments", "--paragraphs", "100", "--seed", "22", "--out", p(&d.join("test"))]);
    let (train, test) = (d.join("train/corpus.jsonl"), d.join("test/corpus.jsonl"));
    let score = |mode: &str| {
        let model = d.join(format!("{mode}.txt"));
        sdt_ok(&["fragments", "train", "--corpus", p(&train), mode, "--l2", "1", "--out", p(&model)]);
        let report = d.join(format!("{mode}.json"));
        sdt_ok(&["fragments", "eval", "--model", p(&model), "--corpus", p(&test), mode, "--gold-bio", "--out", p(&report)]);
        json(&report)
    };
    let with = score("--gold-tags");
    let without = score("--no-tags");
    let f = |v: &Value| v["model"]["f1"].as_f64().unwrap();
    assert!(f(&with) >= f(&without), "with {} without {}", f(&with), f(&without));
    let oracle = with["gold_bio"]["f1"].as_f64().unwrap();
    assert!(oracle > 0.8 && oracle < 1.0);

    let plain = d.join("plain.jsonl");
    fs::write(
        &plain,
        "{\"id\":\"p\",\"clauses\":[{\"text\":\"we measured growth\",\"label\":\"method\"},{\"text\":\"it increased\",\"label\":\"result\"}]}\n",
    )
    .unwrap();
    let preds = d.join("preds.jsonl");
    sdt_ok(&["fragments", "predict", "--model", p(&d.join("--gold-tags.txt")), "--corpus", p(&plain), "--gold-tags", "--out", p(&preds)]);
    let rec: Value = serde_json::from_str(fs::read_to_string(&preds).unwrap().trim()).unwrap();
    assert!(rec["clauses"].as_array().unwrap().iter().all(|c| c["codes"] == Value::Array(vec![])));
    assert_eq!(code(&["fragments", "eval", "--model", p(&d.join("--gold-tags.txt")), "--corpus", p(&plain), "--gold-tags", "--out", p(&d.join("x.json"))]), 3);
}

#[test]
fn import_and_split_round_trip() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let tsv = d.join("scidt.tsv");
    fs::write(&tsv, "p1\t0\tWe asked why\tgoal\np1\t1\tCells grew\tresult\np2\t0\tMice were used\tmethod\np3\t0\tIt is known\tfact\n").unwrap();
    let jsonl = d.join("scidt.jsonl");
    sdt_ok(&["import", "--format", "scidt", "--input", p(&tsv), "--out", p(&jsonl)]);
    let text = fs::read_to_string(&jsonl).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("\"we\",\"asked\",\"why\""));
    let split = d.join("split");
    sdt_ok(&["split", "--corpus", p(&jsonl), "--ratio", "0.34", "--seed", "9", "--held-out", "test", "--out", p(&split)]);
    let count = |name: &str| fs::read_to_string(split.join(name)).unwrap().lines().count() - 1;
    assert_eq!((count("train.jsonl"), count("test.jsonl")), (2, 1));
    assert!(fs::read_to_string(split.join("test.jsonl")).unwrap().contains("\"split\":\"test\""));
    assert_eq!(code(&["import", "--format", "rct", "--input", p(&tsv), "--out", p(&d.join("bad.jsonl"))]), 3);
}
