use std::path::Path;
use std::process::{Command, Output};

fn mli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mli")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = mli(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 12] = [
    "--set",
    "corpus.n_per_program=24",
    "--set",
    "corpus.dev_per_program=4",
    "--set",
    "corpus.test_per_program=4",
    "--set",
    "model.d_model=16",
    "--set",
    "model.layers=1",
    "--set",
    "model.heads=2",
];

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    args.extend_from_slice(&TINY);
    args
}

#[test]
fn usage_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(mli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mli(&["generate"]).status.code(), Some(1));
    let o = mli(&["generate", "--out", p(&out), "--set", "paths.programs=[\"/no/such/prog.mli\"]"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/prog.mli"));
    let o = mli(&["train", "--out", p(&out), "--set", "train.epochz=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mli(&["infer", "--out", p(&out), "--set", "paths.checkpoint=\"/no/ckpt\""]);
    assert_eq!(o.status.code(), Some(2));
    assert!(mli(&["--help"]).status.success());
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&with_tiny(vec!["generate", "--out", p(d), "--set", "paths.programs=[\"latent\",\"common_effect\"]"]));
    }
    for f in ["train.mli", "train.idx.jsonl", "test.mli", "dev.idx.jsonl"] {
        let x = std::fs::read(a.join("corpus").join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join("corpus").join(f)).unwrap(), "{f}");
    }
    let counts: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("counts.json")).unwrap()).unwrap();
    assert_eq!(counts["total"], 2 * (24 + 4 + 4));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let n: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_hash"], n["config_hash"]);
    assert_eq!(m["command"], "generate");
}

#[test]
fn augment_writes_parseable_programs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("aug");
    ok(&["augment", "--out", p(&out), "--set", "paths.programs=[\"latent\",\"rosenbrock\"]", "--set", "augment.count=5"]);
    let text = std::fs::read_to_string(out.join("augmented.mli")).unwrap();
    let parsed = mli_core::text::parse_many(&text).unwrap();
    assert_eq!(parsed.len(), 10);
    for p in &parsed {
        assert!(mli_core::ast::validate(&p.program).is_empty());
    }
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = root.join("gen");
    let run = root.join("run");
    ok(&with_tiny(vec!["generate", "--out", p(&gen), "--set", "paths.programs=[\"latent\"]"]));
    let corpus = gen.join("corpus");
    let corpus_set = format!("paths.corpus=\"{}\"", p(&corpus));
    ok(&with_tiny(vec!["train", "--out", p(&run), "--set", &corpus_set, "--set", "train.epochs=1", "--set", "train.warmup_steps=1", "--set", "train.batch_size=8"]));
    for f in ["best.ckpt", "final.ckpt", "train_log.jsonl", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("best.ckpt");
    let ckpt_set = format!("paths.checkpoint=\"{}\"", p(&ckpt));

    let query = root.join("query.mli");
    // the built-in latent program with its first assignment masked
    let latent = mli_core::programs::latent();
    let trace = mli_core::exec::run(&latent, 3, None).unwrap();
    let first = latent.instances(None)[0].0.clone();
    let masks = [first.clone()].into_iter().collect();
    std::fs::write(&query, mli_core::text::render(&latent, &trace, &masks).unwrap()).unwrap();
    let query_set = format!("paths.query=\"{}\"", p(&query));

    let zs = root.join("zs");
    ok(&["infer", "--out", p(&zs), "--set", &ckpt_set, "--set", &query_set]);
    let ft = root.join("ft");
    ok(&["finetune", "--out", p(&ft), "--set", &ckpt_set, "--set", &query_set, "--set", "svi.steps=0"]);
    assert_eq!(std::fs::read(zs.join("posteriors.json")).unwrap(), std::fs::read(ft.join("posteriors.json")).unwrap());
    let post: serde_json::Value = serde_json::from_slice(&std::fs::read(zs.join("posteriors.json")).unwrap()).unwrap();
    assert!(post[0].get(first.to_string()).is_some());

    let ar = root.join("ar");
    ok(&["infer", "--out", p(&ar), "--set", &ckpt_set, "--set", &query_set, "--set", "infer.mode=\"autoregressive\""]);

    let ev = root.join("ev");
    let o = ok(&["eval", "--out", p(&ev), "--set", &ckpt_set, "--set", &corpus_set, "--set", "eval.iw_samples=8"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("log_q\tlatent"));
    assert!(table.contains("var_log_iw\tlatent"));

    for proposal in ["model", "prior"] {
        let mh = root.join(format!("mh-{proposal}"));
        let set = format!("mh.proposal=\"{proposal}\"");
        ok(&["mh", "--out", p(&mh), "--set", &ckpt_set, "--set", &query_set, "--set", &set, "--set", "mh.chains=2", "--set", "mh.steps=40"]);
        let r = std::fs::read_to_string(mh.join("r_hat.tsv")).unwrap();
        assert!(r.lines().count() >= 2);
        assert!(mh.join("samples.tsv").exists());
    }

    let full = root.join("full.mli");
    std::fs::write(&full, mli_core::text::render_trace(&latent, &trace).unwrap()).unwrap();
    let full_set = format!("paths.query=\"{}\"", p(&full));
    let at = root.join("attn");
    ok(&["attn", "--out", p(&at), "--set", &ckpt_set, "--set", &full_set]);
    let h = std::fs::read_to_string(at.join("heatmap.tsv")).unwrap();
    assert_eq!(h.lines().count(), 1 + latent.instances(None).len());

    let rep = root.join("rep");
    let log_set = format!("paths.log=\"{}\"", p(&run.join("train_log.jsonl")));
    let o = ok(&["report", "--out", p(&rep), "--set", &log_set]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("epoch\t"));
}
