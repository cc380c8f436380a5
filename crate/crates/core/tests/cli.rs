use std::fs;
use std::path::Path;

use archscale::cli::run;
use archscale::harness::read_records;

fn exec(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("archscale").chain(args.iter().copied());
    let code = run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn count_vanilla_base() {
    let (code, out) = exec(&["count", "--family", "transformer", "--size", "base"]);
    assert_eq!(code, 0);
    let line = out.lines().find(|l| l.starts_with("params = ")).unwrap();
    let n: f64 = line["params = ".len()..].split_whitespace().next().unwrap().parse().unwrap();
    assert!((n / 223e6 - 1.0).abs() < 0.02, "{n}");

    let (code, json) = exec(&["count", "--family", "glu", "--size", "desk-small", "--json", "--n-enc", "32", "--n-dec", "16"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(json.trim()).unwrap();
    assert_eq!(v["n_enc"], 32);
}

#[test]
fn bad_input_exits_one() {
    assert_eq!(exec(&["count", "--family", "nonsense", "--size", "base"]).0, 1);
    assert_eq!(exec(&["count", "--family", "universal", "--size", "xl"]).0, 1);
    assert_eq!(exec(&["count", "--family", "transformer", "--bogus-flag"]).0, 1);
    assert_eq!(exec(&["fit", "--in", "/definitely/missing.jsonl"]).0, 1);
    assert_eq!(exec(&["--help"]).0, 0);
    assert_eq!(exec(&["--version"]).0, 0);
}

#[test]
fn gradcheck_exit_codes() {
    let (code, out) = exec(&["gradcheck", "--family", "performer", "--tiny"]);
    assert_eq!(code, 0, "{out}");
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["worst_component"].is_string());
    assert_eq!(exec(&["gradcheck", "--family", "performer", "--tiny", "--tolerance", "0"]).0, 2);
}

#[test]
fn ladder_prints_key_value_configs() {
    let (code, out) = exec(&["ladder", "--family", "transformer", "--desk"]);
    assert_eq!(code, 0);
    assert_eq!(out.matches("[desk-").count(), 3);
    assert!(out.contains("d_model = 160") || out.contains("d_model=160"), "{out}");
    let (code, out) = exec(&["ladder", "--family", "transformer", "--protocol", "depth", "--steps", "3"]);
    assert_eq!(code, 0);
    assert!(out.contains("[depth-6]") && out.contains("[depth-24]"), "{out}");
    let (code, out) = exec(&["ladder", "--family", "switch"]);
    assert_eq!(code, 0);
    assert_eq!(out.matches("\n[").count() + usize::from(out.starts_with('[')), 5);
}

#[test]
fn table_fit_pareto_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let slopes = dir.path().join("slopes.csv");
    assert_eq!(exec(&["fit", "--published", "--out", p(&slopes)]).0, 0);
    let text = fs::read_to_string(&slopes).unwrap();
    let row = text.lines().find(|l| l.starts_with("transformer,")).unwrap();
    let alpha: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!((alpha - 0.54).abs() < 0.01);

    let front = dir.path().join("frontier.csv");
    assert_eq!(exec(&["pareto", "--published", "--cost", "flops", "--quality", "U", "--out", p(&front)]).0, 0);
    assert!(fs::read_to_string(&front).unwrap().lines().count() > 1);
    assert_eq!(exec(&["pareto", "--published", "--quality", "quality"]).0, 1);

    let report = dir.path().join("report.md");
    assert_eq!(exec(&["report", "--published", "--out", p(&report)]).0, 0);
    assert!(fs::read_to_string(&report).unwrap().contains("transformer"));
    assert!(dir.path().join("report_scatter.svg").exists());

    // the shipped CSV also loads through --in
    let csv = dir.path().join("t.csv");
    fs::write(&csv, "family,size,params,flops,U,glue,sglue,squad\ntransformer,base,223000000,11.4,-1.75,81,70,85\n").unwrap();
    let (code, out) = exec(&["pareto", "--in", p(&csv), "--out-dir", p(dir.path())]);
    assert_eq!(code, 0);
    assert!(out.contains("transformer-base"), "{out}");
}

#[test]
fn pretrain_finetune_are_deterministic_given_seed() {
    let run_once = |dir: &Path| {
        let corpus = dir.join("corpus.txt");
        fs::write(&corpus, "the cat sat on the mat\nthe dog ran to the park\na bird sang in the tree\n".repeat(20)).unwrap();
        let out = dir.join("out");
        let (code, ckpt) = exec(&[
            "--seed", "5", "pretrain", "--family", "transformer", "--size", "desk-tiny", "--steps", "4", "--batch", "2",
            "--seq-len", "16", "--corpus", p(&corpus), "--out", p(&out),
        ]);
        assert_eq!(code, 0);
        let ckpt = ckpt.trim().to_string();
        let (code, _) = exec(&["--seed", "5", "finetune", "--ckpt", &ckpt, "--steps", "2", "--batch", "2", "--payload-len", "3", "--out", p(&out)]);
        assert_eq!(code, 0);
        let mut recs = read_records(&out.join("results.jsonl")).unwrap();
        recs.iter_mut().for_each(|r| r.steps_per_sec = 0.0);
        recs
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run_once(a.path()), run_once(b.path()));
    assert_eq!(ra.len(), 2);
    assert_eq!(ra, rb);
    assert_eq!(ra[1].finetune_steps, 2);
    assert_eq!(ra[0].run_id, "transformer-desk-tiny-s5");
}

#[test]
fn ladder_pretraining_writes_records_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = exec(&[
        "pretrain", "--family", "mos", "--ladder", "--steps", "2", "--batch", "2", "--seq-len", "16", "--seeds", "0,1",
        "--jobs", "2", "--out", p(dir.path()),
    ]);
    assert_eq!(code, 0, "{out}");
    let recs = read_records(&dir.path().join("results.jsonl")).unwrap();
    assert_eq!(recs.len(), 6);
    assert!(dir.path().join("mos-desk-base-s1.ckpt").exists());
    let (code, _) = exec(&["fit", "--in", p(&dir.path().join("results.jsonl")), "--out", p(&dir.path().join("s.csv"))]);
    assert_eq!(code, 0);
}
