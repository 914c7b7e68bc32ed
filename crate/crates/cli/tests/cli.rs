use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn debias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_debias"))
        .args(args)
        .env("DEBIAS_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = debias(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn out_arg(dir: &Path) -> String {
    format!("--out_dir={}", dir.display())
}

const TINY: [&str; 6] = [
    "--data.synth.samples=160",
    "--train.epochs=3",
    "--train.cae_pretrain_epochs=2",
    "--train.adv_pretrain_steps=10",
    "--eval.permutations=200",
    "--eval.tsne.perplexity=2",
];

fn tiny_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    TINY.iter().copied().chain([out]).chain(extra.iter().copied()).collect()
}

/// Relative path and content digest of every file under `dir`.
fn listing(dir: &Path) -> Vec<(String, u64, u64)> {
    let mut files = Vec::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().display().to_string();
        let bytes = fs::read(&entry).unwrap();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        std::hash::Hash::hash(&bytes, &mut h);
        files.push((rel, bytes.len() as u64, std::hash::Hasher::finish(&h)));
    }
    files.sort();
    files
}

/// Runs `commands` twice into the same output directory and returns both
/// listings.
fn twice(root: &Path, commands: &[&[&str]]) -> [Vec<(String, u64, u64)>; 2] {
    let dir = root.join("run");
    let out = out_arg(&dir);
    let mut once = || {
        for args in commands {
            ok(&[*args, &[out.as_str()][..]].concat());
        }
        let l = listing(&dir);
        fs::remove_dir_all(&dir).unwrap();
        l
    };
    [once(), once()]
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn gen_data_writes_requested_size_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let [x, y] = twice(tmp.path(), &[&["gen-data", "--data.synth.samples=1000"]]);
    assert_eq!(x, y);
    let a = tmp.path().join("a");
    let stdout = ok(&["gen-data", "--data.synth.samples=1000", &out_arg(&a)]);
    assert!(stdout.contains("N=1000"), "{stdout}");
    let data = debias::synth::LabeledImageSet::load(a.join("dataset.dbds")).unwrap();
    assert_eq!(data.len(), 1000);
    let echo = data.generator.unwrap();
    assert_eq!(echo["n_classes"], 4);
    assert_eq!(echo["n_batches"], 3);
    assert!(a.join("config.resolved.json").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    assert_eq!(debias(&["gen-data", "--data.synth.samples=0", &out]).status.code(), Some(1));
    assert_eq!(debias(&["gen-data", "--train.bogus=1", &out]).status.code(), Some(1));
    assert_eq!(debias(&["frobnicate"]).status.code(), Some(1));
    let missing = format!("--data.path={}", tmp.path().join("none.dbds").display());
    assert_eq!(debias(&["train", &missing, &out]).status.code(), Some(2));
    assert_eq!(debias(&["gradcheck"]).status.code(), Some(0));
    assert_eq!(debias(&["gradcheck", "--inject-fault"]).status.code(), Some(3));
}

#[test]
fn gradcheck_lists_every_op_once() {
    let stdout = ok(&["gradcheck"]);
    let ops: Vec<String> = debias::gradcheck::registered_cases::<f64>().iter().map(|c| c.op.to_string()).collect();
    for op in &ops {
        let hits = stdout.lines().filter(|l| l.split_whitespace().next() == Some(op)).count();
        assert_eq!(hits, 1, "{op}");
    }
    assert!(stdout.contains(&format!("all {} ops passed", ops.len())));
}

#[test]
fn train_smoke_run_on_64_images() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    ok(&["gen-data", "--data.synth.samples=64", &out_arg(&data_dir)]);
    let path = format!("--data.path={}", data_dir.join("dataset.dbds").display());
    let run = |dir: &Path| {
        ok(&[
            "train",
            &path,
            "--train.epochs=20",
            "--train.cae_pretrain_epochs=20",
            "--train.batch_size=16",
            &out_arg(dir),
        ]);
    };
    let a = tmp.path().join("a");
    run(&a);
    let first = fs::read(a.join("checkpoint.dbck")).unwrap();
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    let h = debias::training::TrainHistory::from_csv(&history).unwrap();
    assert_eq!(h.len(), 20);
    assert!(h.records[19].l_cae < h.records[0].l_cae);
    run(&a);
    assert!(first == fs::read(a.join("checkpoint.dbck")).unwrap(), "checkpoint bytes changed on rerun");
}

#[test]
fn sweep_table_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    ok(&tiny_args(&out, &["sweep"]));
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,moa_accuracy,moa_fc,batch_accuracy,batch_fc");
    assert_eq!(lines.len(), 5);
    let lambdas: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(lambdas, ["0", "1", "50", "null"]);

    let null: Vec<f64> = lines[4].split(',').skip(1).map(|v| v.parse().unwrap()).collect();
    for row in &lines[1..4] {
        let v: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert!((v[2] - v[1] / null[0]).abs() < 1e-6, "{row}");
        assert!((v[4] - v[3] / null[2]).abs() < 1e-6, "{row}");
    }
    // Batch null is the majority batch fraction over groups.
    let data = debias::synth::generate(&debias::synth::SynthConfig { samples: 160, ..Default::default() }).unwrap();
    let groups = debias::evaluation::group_labels(&data.group_ids, data.s_values.categorical().unwrap()).unwrap();
    let mut counts = [0usize; 3];
    for g in &groups {
        counts[*g as usize] += 1;
    }
    assert_eq!(null[2], *counts.iter().max().unwrap() as f64 / groups.len() as f64);
    for l in ["lambda_0", "lambda_1", "lambda_50"] {
        assert!(tmp.path().join(l).join("checkpoint.dbck").exists());
    }
}

#[test]
fn embed_and_eval_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    ok(&tiny_args(&out, &["train"]));
    ok(&tiny_args(&out, &["eval"]));
    ok(&tiny_args(&out, &["embed"]));
    let eval = fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    assert!(eval.starts_with("probe,k,n,accuracy,null,fold_change\nmoa,3,"));
    assert!(eval.contains("\nbatch,3,"));

    let data = debias::synth::generate(&debias::synth::SynthConfig { samples: 160, ..Default::default() }).unwrap();
    let mut groups = data.group_ids.clone();
    groups.sort_unstable();
    groups.dedup();
    let emb = fs::read_to_string(tmp.path().join("embedding.csv")).unwrap();
    assert!(emb.starts_with("row_id,x,y,m_label,s_value\n"));
    assert_eq!(emb.lines().count() - 1, groups.len());
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("embedding.json")).unwrap()).unwrap();
    assert!(sidecar["final_kl"].as_f64().unwrap().is_finite());
    assert_eq!(sidecar["config"]["perplexity"], 2.0);
}

#[test]
fn continuous_confounder_eval_writes_correlations() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    let extra = ["--data.synth.confounder_kind=continuous"];
    ok(&tiny_args(&out, &[&["train"][..], &extra].concat()));
    ok(&tiny_args(&out, &[&["eval"][..], &extra].concat()));
    let eval = fs::read_to_string(tmp.path().join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 2, "{eval}");
    let corr = fs::read_to_string(tmp.path().join("correlation.csv")).unwrap();
    assert!(corr.starts_with("dim,r,p\n"));
    assert_eq!(corr.lines().count(), 1 + 64);
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    ok(&tiny_args(&out, &["train"]));
    let ck = tmp.path().join("checkpoint.dbck");
    let mut bytes = fs::read(&ck).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let res = debias(&tiny_args(&out, &["embed"]));
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("format mismatch"));
}

#[test]
fn every_command_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cmds: Vec<Vec<&str>> = ["gen-data", "train", "eval", "embed", "sweep"]
        .iter()
        .map(|c| [&[*c][..], &TINY[..]].concat())
        .collect();
    let refs: Vec<&[&str]> = cmds.iter().map(Vec::as_slice).collect();
    let [a, b] = twice(tmp.path(), &refs);
    assert!(a.len() >= 12, "{a:?}");
    assert_eq!(a, b);
    assert_eq!(ok(&["gradcheck"]), ok(&["gradcheck"]));
}
