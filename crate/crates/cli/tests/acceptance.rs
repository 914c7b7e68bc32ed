//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line per
//! criterion and then asserts it. Run with `--nocapture` to see the lines.

use std::f64::consts::SQRT_2;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use debias::evaluation::{
    calibrate_affinities, fold_change, knn_loo_accuracy, null_accuracy, pearson_r, tsne_embed, FeatureMatrix,
    KnnOptions, TsneConfig,
};
use debias::models::{Adversary, ArchConfig, Autoencoder, HeadKind, ModelCheckpoint};
use debias::rng::substream;
use debias::synth::{crop_patches, dog_detect, generate, render_blob, LabeledImageSet, SynthConfig};
use debias::training::{
    adversarial_gradients, adversary_probe, adversary_update, main_update, BatchTarget, ProbeSettings, TrainHistory,
};
use debias::{AdamState, Tensor};
use rand::Rng;

fn report(name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("[{}] {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    pass
}

fn debias(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_debias")).args(args).output().expect("binary runs")
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let out = debias(&["gradcheck"]);
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let column = |i: usize| {
        text.lines()
            .filter_map(|l| l.split_whitespace().nth(i).and_then(|v| v.parse::<f64>().ok()))
            .fold(0.0, f64::max)
    };
    let (rel, abs) = (column(2), column(3));
    let pass = out.status.success() && secs < 60.0;
    assert!(
        report("gradient correctness", pass, format!("exit {:?}, worst relative {rel:.2e}, worst absolute {abs:.2e}, {secs:.1}s (< 60s)", out.status.code())),
        "{text}"
    );
}

/// Exhaustive leave-one-out kNN with the shared tie rule: order neighbours
/// by (squared distance, index); the most votes win, then the class with
/// the nearest member, then the smallest class.
fn oracle_knn(x: &[Vec<f64>], labels: &[u32], k: usize) -> f64 {
    let n = x.len();
    let mut hits = 0;
    for i in 0..n {
        let mut nb: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum(), j))
            .collect();
        nb.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let top = &nb[..k];
        let mut best: Option<(usize, f64, u32)> = None;
        for c in 0..=*labels.iter().max().unwrap() {
            let members: Vec<f64> = top.iter().filter(|p| labels[p.1] == c).map(|p| p.0).collect();
            let Some(&nearest) = members.first() else { continue };
            let better = best.map_or(true, |(v, d, _)| members.len() > v || (members.len() == v && nearest < d));
            if better {
                best = Some((members.len(), nearest, c));
            }
        }
        hits += usize::from(best.unwrap().2 == labels[i]);
    }
    hits as f64 / n as f64
}

#[test]
fn knn_oracle_equivalence() {
    let start = Instant::now();
    let mut mismatches = 0;
    for case in 0..100u64 {
        let mut rng = substream(case, "acceptance/knn", 0);
        let n = rng.random_range(6..=50);
        let d = rng.random_range(1..=8);
        let classes = rng.random_range(1..=5u32);
        let k = rng.random_range(1..=5);
        let grid = case % 2 == 0;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| if grid { rng.random_range(0..3) as f64 } else { rng.random_range(-1.0..1.0) }).collect())
            .collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        let fm = FeatureMatrix::from_rows(Tensor::new(&[n, d], flat).unwrap()).unwrap();
        let got = knn_loo_accuracy(&fm, &labels, &KnnOptions::with_k(k)).unwrap();
        mismatches += usize::from(got != oracle_knn(&x, &labels, k));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 10.0;
    assert!(report("kNN oracle equivalence", pass, format!("{mismatches}/100 mismatches, {secs:.2}s (< 10s)")));
}

#[test]
fn objective_identity_and_freeze_contracts() {
    let data = generate(&SynthConfig { samples: 40, ..SynthConfig::default() }).unwrap();
    let arch = ArchConfig::default();
    let mut cae = Autoencoder::<f32>::init(&arch, &mut substream(0, "init/cae", 0)).unwrap();
    let mut adv = Adversary::<f32>::init(&arch, HeadKind::Categorical { classes: 3 }, &mut substream(0, "init/adv", 0)).unwrap();
    let (mut opt_main, mut opt_adv) = (AdamState::new(Default::default()), AdamState::new(Default::default()));
    let labels: Vec<usize> = data.s_values.categorical().unwrap().iter().map(|&s| s as usize).collect();
    let lambda = 50.0;
    let (mut worst_identity, mut theta_moved, mut w_moved) = (0.0f64, false, false);
    for step in 0..5 {
        let idx: Vec<usize> = (step * 8..step * 8 + 8).collect();
        let x = data.images.gather_rows(&idx).unwrap();
        let t = BatchTarget::Classes(idx.iter().map(|&i| labels[i]).collect());
        let cae_before = cae.clone();
        adversary_update(&cae, &mut adv, &mut opt_adv, &x, &t, 1e-3).unwrap();
        theta_moved |= cae != cae_before;
        let adv_before = adv.clone();
        let l = main_update(&mut cae, &adv, &mut opt_main, &x, &t, 1e-3, lambda).unwrap();
        w_moved |= adv != adv_before;
        worst_identity = worst_identity.max((l.l_cae - lambda * l.l_adv - l.e_lambda).abs());
    }
    let x = data.images.gather_rows(&[0, 1, 2, 3]).unwrap();
    let g = adversarial_gradients(&cae, &adv, &x, &BatchTarget::Classes(labels[..4].to_vec())).unwrap();
    let decoder_grad = cae
        .decoder_named()
        .iter()
        .filter_map(|(name, _)| g.get(name))
        .map(|t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)))
        .fold(0.0, f64::max);
    let encoder_has_grad = cae.encoder_named().iter().any(|(name, _)| g.get(name).is_some());
    let pass = worst_identity <= 1e-6 && !theta_moved && !w_moved && decoder_grad == 0.0 && encoder_has_grad;
    assert!(report(
        "objective identity and freeze contracts",
        pass,
        format!(
            "max |E - (L_cae - λ L_adv)| = {worst_identity:.1e}; θ moved by adversary: {theta_moved}; \
             w moved by main step: {w_moved}; max decoder adversarial grad {decoder_grad}"
        ),
    ));
}

struct SeedRun {
    seed: u64,
    dir: PathBuf,
    /// (λ, moa accuracy, moa fc, batch accuracy, batch fc)
    rows: Vec<(f64, f64, f64, f64, f64)>,
    moa_null: f64,
    batch_null: f64,
}

struct Benchmark {
    runs: Vec<SeedRun>,
    elapsed: Duration,
}

/// The standard benchmark: default configuration (image_size 32, 4
/// classes, 3 batches, ρ = 0.6, gain spread 0.5, 2400 samples, groups of
/// 20, default architecture and training schedule), λ ∈ {0, 1, 50}, seeds
/// 0..3. Run once and shared by the tests that read it.
fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-benchmark");
        let _ = fs::remove_dir_all(&root);
        let start = Instant::now();
        let mut runs = Vec::new();
        for seed in 0..3u64 {
            let dir = root.join(format!("seed{seed}"));
            let args = [
                "sweep".to_string(),
                format!("--data.synth.seed={seed}"),
                format!("--train.seed={seed}"),
                "--sweep=[0,1,50]".into(),
                format!("--out_dir={}", dir.display()),
            ];
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            let out = debias(&args);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            let csv = fs::read_to_string(dir.join("sweep.csv")).unwrap();
            let mut rows = Vec::new();
            let (mut moa_null, mut batch_null) = (0.0, 0.0);
            for line in csv.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                let v = |i: usize| f[i].parse::<f64>().unwrap();
                if f[0] == "null" {
                    (moa_null, batch_null) = (v(1), v(3));
                } else {
                    rows.push((v(0), v(1), v(2), v(3), v(4)));
                }
            }
            runs.push(SeedRun { seed, dir, rows, moa_null, batch_null });
        }
        Benchmark { runs, elapsed: start.elapsed() }
    })
}

fn row(run: &SeedRun, lambda: f64) -> (f64, f64, f64, f64, f64) {
    *run.rows.iter().find(|r| r.0 == lambda).expect("λ row present")
}

#[test]
fn benchmark_runtime() {
    let b = benchmark();
    let mins = b.elapsed.as_secs_f64() / 60.0;
    assert!(report("benchmark sweep runtime", mins < 30.0, format!("{mins:.1} min for 3 seeds (< 30 min)")));
}

#[test]
fn benchmark_before_adversarial_training() {
    let b = benchmark();
    let mut pass = true;
    for run in &b.runs {
        let (_, moa, moa_fc, batch, batch_fc) = row(run, 0.0);
        let ok = batch_fc >= 1.5 && moa_fc >= 2.0;
        pass &= report(
            &format!("λ=0 probes carry both factors (seed {})", run.seed),
            ok,
            format!(
                "moa {moa:.3} / null {:.3} = {moa_fc:.2}x (>= 2); batch {batch:.3} / null {:.3} = {batch_fc:.2}x (>= 1.5)",
                run.moa_null, run.batch_null
            ),
        );
    }
    assert!(pass);
}

#[test]
fn benchmark_invariance_at_lambda_50() {
    let b = benchmark();
    let mut pass = true;
    for run in &b.runs {
        let (_, moa, moa_fc, batch, _) = row(run, 50.0);
        let gap = (batch - run.batch_null) * 100.0;
        let ok = gap.abs() <= 5.0 && moa_fc >= 1.5;
        pass &= report(
            &format!("λ=50 batch probe near null, moa retained (seed {})", run.seed),
            ok,
            format!(
                "batch {batch:.3} vs null {:.3} ({gap:+.1} points, need within ±5); moa {moa:.3} = {moa_fc:.2}x null (>= 1.5)",
                run.batch_null
            ),
        );
    }
    assert!(pass);
}

#[test]
fn benchmark_batch_accuracy_non_increasing() {
    let b = benchmark();
    let mut monotone = 0;
    for run in &b.runs {
        let a: Vec<f64> = [0.0, 1.0, 50.0].iter().map(|&l| row(run, l).3).collect();
        let ok = a[1] <= a[0] && a[2] <= a[1];
        monotone += usize::from(ok);
        println!("  seed {}: batch accuracy λ=0 {:.3}, λ=1 {:.3}, λ=50 {:.3} -> {}", run.seed, a[0], a[1], a[2], if ok { "non-increasing" } else { "increases" });
    }
    assert!(report("batch accuracy non-increasing across λ", monotone >= 2, format!("{monotone}/3 seeds (need >= 2)")));
}

#[test]
fn benchmark_retrained_adversary_on_held_out_data() {
    let b = benchmark();
    let mut pass = true;
    for run in &b.runs {
        let cfg = SynthConfig { samples: 3600, seed: run.seed, ..SynthConfig::default() };
        let all = generate(&cfg).unwrap();
        let train_set = all.subset(&(0..2400).collect::<Vec<_>>()).unwrap();
        let test_set = all.subset(&(2400..3600).collect::<Vec<_>>()).unwrap();
        let ck = ModelCheckpoint::load(run.dir.join("lambda_50").join("checkpoint.dbck")).unwrap();
        let cae: Autoencoder<f32> = ck.autoencoder().unwrap();
        let acc = adversary_probe(&cae, &train_set, &test_set, &ProbeSettings { seed: run.seed, ..Default::default() }).unwrap();
        let null = null_accuracy(test_set.s_values.categorical().unwrap()).unwrap();
        let gap = (acc - null) * 100.0;
        pass &= report(
            &format!("λ=50 retrained adversary on held-out data (seed {})", run.seed),
            gap.abs() <= 5.0,
            format!("accuracy {acc:.3} vs null {null:.3} ({gap:+.1} points, need within ±5)"),
        );
    }
    assert!(pass);
}

#[test]
fn cae_learning() {
    let b = benchmark();
    let mut pass = true;
    for run in &b.runs {
        let h = TrainHistory::from_csv(&fs::read_to_string(run.dir.join("lambda_0").join("history.csv")).unwrap()).unwrap();
        let (first, last) = (h.records[0].l_cae, h.records.last().unwrap().l_cae);
        pass &= report(
            &format!("λ=0 reconstruction MSE drop (seed {})", run.seed),
            first / last >= 5.0,
            format!("epoch 1 {first:.5} -> epoch {} {last:.5}: {:.1}x (>= 5)", h.len(), first / last),
        );
    }

    let data = generate(&SynthConfig { samples: 4, ..SynthConfig::default() }).unwrap();
    let arch = ArchConfig::default();
    let mut cae = Autoencoder::<f32>::init(&arch, &mut substream(0, "init/cae", 0)).unwrap();
    let adv = Adversary::<f32>::init(&arch, HeadKind::Categorical { classes: 3 }, &mut substream(0, "init/adv", 0)).unwrap();
    let mut opt = AdamState::new(Default::default());
    let t = BatchTarget::Classes(vec![0; 4]);
    let mut reached = None;
    for step in 1..=500 {
        if main_update(&mut cae, &adv, &mut opt, &data.images, &t, 1e-3, 0.0).unwrap().l_cae < 0.01 {
            reached = Some(step);
            break;
        }
    }
    pass &= report(
        "overfit one batch",
        reached.is_some(),
        reached.map_or("MSE stayed >= 0.01 for 500 steps".into(), |s| format!("MSE < 0.01 after {s} steps (<= 500)")),
    );
    assert!(pass);
}

#[test]
fn dog_pipeline() {
    let sigma = 2.0;
    let mut good = 0;
    for i in 0..50u64 {
        let mut rng = substream(i, "acceptance/blob", 0);
        let (r, c) = (rng.random_range(8.0..40.0), rng.random_range(8.0..40.0));
        let img = render_blob(48, 48, &[(r, c)], sigma);
        let d = dog_detect(&img, sigma / SQRT_2, sigma * SQRT_2, 0.01).unwrap();
        good += usize::from(d.len() == 1 && (d[0].row - r).abs() <= 1.0 && (d[0].col - c).abs() <= 1.0);
    }
    let field = Tensor::<f32>::zeros(&[3, 16, 16]);
    let corners = [(0.0, 0.0), (0.0, 15.0), (15.0, 0.0), (15.0, 15.0), (4.0, 4.0), (12.0, 12.0), (3.4, 12.4)];
    let kept = crop_patches(&field, &corners, 8).unwrap().kept;
    let crop_ok = kept == vec![4, 5];
    let pass = report("DoG single-blob detection", good >= 48, format!("{good}/50 exact single detections within 1 px (>= 48)"))
        & report("crop boundary rule", crop_ok, format!("kept {kept:?} of corner/interior centres, expected [4, 5]"));
    assert!(pass);
}

#[test]
fn tsne_sanity() {
    let mut pass = true;
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let mut rng = substream(seed, "acceptance/tsne", 0);
        let (n, d) = (40, 10);
        let flat: Vec<f64> = (0..n * d)
            .map(|i| if i / d < n / 2 { 0.0 } else { 5.0 } + rng.random_range(-1.0..1.0))
            .collect();
        let fm = FeatureMatrix::from_rows(Tensor::new(&[n, d], flat).unwrap()).unwrap();
        let perplexity = 8.0;
        let aff = calibrate_affinities(&fm, perplexity).unwrap();
        worst = aff.entropies.iter().map(|h| (h - perplexity.log2()).abs()).fold(worst, f64::max);
        let emb = tsne_embed(&fm, &TsneConfig { perplexity, seed, ..TsneConfig::default() }).unwrap();
        let agreement = two_means_agreement(&emb.points, n / 2);
        pass &= report(
            &format!("t-SNE two-cluster recovery (seed {seed})"),
            agreement >= 0.9,
            format!("{:.0}% agreement under 2-means (>= 90%)", agreement * 100.0),
        );
    }
    pass &= report("perplexity calibration", worst <= 1e-4, format!("max |H - log2 perplexity| = {worst:.1e} bits (<= 1e-4)"));
    assert!(pass);
}

/// Lloyd's 2-means seeded from the farthest pair; agreement with the
/// split "first `half` rows vs the rest", up to label swap.
fn two_means_agreement(p: &[[f64; 2]], half: usize) -> f64 {
    let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let (mut i0, mut j0, mut far) = (0, 1, -1.0);
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            if dist(p[i], p[j]) > far {
                (i0, j0, far) = (i, j, dist(p[i], p[j]));
            }
        }
    }
    let mut centres = [p[i0], p[j0]];
    let mut assign = vec![0usize; p.len()];
    for _ in 0..100 {
        for (a, q) in assign.iter_mut().zip(p) {
            *a = usize::from(dist(*q, centres[1]) < dist(*q, centres[0]));
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let m: Vec<&[f64; 2]> = p.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(q, _)| q).collect();
            if !m.is_empty() {
                *centre = [m.iter().map(|q| q[0]).sum::<f64>() / m.len() as f64, m.iter().map(|q| q[1]).sum::<f64>() / m.len() as f64];
            }
        }
    }
    let agree = (0..p.len()).filter(|&i| assign[i] == usize::from(i >= half)).count();
    agree.max(p.len() - agree) as f64 / p.len() as f64
}

#[test]
fn statistics() {
    let table = [(84.783, 15.217, 5.6), (64.130, 31.522, 2.0), (55.435, 15.217, 3.6), (35.870, 31.522, 1.1)];
    let mut pass = true;
    for (acc, null, printed) in table {
        let fc = fold_change(acc / 100.0, null / 100.0).unwrap();
        let rounded = (fc * 10.0).round() / 10.0;
        pass &= report(&format!("fold change {acc}/{null}"), rounded == printed, format!("{fc:.4} -> {rounded} (printed {printed})"));
    }
    let x = [1.0, 2.0, 3.0, 4.0];
    let (r_hand, _) = pearson_r(&x, &[1.0, 3.0, 2.0, 4.0], 0, 0).unwrap();
    let (r_up, _) = pearson_r(&x, &x.map(|v| 2.0 * v + 1.0), 0, 0).unwrap();
    let (r_down, _) = pearson_r(&x, &x.map(|v| -v), 0, 0).unwrap();
    pass &= report("pearson r hand case", (r_hand - 0.8).abs() < 1e-12, format!("r = {r_hand} (0.8)"));
    pass &= report(
        "pearson r exact linearity",
        (r_up - 1.0).abs() < 1e-12 && (r_down + 1.0).abs() < 1e-12,
        format!("y = 2x + 1 -> {r_up}, y = -x -> {r_down}"),
    );
    assert!(pass);
}

fn run_all_commands(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let out = format!("--out_dir={}", dir.display());
    for cmd in ["gen-data", "train", "eval", "embed", "sweep"] {
        let args = [
            cmd,
            "--data.synth.samples=200",
            "--train.epochs=3",
            "--train.cae_pretrain_epochs=2",
            "--train.adv_pretrain_steps=20",
            "--eval.tsne.perplexity=2",
            &out,
        ];
        let res = debias(&args);
        assert!(res.status.success(), "{cmd}: {}", String::from_utf8_lossy(&res.stderr));
    }
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn persistence() {
    let data = generate(&SynthConfig { samples: 64, ..SynthConfig::default() }).unwrap();
    let bytes = data.to_bytes().unwrap();
    let back = LabeledImageSet::from_bytes(&bytes).unwrap();
    let dbds_ok = back == data && back.to_bytes().unwrap() == bytes;

    let arch = ArchConfig::default();
    let cae = Autoencoder::<f32>::init(&arch, &mut substream(9, "init/cae", 0)).unwrap();
    let adv = Adversary::<f32>::init(&arch, HeadKind::Continuous, &mut substream(9, "init/adv", 0)).unwrap();
    let ck = ModelCheckpoint::capture(&cae, &adv);
    let ck_bytes = ck.to_bytes().unwrap();
    let ck_back = ModelCheckpoint::from_bytes(&ck_bytes).unwrap();
    let dbck_ok = ck_back.to_bytes().unwrap() == ck_bytes
        && ck_back.autoencoder::<f32>().unwrap() == cae
        && ck_back.adversary::<f32>().unwrap() == adv;

    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let first = run_all_commands(&run);
    fs::remove_dir_all(&run).unwrap();
    let second = run_all_commands(&run);
    let gc_same = debias(&["gradcheck"]).stdout == debias(&["gradcheck"]).stdout;
    let rerun_ok = first == second && gc_same;

    let pass = report("DBDS round trip", dbds_ok, format!("{} bytes, bit-exact", bytes.len()))
        & report("DBCK round trip", dbck_ok, format!("{} bytes, bit-exact", ck_bytes.len()))
        & report(
            "byte-identical CLI reruns",
            rerun_ok,
            format!("{} output files from gen-data/train/eval/embed/sweep, plus gradcheck stdout", first.len()),
        );
    assert!(pass);
}
