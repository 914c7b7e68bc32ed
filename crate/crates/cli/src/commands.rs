//! One function per subcommand. Every command that takes a configuration
//! writes `config.resolved.json` into its output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use debias::evaluation::{
    aggregate_profiles, group_labels, null_accuracy, pearson_r, probe_report, reports_to_csv, tsne_embed,
    EvalReport, FeatureMatrix, KnnOptions,
};
use debias::gradcheck::{corrupted_case, registered_cases, run_all, GradCheckConfig};
use debias::models::{Autoencoder, ModelCheckpoint};
use debias::synth::{generate, Confounder, LabeledImageSet};
use debias::training::{self, TrainState, TrainingConfig};
use debias::Tensor;
use rayon::prelude::*;
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

pub const DATASET_FILE: &str = "dataset.dbds";
pub const CHECKPOINT_FILE: &str = "checkpoint.dbck";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESOLVED_FILE: &str = "config.resolved.json";
pub const SWEEP_HEADER: &str = "lambda,moa_accuracy,moa_fc,batch_accuracy,batch_fc";

const ENCODE_CHUNK: usize = 256;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    write(&dir.join(RESOLVED_FILE), cfg.to_json())?;
    Ok(dir)
}

/// The dataset named by `data.path`, or a freshly generated one.
pub fn load_data(cfg: &RunConfig) -> Result<LabeledImageSet, CliError> {
    let data = match &cfg.data.path {
        Some(p) => LabeledImageSet::load(p)
            .map_err(|e| CliError::Data(format!("dataset {}: {}", p.display(), e)))?,
        None => generate(&cfg.data.synth)?,
    };
    if data.is_empty() {
        return Err(CliError::Data("dataset is empty".into()));
    }
    Ok(data)
}

fn histogram(values: impl Iterator<Item = u32>) -> BTreeMap<u32, usize> {
    let mut h = BTreeMap::new();
    for v in values {
        *h.entry(v).or_insert(0) += 1;
    }
    h
}

fn format_histogram(h: &BTreeMap<u32, usize>) -> String {
    h.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(" ")
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let data = generate(&cfg.data.synth)?;
    let dir = prepare_out_dir(cfg)?;
    let path = dir.join(DATASET_FILE);
    data.save(&path)?;
    println!("wrote {} (N={})", path.display(), data.len());
    println!("m histogram: {}", format_histogram(&histogram(data.m_labels.iter().copied())));
    match &data.s_values {
        Confounder::Categorical { values, .. } => {
            println!("s histogram: {}", format_histogram(&histogram(values.iter().copied())));
        }
        Confounder::Continuous(v) => {
            let bins = cfg.data.synth.n_batches as u32;
            let binned = v.iter().map(|&s| ((s as f64 * bins as f64) as u32).min(bins - 1));
            println!("s histogram ({bins} equal bins on [0,1]): {}", format_histogram(&histogram(binned)));
        }
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let (ck, history) = training::train::<f32>(&data, &cfg.train, &cfg.arch)?;
    let dir = prepare_out_dir(cfg)?;
    ck.save(dir.join(CHECKPOINT_FILE))?;
    write(&dir.join(HISTORY_FILE), history.to_csv())?;
    if let Some(last) = history.records.last() {
        println!("epoch {}: l_cae {:.6} l_adv {:.6} e_lambda {:.6}", last.epoch, last.l_cae, last.l_adv, last.e_lambda);
    }
    Ok(())
}

/// Codes for every image, encoded in fixed-size chunks.
pub fn encode_all(cae: &Autoencoder<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>, CliError> {
    let n = images.shape()[0];
    let mut flat = Vec::new();
    let mut d = cae.arch.latent_dim;
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let idx: Vec<usize> = (start..(start + ENCODE_CHUNK).min(n)).collect();
        let z = cae.encode(&images.gather_rows(&idx)?)?;
        d = z.shape()[1];
        flat.extend_from_slice(z.data());
    }
    Ok(Tensor::new(&[n, d], flat)?)
}

fn knn_options(cfg: &RunConfig, data: &LabeledImageSet) -> KnnOptions {
    KnnOptions {
        k: cfg.eval.k,
        standardize: cfg.eval.standardize,
        exclude_groups: (cfg.eval.exclude_same_group && !cfg.eval.aggregate).then(|| data.group_ids.clone()),
    }
}

fn probes(cfg: &RunConfig, cae: &Autoencoder<f32>, data: &LabeledImageSet) -> Result<(EvalReport, Option<EvalReport>), CliError> {
    let codes = FeatureMatrix::from_rows(encode_all(cae, &data.images)?)?;
    let groups = cfg.eval.aggregate.then_some(data.group_ids.as_slice());
    Ok(probe_report(&codes, &data.m_labels, &data.s_values, groups, &knn_options(cfg, data))?)
}

/// Label-only null accuracies matching what the probes see.
fn null_row(cfg: &RunConfig, data: &LabeledImageSet) -> Result<(f64, Option<f64>), CliError> {
    let (m, s) = if cfg.eval.aggregate {
        (
            group_labels(&data.group_ids, &data.m_labels)?,
            data.s_values.categorical().map(|s| group_labels(&data.group_ids, s)).transpose()?,
        )
    } else {
        (data.m_labels.clone(), data.s_values.categorical().map(<[u32]>::to_vec))
    };
    Ok((null_accuracy(&m)?, s.as_deref().map(null_accuracy).transpose()?))
}

fn lambda_dir(out: &Path, lambda: f64) -> PathBuf {
    out.join(format!("lambda_{lambda}"))
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let dir = prepare_out_dir(cfg)?;
    let pre = training::pretrain::<f32>(&data, &cfg.train, &cfg.arch)?;

    // Branches share only the immutable pretrained state.
    let rows: Vec<(f64, EvalReport, Option<EvalReport>)> = cfg
        .sweep
        .par_iter()
        .map(|&lambda| {
            let tc = TrainingConfig { lambda, ..cfg.train.clone() };
            let state: TrainState<f32> = if lambda == 0.0 {
                pre.clone()
            } else {
                training::branch(pre.clone(), &data, &tc)?
            };
            let sub = lambda_dir(dir, lambda);
            fs::create_dir_all(&sub).map_err(|e| CliError::Data(format!("cannot create {}: {e}", sub.display())))?;
            state.checkpoint(&tc).save(sub.join(CHECKPOINT_FILE))?;
            write(&sub.join(HISTORY_FILE), state.history.with_lambda(lambda).to_csv())?;
            let (moa, batch) = probes(cfg, &state.cae, &data)?;
            Ok((lambda, moa, batch))
        })
        .collect::<Result<_, CliError>>()?;

    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = format!("{SWEEP_HEADER}\n");
    for (lambda, moa, batch) in &rows {
        let (acc, fc) = (batch.as_ref().map(|b| b.accuracy), batch.as_ref().map(|b| b.fold_change));
        let _ = writeln!(csv, "{lambda},{},{},{},{}", moa.accuracy, moa.fold_change, opt(acc), opt(fc));
        println!(
            "lambda {lambda}: moa {:.3} ({:.2}x) batch {}",
            moa.accuracy,
            moa.fold_change,
            batch.as_ref().map(|b| format!("{:.3} ({:.2}x)", b.accuracy, b.fold_change)).unwrap_or_else(|| "n/a".into())
        );
    }
    let (moa_null, batch_null) = null_row(cfg, &data)?;
    let batch_fc = batch_null.map(|_| 1.0);
    let _ = writeln!(csv, "null,{moa_null},1,{},{}", opt(batch_null), opt(batch_fc));
    write(&dir.join("sweep.csv"), csv)
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<ModelCheckpoint, CliError> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    ModelCheckpoint::load(&path).map_err(|e| CliError::Data(format!("checkpoint {}: {}", path.display(), e)))
}

/// Mean confounder value per group, in ascending group order.
fn group_means(group_ids: &[u32], values: &[f64]) -> Vec<f64> {
    let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (&g, &v) in group_ids.iter().zip(values) {
        let e = acc.entry(g).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.values().map(|&(s, n)| s / n as f64).collect()
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    let cae: Autoencoder<f32> = ck.autoencoder()?;
    let dir = prepare_out_dir(cfg)?;
    let codes = encode_all(&cae, &data.images)?;
    let fm = FeatureMatrix::from_rows(codes)?;
    let groups = cfg.eval.aggregate.then_some(data.group_ids.as_slice());
    let (moa, batch) = probe_report(&fm, &data.m_labels, &data.s_values, groups, &knn_options(cfg, &data))?;
    let reports: Vec<EvalReport> = std::iter::once(moa).chain(batch).collect();
    for r in &reports {
        println!("{}: accuracy {:.4} null {:.4} fold change {:.3}", r.probe, r.accuracy, r.null_accuracy, r.fold_change);
    }
    write(&dir.join("eval.csv"), reports_to_csv(&reports))?;

    if let Confounder::Continuous(_) = data.s_values {
        let s = data.s_values.as_f64();
        let (features, s) = match groups {
            Some(g) => (aggregate_profiles(&fm, g)?, group_means(g, &s)),
            None => (fm, s),
        };
        let d = features.dim();
        let seed = cfg.train.seed;
        let mut csv = String::from("dim,r,p\n");
        let results: Vec<(f64, f64)> = (0..d)
            .into_par_iter()
            .map(|j| {
                let col: Vec<f64> = (0..features.len()).map(|i| features.row(i)[j] as f64).collect();
                match pearson_r(&col, &s, cfg.eval.permutations, seed.wrapping_add(j as u64)) {
                    Ok(v) => Ok(v),
                    Err(debias::Error::ZeroVariance(_)) => Ok((f64::NAN, f64::NAN)),
                    Err(e) => Err(CliError::from_core(e)),
                }
            })
            .collect::<Result<_, CliError>>()?;
        for (j, (r, p)) in results.iter().enumerate() {
            let _ = writeln!(csv, "{j},{r},{p}");
        }
        write(&dir.join("correlation.csv"), csv)?;
    }
    Ok(())
}

pub fn embed(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    let cae: Autoencoder<f32> = ck.autoencoder()?;
    let dir = prepare_out_dir(cfg)?;
    let fm = FeatureMatrix::new(encode_all(&cae, &data.images)?, (0..data.len() as u32).collect())?;
    let s = data.s_values.as_f64();
    let (features, m, s) = if cfg.eval.aggregate {
        let g = &data.group_ids;
        let s = match data.s_values.categorical() {
            Some(cat) => group_labels(g, cat)?.into_iter().map(f64::from).collect(),
            None => group_means(g, &s),
        };
        (aggregate_profiles(&fm, g)?, group_labels(g, &data.m_labels)?, s)
    } else {
        (fm, data.m_labels.clone(), s)
    };
    let emb = tsne_embed(&features, &cfg.eval.tsne)?;
    let mut csv = String::from("row_id,x,y,m_label,s_value\n");
    for (i, p) in emb.points.iter().enumerate() {
        let _ = writeln!(csv, "{},{},{},{},{}", features.row_ids()[i], p[0], p[1], m[i], s[i]);
    }
    write(&dir.join("embedding.csv"), csv)?;
    let sidecar = json!({
        "final_kl": emb.final_kl,
        "kl_after_exaggeration": emb.kl_after_exaggeration,
        "n": emb.points.len(),
        "aggregate": cfg.eval.aggregate,
        "config": cfg.eval.tsne,
    });
    write(&dir.join("embedding.json"), serde_json::to_string_pretty(&sidecar).expect("json") + "\n")?;
    println!("embedded {} points, final KL {:.4}", emb.points.len(), emb.final_kl);
    Ok(())
}

pub fn gradcheck(seed: u64, inject_fault: bool) -> Result<(), CliError> {
    let gc = GradCheckConfig { seed, ..GradCheckConfig::default() };
    let mut cases = registered_cases::<f64>();
    if inject_fault {
        cases.push(corrupted_case());
    }
    let reports = run_all(&cases, &gc).map_err(|e| CliError::Diagnostic(e.to_string()))?;
    println!("{:<24} {:>7} {:>12} {:>12}  status", "op", "coords", "max_rel", "max_abs");
    for r in &reports {
        println!(
            "{:<24} {:>7} {:>12.3e} {:>12.3e}  {}",
            r.op,
            r.coords,
            r.max_rel_error,
            r.max_abs_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    if failed.is_empty() {
        println!("all {} ops passed", reports.len());
        Ok(())
    } else {
        Err(CliError::Diagnostic(format!("gradient check failed for {}", failed.join(", "))))
    }
}
