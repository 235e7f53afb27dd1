//! Evaluation reports and cross-validation.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::infer::{ensemble_infer, save_model};
use super::synth::{Case, Dataset};
use super::train::{prepare_case, train, EpochLog, TrainingCase};
use crate::error::{Error, Result};
use crate::metrics::{self, CaseScores, Summary};
use crate::net::Network;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub scores: CaseScores,
    pub boxes: Vec<usize>,
}

/// Scores only: wall-clock times go to a separate file so that reports of
/// identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variants: Vec<String>,
    pub config_hash: String,
    pub cases: Vec<CaseReport>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseTiming {
    pub name: String,
    pub loc_seconds: f64,
    pub seg_seconds: f64,
}

/// Score every case with one network or the mean of several.
pub fn evaluate(nets: &[Network], cases: &[Case], cfg: &Config) -> Result<(EvalReport, Vec<CaseTiming>)> {
    let mut reports = Vec::with_capacity(cases.len());
    let mut timings = Vec::with_capacity(cases.len());
    for c in cases {
        let e = ensemble_infer(nets, &c.image, cfg)?;
        reports.push(CaseReport {
            name: c.name.clone(),
            scores: metrics::score_case(&e.prob, &c.region, c.image.spacing())?,
            boxes: e.members.iter().map(|m| m.boxes.len()).collect(),
        });
        timings.push(CaseTiming {
            name: c.name.clone(),
            loc_seconds: e.members.iter().map(|m| m.loc_seconds).sum(),
            seg_seconds: e.members.iter().map(|m| m.seg_seconds).sum(),
        });
    }
    let scores: Vec<CaseScores> = reports.iter().map(|r| r.scores).collect();
    Ok((
        EvalReport {
            variants: nets.iter().map(|n| n.spec().rf_variant.to_string()).collect(),
            config_hash: cfg.hash(),
            summary: metrics::aggregate(&scores)?,
            cases: reports,
        },
        timings,
    ))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Case indices `(train, held out)`; held-out cases are the last `holdout`.
pub fn holdout_split(n: usize, holdout: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if holdout >= n {
        return Err(Error::Config(format!("holding out {holdout} of {n} cases leaves nothing to train on")));
    }
    Ok(((0..n - holdout).collect(), (n - holdout..n).collect()))
}

/// Split training ids into (fit, validation), validation taken from the end.
pub fn split_validation(ids: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n = ids.len();
    let mut n_val = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n > 1 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    (ids[..n - n_val].to_vec(), ids[n - n_val..].to_vec())
}

/// Fold of each case: position after a seeded shuffle, modulo `k`.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &case) in order.iter().enumerate() {
        fold[case] = pos % k;
    }
    fold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_val_dsc: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

/// Load, prepare and train on dataset cases `fit` (checkpointing on `val`);
/// writes the model, the step log and the epoch summary under `out`.
pub fn train_on(cfg: &Config, data: &Dataset, fit: &[usize], val: &[usize], out: &Path) -> Result<Network> {
    let spec = cfg.network.spec(cfg.seed);
    let prep = |ids: &[usize]| -> Result<Vec<TrainingCase>> { ids.iter().map(|&i| prepare_case(&data.load(i)?, cfg, &spec)).collect() };
    let (fit_cases, val_cases) = (prep(fit)?, prep(val)?);
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let outcome = train(cfg, &fit_cases, &val_cases, &mut log)?;
    std::io::Write::flush(&mut log)?;
    save_model(&outcome.net, &out.join("model"))?;
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            steps: outcome.steps,
            best_val_dsc: outcome.best_val_dsc,
            epochs: outcome.epochs,
        },
    )?;
    Ok(outcome.net)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub k: usize,
    pub config_hash: String,
    pub folds: Vec<FoldReport>,
    /// Aggregate over every case of every fold.
    pub pooled: Summary,
}

/// k-fold cross-validation; `k = 1` trains and evaluates on everything.
pub fn crossval(cfg: &Config, data: &Dataset, out: &Path) -> Result<CrossvalReport> {
    let k = cfg.crossval.k;
    let n = data.len();
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot split {n} cases into {k} folds")));
    }
    if k == 1 {
        log::warn!("crossval with k = 1 trains and evaluates on the same cases");
    }
    let assignment = fold_assignment(n, k, cfg.seed);
    let names: Vec<String> = data.manifest.cases.iter().map(|c| c.name.clone()).collect();
    let mut folds = Vec::with_capacity(k);
    let mut all_scores = Vec::with_capacity(n);
    let mut all_timings = Vec::new();
    for fold in 0..k {
        let val: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
        let rest: Vec<usize> = if k == 1 { (0..n).collect() } else { (0..n).filter(|&i| assignment[i] != fold).collect() };
        let (fit, stop) = split_validation(&rest, cfg.data.val_fraction);
        let dir = out.join(format!("fold_{fold}"));
        let net = train_on(cfg, data, &fit, &stop, &dir)?;
        let cases: Vec<Case> = val.iter().map(|&i| data.load(i)).collect::<Result<_>>()?;
        let (report, timings) = evaluate(std::slice::from_ref(&net), &cases, cfg)?;
        write_json(&dir.join("report.json"), &report)?;
        all_scores.extend(report.cases.iter().map(|c| c.scores));
        all_timings.extend(timings);
        folds.push(FoldReport {
            fold,
            train_cases: rest.iter().map(|&i| names[i].clone()).collect(),
            val_cases: val.iter().map(|&i| names[i].clone()).collect(),
            summary: report.summary,
        });
    }
    let report = CrossvalReport {
        k,
        config_hash: cfg.hash(),
        folds,
        pooled: metrics::aggregate(&all_scores)?,
    };
    write_json(&out.join("crossval.json"), &report)?;
    write_json(&out.join("timings.json"), &all_timings)?;
    Ok(report)
}
