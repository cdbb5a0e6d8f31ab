//! Scenario plans, shared model training and result tables.
//!
//! Scenario 1 holds out each site in turn and trains on the others;
//! scenario 2 trains on every site. Single-site models are trained once per
//! seed and reused by Single, Cross and Fused rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use fedrecon_core::metrics::ReportMeta;
use fedrecon_core::model::UNet;
use fedrecon_core::scenario::{train_strategy, Strategy, TrainedModel, TrainedStrategy};
use fedrecon_core::sites::SiteDataset;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// One evaluation: `strategy` trained on `train` (site indices), scored on `test`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Job {
    pub scenario: u8,
    pub strategy: Strategy,
    pub train: Vec<usize>,
    pub test: usize,
}

/// Identifies a trained network independently of the rows that use it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKey {
    Single(usize),
    Mix(Vec<usize>),
    Flmr(Vec<usize>),
    Flmrcm(Vec<usize>, usize),
}

impl Job {
    pub fn model_keys(&self) -> Vec<ModelKey> {
        match self.strategy {
            Strategy::Single | Strategy::Cross | Strategy::Fused => {
                self.train.iter().map(|&s| ModelKey::Single(s)).collect()
            }
            Strategy::Mix => vec![ModelKey::Mix(self.train.clone())],
            Strategy::Flmr => vec![ModelKey::Flmr(self.train.clone())],
            Strategy::Flmrcm => vec![ModelKey::Flmrcm(self.train.clone(), self.test)],
        }
    }
}

/// Rows of the comparison tables for `n_sites` sites.
pub fn plan(scenarios: &[u8], strategies: &[Strategy], n_sites: usize) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &scenario in scenarios {
        for test in 0..n_sites {
            let pool: Vec<usize> = (0..n_sites).filter(|&s| scenario == 2 || s != test).collect();
            for &strategy in strategies {
                let job = |train: Vec<usize>| Job {
                    scenario,
                    strategy,
                    train,
                    test,
                };
                match strategy {
                    Strategy::Single => jobs.push(job(vec![test])),
                    Strategy::Cross => jobs.extend((0..n_sites).filter(|&s| s != test).map(|s| job(vec![s]))),
                    _ if !pool.is_empty() => jobs.push(job(pool.clone())),
                    _ => {}
                }
            }
        }
    }
    jobs
}

/// Ordered source→target pairs with and without cross-site modeling.
pub fn ablation_plan(n_sites: usize) -> Vec<Job> {
    let mut jobs = Vec::new();
    for source in 0..n_sites {
        for test in (0..n_sites).filter(|&t| t != source) {
            for strategy in [Strategy::Cross, Strategy::Flmrcm] {
                jobs.push(Job {
                    scenario: 0,
                    strategy,
                    train: vec![source],
                    test,
                });
            }
        }
    }
    jobs
}

pub struct Models {
    pub trained: BTreeMap<(u64, ModelKey), TrainedStrategy>,
}

impl Models {
    pub fn get(&self, seed: u64, key: &ModelKey) -> &TrainedStrategy {
        &self.trained[&(seed, key.clone())]
    }

    /// The model a job evaluates.
    pub fn for_job(&self, seed: u64, job: &Job) -> TrainedModel {
        let keys = job.model_keys();
        if job.strategy == Strategy::Fused {
            let members = keys.iter().map(|k| self.get(seed, k).model.members()[0].clone()).collect();
            TrainedModel::Ensemble(members)
        } else {
            self.get(seed, &keys[0]).model.clone()
        }
    }
}

fn key_job(key: &ModelKey) -> (Strategy, Vec<usize>, Option<usize>) {
    match key {
        ModelKey::Single(s) => (Strategy::Single, vec![*s], Some(*s)),
        ModelKey::Mix(t) => (Strategy::Mix, t.clone(), None),
        ModelKey::Flmr(t) => (Strategy::Flmr, t.clone(), None),
        ModelKey::Flmrcm(t, target) => (Strategy::Flmrcm, t.clone(), Some(*target)),
    }
}

/// Trains every model `jobs` need for every seed. Runs are independent and
/// each is internally deterministic, so they share one worker pool.
pub fn train_models(cfg: &ExperimentConfig, sites: &[SiteDataset], jobs: &[Job], seeds: &[u64]) -> CliResult<Models> {
    let keys: BTreeSet<ModelKey> = jobs.iter().flat_map(Job::model_keys).collect();
    let work: Vec<(u64, ModelKey)> = seeds
        .iter()
        .flat_map(|&seed| keys.iter().map(move |k| (seed, k.clone())))
        .collect();
    let trained = work
        .into_par_iter()
        .map(|(seed, key)| {
            let (strategy, train, test) = key_job(&key);
            let train_refs: Vec<&SiteDataset> = train.iter().map(|&i| &sites[i]).collect();
            let test_site = &sites[test.unwrap_or(train[0])];
            let out = train_strategy(strategy, &cfg.fl_for_seed(seed), &train_refs, test_site)?;
            Ok(((seed, key), out))
        })
        .collect::<CliResult<BTreeMap<_, _>>>()?;
    Ok(Models { trained })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub scenario: u8,
    pub strategy: Strategy,
    pub train: String,
    pub test: String,
    pub seed: u64,
    pub ssim: f64,
    pub psnr: f64,
}

fn site_label(sites: &[SiteDataset], idx: &[usize]) -> String {
    idx.iter().map(|&i| sites[i].site_id()).collect::<Vec<_>>().join("+")
}

/// Scores every job for every seed.
pub fn evaluate_jobs(
    cfg: &ExperimentConfig,
    sites: &[SiteDataset],
    jobs: &[Job],
    seeds: &[u64],
    models: &Models,
) -> CliResult<Vec<RunRow>> {
    let net = UNet::new(cfg.fl.unet)?;
    let work: Vec<(u64, &Job)> = seeds.iter().flat_map(|&s| jobs.iter().map(move |j| (s, j))).collect();
    work.into_par_iter()
        .map(|(seed, job)| {
            let test = &sites[job.test];
            let meta = ReportMeta {
                strategy: job.strategy.to_string(),
                train_sites: job.train.iter().map(|&i| sites[i].site_id().to_string()).collect(),
                test_site: test.site_id().to_string(),
                seed,
            };
            let report = models.for_job(seed, job).evaluate(&net, &test.test, meta)?;
            Ok(RunRow {
                scenario: job.scenario,
                strategy: job.strategy,
                train: site_label(sites, &job.train),
                test: test.site_id().to_string(),
                seed,
                ssim: report.mean_ssim,
                psnr: report.mean_psnr,
            })
        })
        .collect()
}

/// Seed-averaged row plus the strategy's average over its rows in the
/// same scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: u8,
    pub strategy: Strategy,
    pub train: String,
    pub test: String,
    pub seeds: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub avg_ssim: f64,
    pub avg_psnr: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Groups `rows` (in plan order) over seeds.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(u8, Strategy, String, String)> = Vec::new();
    let mut groups: BTreeMap<(u8, Strategy, String, String), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        let k = (r.scenario, r.strategy, r.train.clone(), r.test.clone());
        let g = groups.entry(k.clone()).or_default();
        if g.is_empty() {
            order.push(k);
        }
        g.push(r);
    }
    let mut out: Vec<SummaryRow> = order
        .iter()
        .map(|k| {
            let g = &groups[k];
            SummaryRow {
                scenario: k.0,
                strategy: k.1,
                train: k.2.clone(),
                test: k.3.clone(),
                seeds: g.len(),
                ssim: mean(g.iter().map(|r| r.ssim)),
                psnr: mean(g.iter().map(|r| r.psnr)),
                avg_ssim: 0.0,
                avg_psnr: 0.0,
            }
        })
        .collect();
    let mut avg: BTreeMap<(u8, Strategy), (f64, f64)> = BTreeMap::new();
    for (scenario, strategy) in out.iter().map(|r| (r.scenario, r.strategy)).collect::<BTreeSet<_>>() {
        let members = out.iter().filter(|r| r.scenario == scenario && r.strategy == strategy);
        let (a, b): (Vec<f64>, Vec<f64>) = members.map(|r| (r.ssim, r.psnr)).unzip();
        avg.insert((scenario, strategy), (mean(a.into_iter()), mean(b.into_iter())));
    }
    for r in &mut out {
        (r.avg_ssim, r.avg_psnr) = avg[&(r.scenario, r.strategy)];
    }
    out
}

pub const RUNS_HEADER: &str = "scenario,strategy,train,test,seed,ssim,psnr";
pub const SUMMARY_HEADER: &str = "scenario,strategy,train,test,seeds,ssim,psnr,avg_ssim,avg_psnr";
pub const ABLATION_HEADER: &str = "source,target,seeds,ssim_without_cm,psnr_without_cm,ssim_with_cm,psnr_with_cm";

fn num(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn runs_csv(cfg: &ExperimentConfig, seeds: &[u64], rows: &[RunRow]) -> String {
    let mut s = csv_preamble(cfg, seeds);
    s.push_str(RUNS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.scenario,
            r.strategy,
            r.train,
            r.test,
            r.seed,
            num(r.ssim),
            num(r.psnr)
        );
    }
    s
}

pub fn summary_csv(cfg: &ExperimentConfig, seeds: &[u64], rows: &[SummaryRow]) -> String {
    let mut s = csv_preamble(cfg, seeds);
    s.push_str(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.strategy,
            r.train,
            r.test,
            r.seeds,
            num(r.ssim),
            num(r.psnr),
            num(r.avg_ssim),
            num(r.avg_psnr)
        );
    }
    s
}

/// One row per ordered source→target pair: Cross vs. FLMRCM with that
/// single source.
pub fn ablation_csv(cfg: &ExperimentConfig, seeds: &[u64], rows: &[RunRow]) -> CliResult<String> {
    let summary = summarize(rows);
    let mut s = csv_preamble(cfg, seeds);
    s.push_str(ABLATION_HEADER);
    s.push('\n');
    for without in summary.iter().filter(|r| r.strategy == Strategy::Cross) {
        let with = summary
            .iter()
            .find(|r| r.strategy == Strategy::Flmrcm && r.train == without.train && r.test == without.test)
            .ok_or_else(|| CliError::Config(format!("missing FLMRCM run for {}→{}", without.train, without.test)))?;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            without.train,
            without.test,
            without.seeds,
            num(without.ssim),
            num(without.psnr),
            num(with.ssim),
            num(with.psnr)
        );
    }
    Ok(s)
}

pub fn csv_preamble(cfg: &ExperimentConfig, seeds: &[u64]) -> String {
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("{}# seeds = {}\n", cfg.to_comment(), seeds.join(","))
}
