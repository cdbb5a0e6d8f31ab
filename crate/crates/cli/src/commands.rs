use std::fs;
use std::path::{Path, PathBuf};

use fedrecon_core::autodiff::ParamSet;
use fedrecon_core::fl::write_round_log;
use fedrecon_core::metrics::{write_latents, MetricsReport};
use fedrecon_core::model::UNet;
use fedrecon_core::scenario::{report_meta, train_strategy};
use fedrecon_core::sites::{dataset_path, generate_site, load_dataset, save_dataset, SiteDataset};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::experiment::{ablation_csv, ablation_plan, evaluate_jobs, plan, runs_csv, summarize, summary_csv, train_models};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, contents).map_err(CliError::io(path))
}

/// Generates every configured site into the data directory.
pub fn gen_data(cfg: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let mut paths = Vec::new();
    for p in &cfg.sites {
        let ds = generate_site(p, cfg.n_train_for(&p.site_id), cfg.data.n_test, cfg.data.image_size, cfg.data.mask)?;
        let path = dataset_path(&dir, &p.site_id);
        save_dataset(&ds, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads every configured site, generating missing files if `generate`.
pub fn load_sites(cfg: &ExperimentConfig, generate: bool) -> CliResult<Vec<SiteDataset>> {
    let dir = cfg.data_dir();
    let missing = cfg.sites.iter().any(|p| !dataset_path(&dir, &p.site_id).exists());
    if missing && generate {
        gen_data(cfg)?;
    }
    cfg.sites
        .iter()
        .map(|p| {
            let path = dataset_path(&dir, &p.site_id);
            if !path.exists() {
                return Err(CliError::MissingDataset(path));
            }
            let ds = load_dataset(&path)?;
            if ds.profile != *p || ds.image_size() != cfg.data.image_size {
                return Err(CliError::Config(format!(
                    "{} does not match the configured site (regenerate with gen-data)",
                    path.display()
                )));
            }
            Ok(ds)
        })
        .collect()
}

fn site_index(sites: &[SiteDataset], id: &str) -> CliResult<usize> {
    sites
        .iter()
        .position(|s| s.site_id() == id)
        .ok_or_else(|| CliError::Config(format!("unknown site `{id}`")))
}

#[derive(Serialize)]
struct TrainArtifact<'a> {
    config: std::collections::BTreeMap<String, String>,
    seed: u64,
    report: &'a MetricsReport,
}

/// Runs `train.strategy` once per seed. Each seed writes
/// `train/seed-<n>/{model-<i>.params, report.json, rounds.jsonl, config.txt}`.
pub fn train(cfg: &ExperimentConfig, seeds: &[u64], generate: bool) -> CliResult<Vec<MetricsReport>> {
    let sites = load_sites(cfg, generate)?;
    let train: Vec<&SiteDataset> = cfg
        .train
        .sites
        .iter()
        .map(|id| site_index(&sites, id).map(|i| &sites[i]))
        .collect::<CliResult<_>>()?;
    let test = &sites[site_index(&sites, &cfg.train.test)?];
    let net = UNet::new(cfg.fl.unet)?;
    let mut reports = Vec::new();
    for &seed in seeds {
        let fl = cfg.fl_for_seed(seed);
        let trained = train_strategy(cfg.train.strategy, &fl, &train, test)?;
        let report = trained
            .model
            .evaluate(&net, &test.test, report_meta(cfg.train.strategy, &fl, &train, test))?;
        let dir = cfg.out.join("train").join(format!("seed-{seed}"));
        for (i, p) in trained.model.members().iter().enumerate() {
            write(&dir.join(format!("model-{i}.params")), p.encode())?;
        }
        let config_text = format!("{}# seed = {seed}\n", cfg.to_text());
        write(&dir.join("config.txt"), config_text)?;
        let artifact = TrainArtifact {
            config: cfg.to_json_map(),
            seed,
            report: &report,
        };
        write(&dir.join("report.json"), serde_json::to_string_pretty(&artifact).map_err(fedrecon_core::Error::from)? + "\n")?;
        let mut log = serde_json::to_string(&serde_json::json!({ "config": cfg.to_json_map(), "seed": seed }))
            .map_err(fedrecon_core::Error::from)?;
        log.push('\n');
        let mut body = Vec::new();
        write_round_log(&trained.rounds, &mut body)?;
        log.push_str(&String::from_utf8_lossy(&body));
        write(&dir.join("rounds.jsonl"), log)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Scenario tables: `compare.csv` (seed means) and `compare_runs.csv`.
pub fn compare(cfg: &ExperimentConfig, seeds: &[u64], generate: bool) -> CliResult<PathBuf> {
    let sites = load_sites(cfg, generate)?;
    let jobs = plan(&cfg.scenarios, &cfg.strategies, sites.len());
    if jobs.is_empty() {
        return Err(CliError::Config("no runnable (strategy, scenario) combination".into()));
    }
    let models = train_models(cfg, &sites, &jobs, seeds)?;
    let rows = evaluate_jobs(cfg, &sites, &jobs, seeds, &models)?;
    write(&cfg.out.join("compare_runs.csv"), runs_csv(cfg, seeds, &rows))?;
    let path = cfg.out.join("compare.csv");
    write(&path, summary_csv(cfg, seeds, &summarize(&rows)))?;
    Ok(path)
}

/// Source→target table with and without cross-site modeling.
pub fn ablate_cm(cfg: &ExperimentConfig, seeds: &[u64], generate: bool) -> CliResult<PathBuf> {
    let sites = load_sites(cfg, generate)?;
    if sites.len() < 2 {
        return Err(CliError::Config("ablate-cm needs at least two sites".into()));
    }
    let jobs = ablation_plan(sites.len());
    let models = train_models(cfg, &sites, &jobs, seeds)?;
    let rows = evaluate_jobs(cfg, &sites, &jobs, seeds, &models)?;
    let path = cfg.out.join("ablate_cm.csv");
    write(&path, ablation_csv(cfg, seeds, &rows)?)?;
    Ok(path)
}

/// Writes `latents/<site>.csv` (test split) for the model in `export.model`.
pub fn export_latents(cfg: &ExperimentConfig, generate: bool) -> CliResult<Vec<PathBuf>> {
    let model = cfg
        .export_model
        .as_ref()
        .ok_or_else(|| CliError::Config("export.model is not set".into()))?;
    let bytes = fs::read(model).map_err(CliError::io(model))?;
    let params = ParamSet::decode(&bytes)?;
    let sites = load_sites(cfg, generate)?;
    let net = UNet::new(cfg.fl.unet)?;
    params.check_compatible(&cfg.fl.init_params(&net))?;
    let mut paths = Vec::new();
    for s in &sites {
        let mut out = cfg.to_comment().into_bytes();
        write_latents(&net, &params, &s.test, &mut out)?;
        let path = cfg.out.join("latents").join(format!("{}.csv", s.site_id()));
        write(&path, out)?;
        paths.push(path);
    }
    Ok(paths)
}
