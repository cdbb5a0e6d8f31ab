//! Experiment configuration in flat `section.key = value` form.
//!
//! ```text
//! # comments and blank lines are ignored
//! experiment.sites = A,B,C,D
//! experiment.strategies = Single,Cross,Fused,Mix,FLMR,FLMRCM
//! fl.local_epochs = 2
//! site.C.noise_sigma = 0.02
//! ```
//!
//! Every key has a default; [`ExperimentConfig::to_text`] writes all of them,
//! so a serialized config fully determines a run.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use fedrecon_core::fl::FLConfig;
use fedrecon_core::scenario::Strategy;
use fedrecon_core::sites::{default_profiles, MaskParams, SiteProfile};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Site whose train split is `n_train / small_factor`.
    pub small_site: Option<String>,
    pub small_factor: usize,
    pub mask: MaskParams,
    /// Defaults to `<out>/data`.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_train: 200,
            n_test: 50,
            small_site: Some("C".into()),
            small_factor: 10,
            mask: MaskParams::default(),
            dir: None,
        }
    }
}

/// The single run performed by the `train` command.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub strategy: Strategy,
    pub sites: Vec<String>,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub fl: FLConfig,
    pub data: DataConfig,
    pub sites: Vec<SiteProfile>,
    pub strategies: Vec<Strategy>,
    pub scenarios: Vec<u8>,
    pub out: PathBuf,
    pub seed: u64,
    pub repeats: usize,
    pub train: TrainSpec,
    /// Parameter file read by `export-latents`.
    pub export_model: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fl: FLConfig::default(),
            data: DataConfig::default(),
            sites: default_profiles(),
            strategies: Strategy::ALL.to_vec(),
            scenarios: vec![1, 2],
            out: PathBuf::from("out"),
            seed: 1,
            repeats: 3,
            train: TrainSpec {
                strategy: Strategy::Flmr,
                sites: vec!["A".into(), "B".into(), "C".into()],
                test: "D".into(),
            },
            export_model: None,
        }
    }
}

const SITE_FIELDS: [&str; 6] = [
    "contrast_gamma",
    "bias_field_strength",
    "noise_sigma",
    "structure_scale",
    "lesion_probability",
    "seed",
];

fn parse<T: FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        let mut order = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if entries.insert(k.clone(), v).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            order.push(k);
        }

        let mut cfg = Self::default();
        if let Some(ids) = entries.get("experiment.sites") {
            let defaults = default_profiles();
            cfg.sites = list(ids)
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    defaults
                        .iter()
                        .find(|p| &p.site_id == id)
                        .cloned()
                        .unwrap_or_else(|| SiteProfile::neutral(id, 1000 + i as u64))
                })
                .collect();
        }
        for key in &order {
            let v = entries[key].as_str();
            cfg.apply(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> CliResult<()> {
        let fl = &mut self.fl;
        let d = &mut self.data;
        match key {
            "experiment.sites" => {}
            "experiment.strategies" => {
                self.strategies = list(v).iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
            }
            "experiment.scenarios" => {
                self.scenarios = list(v).iter().map(|s| parse(key, s)).collect::<CliResult<_>>()?;
            }
            "experiment.out" => self.out = PathBuf::from(v),
            "experiment.seed" => self.seed = parse(key, v)?,
            "experiment.repeats" => self.repeats = parse(key, v)?,
            "data.image_size" => d.image_size = parse(key, v)?,
            "data.n_train" => d.n_train = parse(key, v)?,
            "data.n_test" => d.n_test = parse(key, v)?,
            "data.small_site" => d.small_site = (!v.is_empty() && v != "none").then(|| v.to_string()),
            "data.small_factor" => d.small_factor = parse(key, v)?,
            "data.acceleration" => d.mask.acceleration = parse(key, v)?,
            "data.center_fraction" => d.mask.center_fraction = parse(key, v)?,
            "data.dir" => d.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "fl.local_epochs" => fl.local_epochs = parse(key, v)?,
            "fl.global_epochs" => fl.global_epochs = parse(key, v)?,
            "fl.lr1" => fl.lr1 = parse(key, v)?,
            "fl.lr2" => fl.lr2 = parse(key, v)?,
            "fl.lr_switch_fraction" => fl.lr_switch_fraction = parse(key, v)?,
            "fl.batch_size" => fl.batch_size = parse(key, v)?,
            "fl.lambda_adv" => fl.lambda_adv = parse(key, v)?,
            "fl.persist_adam" => fl.persist_adam = parse(key, v)?,
            "fl.weighted_aggregation" => fl.weighted_aggregation = parse(key, v)?,
            "fl.inverted_source_term" => fl.inverted_source_term = parse(key, v)?,
            "fl.identifier_hidden" => fl.identifier_hidden = parse(key, v)?,
            "model.base_channels" => fl.unet.base_channels = parse(key, v)?,
            "model.depth" => fl.unet.depth = parse(key, v)?,
            "train.strategy" => self.train.strategy = v.parse()?,
            "train.sites" => self.train.sites = list(v),
            "train.test" => self.train.test = v.to_string(),
            "export.model" => self.export_model = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => {
                let Some(rest) = key.strip_prefix("site.") else {
                    return Err(CliError::Config(format!("unknown key `{key}`")));
                };
                let (id, field) = rest
                    .rsplit_once('.')
                    .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
                let p = self
                    .sites
                    .iter_mut()
                    .find(|p| p.site_id == id)
                    .ok_or_else(|| CliError::Config(format!("`{key}`: site `{id}` is not in experiment.sites")))?;
                match field {
                    "contrast_gamma" => p.contrast_gamma = parse(key, v)?,
                    "bias_field_strength" => p.bias_field_strength = parse(key, v)?,
                    "noise_sigma" => p.noise_sigma = parse(key, v)?,
                    "structure_scale" => p.structure_scale = parse(key, v)?,
                    "lesion_probability" => p.lesion_probability = parse(key, v)?,
                    "seed" => p.seed = parse(key, v)?,
                    _ => return Err(CliError::Config(format!("unknown site field `{field}`"))),
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let mut probe = self.fl.clone();
        probe.seed = self.seed;
        probe.validate()?;
        self.fl.unet.check_image_size(self.data.image_size)?;
        if self.sites.is_empty() {
            return bad("experiment.sites is empty".into());
        }
        let mut ids = HashSet::new();
        for p in &self.sites {
            p.validate()?;
            if !ids.insert(p.site_id.as_str()) {
                return bad(format!("site `{}` listed twice", p.site_id));
            }
        }
        if self.strategies.is_empty() {
            return bad("experiment.strategies is empty".into());
        }
        if self.scenarios.is_empty() || self.scenarios.iter().any(|s| !matches!(s, 1 | 2)) {
            return bad(format!("experiment.scenarios must list 1 and/or 2, got {:?}", self.scenarios));
        }
        if self.repeats == 0 {
            return bad("experiment.repeats must be ≥ 1".into());
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_test == 0 || d.small_factor == 0 {
            return bad("data.n_train, data.n_test and data.small_factor must be ≥ 1".into());
        }
        if !(d.mask.acceleration >= 1.0 && (0.0..1.0).contains(&d.mask.center_fraction)) {
            return bad("data.acceleration must be ≥ 1 and data.center_fraction in [0, 1)".into());
        }
        for id in self.train.sites.iter().chain([&self.train.test]) {
            if !ids.contains(id.as_str()) {
                return bad(format!("train references unknown site `{id}`"));
            }
        }
        Ok(())
    }

    /// Training-set size of `site_id`.
    pub fn n_train_for(&self, site_id: &str) -> usize {
        match &self.data.small_site {
            Some(s) if s == site_id => (self.data.n_train / self.data.small_factor).max(1),
            _ => self.data.n_train,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    /// `seed, seed+1, …` for `repeats` runs.
    pub fn default_seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|i| self.seed + i).collect()
    }

    pub fn fl_for_seed(&self, seed: u64) -> FLConfig {
        FLConfig {
            seed,
            ..self.fl.clone()
        }
    }

    /// All keys in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        let ids: Vec<&str> = self.sites.iter().map(|p| p.site_id.as_str()).collect();
        put("experiment.sites", ids.join(","));
        put("experiment.strategies", join(&self.strategies));
        put("experiment.scenarios", join(&self.scenarios));
        put("experiment.out", self.out.display().to_string());
        put("experiment.seed", self.seed.to_string());
        put("experiment.repeats", self.repeats.to_string());
        let d = &self.data;
        put("data.image_size", d.image_size.to_string());
        put("data.n_train", d.n_train.to_string());
        put("data.n_test", d.n_test.to_string());
        put("data.small_site", d.small_site.clone().unwrap_or_else(|| "none".into()));
        put("data.small_factor", d.small_factor.to_string());
        put("data.acceleration", format!("{:?}", d.mask.acceleration));
        put("data.center_fraction", format!("{:?}", d.mask.center_fraction));
        put("data.dir", d.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        let f = &self.fl;
        put("fl.local_epochs", f.local_epochs.to_string());
        put("fl.global_epochs", f.global_epochs.to_string());
        put("fl.lr1", format!("{:?}", f.lr1));
        put("fl.lr2", format!("{:?}", f.lr2));
        put("fl.lr_switch_fraction", format!("{:?}", f.lr_switch_fraction));
        put("fl.batch_size", f.batch_size.to_string());
        put("fl.lambda_adv", format!("{:?}", f.lambda_adv));
        put("fl.persist_adam", f.persist_adam.to_string());
        put("fl.weighted_aggregation", f.weighted_aggregation.to_string());
        put("fl.inverted_source_term", f.inverted_source_term.to_string());
        put("fl.identifier_hidden", f.identifier_hidden.to_string());
        put("model.base_channels", f.unet.base_channels.to_string());
        put("model.depth", f.unet.depth.to_string());
        put("train.strategy", self.train.strategy.to_string());
        put("train.sites", self.train.sites.join(","));
        put("train.test", self.train.test.clone());
        put(
            "export.model",
            self.export_model.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        for p in &self.sites {
            let values = [
                format!("{:?}", p.contrast_gamma),
                format!("{:?}", p.bias_field_strength),
                format!("{:?}", p.noise_sigma),
                format!("{:?}", p.structure_scale),
                format!("{:?}", p.lesion_probability),
                p.seed.to_string(),
            ];
            for (field, v) in SITE_FIELDS.iter().zip(values) {
                put(&format!("site.{}.{field}", p.site_id), v);
            }
        }
        e
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// The config as `# key = value` lines, for CSV headers.
    pub fn to_comment(&self) -> String {
        self.to_text().lines().map(|l| format!("# {l}\n")).collect()
    }

    pub fn to_json_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().collect()
    }
}
