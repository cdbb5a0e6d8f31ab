//! Training strategies compared in the multi-site experiments.
//!
//! | strategy | trains on                         | model                      |
//! |----------|-----------------------------------|----------------------------|
//! | Single   | the test site itself              | one centralized model      |
//! | Cross    | exactly one other site            | one centralized model      |
//! | Fused    | each train site separately        | mean of their outputs      |
//! | Mix      | pooled train sets (no privacy)    | one centralized model      |
//! | FLMR     | train sites, federated            | aggregated global model    |
//! | FLMRCM   | train sites, aligned to test site | aggregated global model    |

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::crosssite::run_flmrcm;
use crate::error::{Error, Result};
use crate::fl::{ordered_mean, run_flmr, train_centralized, ClientLoss, FLConfig, RoundLog};
use crate::metrics::{evaluate, evaluate_with, MetricsReport, ReportMeta};
use crate::model::UNet;
use crate::sites::{stack_batch, SiteDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    Single,
    Cross,
    Fused,
    Mix,
    #[serde(rename = "FLMR")]
    Flmr,
    #[serde(rename = "FLMRCM")]
    Flmrcm,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Single,
        Strategy::Cross,
        Strategy::Fused,
        Strategy::Mix,
        Strategy::Flmr,
        Strategy::Flmrcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Single => "Single",
            Strategy::Cross => "Cross",
            Strategy::Fused => "Fused",
            Strategy::Mix => "Mix",
            Strategy::Flmr => "FLMR",
            Strategy::Flmrcm => "FLMRCM",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.trim().chars().filter(|c| *c != '-').collect::<String>().to_ascii_uppercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().to_ascii_uppercase() == key)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Label of a pooled training set: site ids joined by `+`.
pub fn mix_label(sites: &[&SiteDataset]) -> String {
    sites.iter().map(|s| s.site_id()).collect::<Vec<_>>().join("+")
}

/// Checks that `train_sites` suit `strategy` when testing on `test_site`.
pub fn validate_sites(strategy: Strategy, train_sites: &[&SiteDataset], test_site: &SiteDataset) -> Result<()> {
    let mut ids = HashSet::new();
    if let Some(dup) = train_sites.iter().find(|s| !ids.insert(s.site_id())) {
        return Err(Error::Config(format!("site `{}` listed twice", dup.site_id())));
    }
    let test = test_site.site_id();
    let ok = match strategy {
        Strategy::Single => train_sites.len() == 1 && train_sites[0].site_id() == test,
        Strategy::Cross => train_sites.len() == 1 && train_sites[0].site_id() != test,
        Strategy::Fused | Strategy::Mix | Strategy::Flmr | Strategy::Flmrcm => !train_sites.is_empty(),
    };
    if ok {
        Ok(())
    } else {
        let train: Vec<&str> = train_sites.iter().map(|s| s.site_id()).collect();
        Err(Error::Config(format!("{strategy} cannot train on {train:?} and test on `{test}`")))
    }
}

/// One network or an output-averaging ensemble.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Single(ParamSet),
    Ensemble(Vec<ParamSet>),
}

impl TrainedModel {
    pub fn members(&self) -> &[ParamSet] {
        match self {
            TrainedModel::Single(p) => std::slice::from_ref(p),
            TrainedModel::Ensemble(ps) => ps,
        }
    }

    /// Reconstructs `batch`; ensembles average their members' outputs.
    pub fn predict(&self, net: &UNet, batch: &Tensor) -> Result<Tensor> {
        match self {
            TrainedModel::Single(p) => net.reconstruct(p, batch),
            TrainedModel::Ensemble(ps) => {
                let outs = ps.iter().map(|p| net.reconstruct(p, batch)).collect::<Result<Vec<_>>>()?;
                let first = outs.first().ok_or_else(|| Error::Config("empty ensemble".into()))?;
                let mut column = vec![0.0; outs.len()];
                let data = (0..first.numel())
                    .map(|i| {
                        for (c, o) in column.iter_mut().zip(&outs) {
                            *c = o.data()[i];
                        }
                        ordered_mean(&mut column)
                    })
                    .collect();
                Tensor::new(first.shape().to_vec(), data)
            }
        }
    }

    pub fn evaluate(&self, net: &UNet, samples: &[crate::sites::KSpaceSample], meta: ReportMeta) -> Result<MetricsReport> {
        match self {
            TrainedModel::Single(p) => evaluate(net, p, samples, meta),
            TrainedModel::Ensemble(_) => evaluate_with(samples, meta, |s| {
                let (x, _) = stack_batch(&[s])?;
                self.predict(net, &x)
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedStrategy {
    pub model: TrainedModel,
    pub rounds: Vec<RoundLog>,
}

fn centralized_log(cfg: &FLConfig, label: &str, losses: Vec<f64>) -> Vec<RoundLog> {
    losses
        .into_iter()
        .enumerate()
        .map(|(round, loss)| RoundLog {
            round,
            lr: cfg.lr(round),
            client_losses: vec![ClientLoss {
                site_id: label.to_string(),
                loss,
            }],
            identifier_losses: Vec::new(),
            encoder_losses: Vec::new(),
            messages: 0,
            bytes: 0,
        })
        .collect()
}

/// Centralized training on one site's train split.
pub fn train_single(cfg: &FLConfig, site: &SiteDataset) -> Result<TrainedStrategy> {
    let (params, losses) = train_centralized(cfg, site.site_id(), site.train.clone())?;
    Ok(TrainedStrategy {
        model: TrainedModel::Single(params),
        rounds: centralized_log(cfg, site.site_id(), losses),
    })
}

/// Trains the model `strategy` would evaluate on `test_site`.
pub fn train_strategy(
    strategy: Strategy,
    cfg: &FLConfig,
    train_sites: &[&SiteDataset],
    test_site: &SiteDataset,
) -> Result<TrainedStrategy> {
    validate_sites(strategy, train_sites, test_site)?;
    match strategy {
        Strategy::Single | Strategy::Cross => train_single(cfg, train_sites[0]),
        Strategy::Fused => {
            let mut members = Vec::with_capacity(train_sites.len());
            let mut rounds = Vec::new();
            for s in train_sites {
                let t = train_single(cfg, s)?;
                members.extend(t.model.members().iter().cloned());
                rounds.extend(t.rounds);
            }
            Ok(TrainedStrategy {
                model: TrainedModel::Ensemble(members),
                rounds,
            })
        }
        Strategy::Mix => {
            let label = mix_label(train_sites);
            let pooled = train_sites.iter().flat_map(|s| s.train.iter().cloned()).collect();
            let (params, losses) = train_centralized(cfg, &label, pooled)?;
            Ok(TrainedStrategy {
                model: TrainedModel::Single(params),
                rounds: centralized_log(cfg, &label, losses),
            })
        }
        Strategy::Flmr => {
            let run = run_flmr(cfg, train_sites)?;
            Ok(TrainedStrategy {
                model: TrainedModel::Single(run.global),
                rounds: run.rounds,
            })
        }
        Strategy::Flmrcm => {
            let run = run_flmrcm(cfg, train_sites, test_site)?;
            Ok(TrainedStrategy {
                model: TrainedModel::Single(run.global),
                rounds: run.rounds,
            })
        }
    }
}

pub fn report_meta(strategy: Strategy, cfg: &FLConfig, train_sites: &[&SiteDataset], test_site: &SiteDataset) -> ReportMeta {
    ReportMeta {
        strategy: strategy.name().to_string(),
        train_sites: train_sites.iter().map(|s| s.site_id().to_string()).collect(),
        test_site: test_site.site_id().to_string(),
        seed: cfg.seed,
    }
}

/// Trains per `strategy` and scores the result on `test_site.test`.
pub fn run_scenario(
    strategy: Strategy,
    cfg: &FLConfig,
    train_sites: &[&SiteDataset],
    test_site: &SiteDataset,
) -> Result<MetricsReport> {
    let trained = train_strategy(strategy, cfg, train_sites, test_site)?;
    let net = UNet::new(cfg.unet)?;
    trained
        .model
        .evaluate(&net, &test_site.test, report_meta(strategy, cfg, train_sites, test_site))
}
