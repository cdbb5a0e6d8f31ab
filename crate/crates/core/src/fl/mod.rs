//! Federated reconstruction training: clients, server aggregation and the
//! global round loop.

mod aggregate;
mod message;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

pub(crate) use aggregate::ordered_mean;
pub use aggregate::{aggregate, aggregate_weighted};
pub use message::{Channel, Message, MessageKind, MessageRecord, Payload, PrivacyAudit};

use crate::autodiff::{adam_step, AdamState, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{UNet, UNetConfig, IDENTIFIER_PREFIX};
use crate::seed;
use crate::sites::{stack_batch, KSpaceSample, SiteDataset};

pub const SERVER_ID: &str = "server";

#[derive(Debug, Clone, PartialEq)]
pub struct FLConfig {
    /// Local epochs per round (P).
    pub local_epochs: usize,
    /// Global rounds (Q).
    pub global_epochs: usize,
    pub lr1: f64,
    pub lr2: f64,
    /// Fraction of rounds trained at `lr1`.
    pub lr_switch_fraction: f64,
    pub batch_size: usize,
    pub lambda_adv: f64,
    pub seed: u64,
    pub persist_adam: bool,
    pub weighted_aggregation: bool,
    pub inverted_source_term: bool,
    pub identifier_hidden: usize,
    pub unet: UNetConfig,
}

impl Default for FLConfig {
    fn default() -> Self {
        Self {
            local_epochs: 2,
            global_epochs: 20,
            lr1: 1e-4,
            lr2: 1e-5,
            lr_switch_fraction: 0.8,
            batch_size: 8,
            lambda_adv: 1.0,
            seed: 1,
            persist_adam: false,
            weighted_aggregation: false,
            inverted_source_term: false,
            identifier_hidden: 16,
            unet: UNetConfig::default(),
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if self.local_epochs == 0 || self.global_epochs == 0 || self.batch_size == 0 {
            return bad("local_epochs, global_epochs and batch_size must be ≥ 1");
        }
        if !(self.lr1 > self.lr2 && self.lr2 > 0.0 && self.lr1.is_finite()) {
            return bad("learning rates must satisfy lr1 > lr2 > 0");
        }
        if !(0.0..=1.0).contains(&self.lr_switch_fraction) {
            return bad("lr_switch_fraction must lie in [0, 1]");
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return bad("lambda_adv must be finite and non-negative");
        }
        if self.identifier_hidden == 0 {
            return bad("identifier_hidden must be ≥ 1");
        }
        self.unet.validate()
    }

    /// Rounds before this index use `lr1`.
    pub fn lr_switch_round(&self) -> usize {
        (self.lr_switch_fraction * self.global_epochs as f64).round() as usize
    }

    pub fn lr(&self, round: usize) -> f64 {
        if round < self.lr_switch_round() {
            self.lr1
        } else {
            self.lr2
        }
    }

    pub fn init_params(&self, net: &UNet) -> ParamSet {
        net.init(&mut seed::rng(self.seed, &[seed::label("init")]))
    }
}

/// One participating institution. Owns its private training samples.
#[derive(Debug)]
pub struct Client {
    index: usize,
    site_id: String,
    data: Vec<KSpaceSample>,
    train_seed: u64,
    params: ParamSet,
    adam: Option<AdamState>,
}

impl Client {
    /// `site_label` keys the shuffling stream, so a client and a centralized
    /// run over the same samples with the same label visit them identically.
    pub fn new(index: usize, site_label: &str, data: Vec<KSpaceSample>, global_seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset(format!("client {site_label} has no training samples")));
        }
        Ok(Self {
            index,
            site_id: site_label.to_string(),
            data,
            train_seed: seed::derive(global_seed, &[seed::label(site_label)]),
            params: ParamSet::new(),
            adam: None,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn num_samples(&self) -> usize {
        self.data.len()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Installs broadcast parameters. Adam moments are reset unless
    /// `persist_adam` is set and the layout is unchanged.
    pub fn deploy(&mut self, params: ParamSet, persist_adam: bool) -> Result<()> {
        let keep = persist_adam && self.adam.is_some() && self.params.check_compatible(&params).is_ok();
        if !keep {
            self.adam = Some(AdamState::new(&params));
        }
        self.params = params;
        Ok(())
    }

    pub fn receive(&mut self, msg: Message, persist_adam: bool) -> Result<()> {
        match (msg.kind, msg.payload) {
            (MessageKind::Deploy, Payload::Params(p)) => self.deploy(p, persist_adam),
            (kind, payload) => Err(Error::Protocol(format!(
                "client {} cannot accept {kind:?} with {} payload",
                self.site_id,
                payload.name()
            ))),
        }
    }

    /// Mini-batch index lists for one local epoch, shuffled by
    /// `(client seed, round, epoch)`.
    pub fn batch_order(&self, round: usize, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        idx.shuffle(&mut seed::rng(self.train_seed, &[round as u64, epoch as u64]));
        idx.chunks(batch_size).map(|c| c.to_vec()).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let refs: Vec<&KSpaceSample> = indices.iter().map(|&i| &self.data[i]).collect();
        stack_batch(&refs)
    }

    /// One reconstruction update on the given batch; returns the loss.
    pub fn recon_step(&mut self, net: &UNet, indices: &[usize], lr: f64) -> Result<f64> {
        let (x, y) = self.batch(indices)?;
        let adam = self
            .adam
            .as_mut()
            .ok_or_else(|| Error::Protocol(format!("client {} trained before deploy", self.site_id)))?;
        recon_step(net, &mut self.params, adam, &x, &y, lr)
    }

    /// `epochs` local epochs; returns the mean mini-batch loss.
    pub fn train_epochs(&mut self, net: &UNet, round: usize, epochs: usize, lr: f64, batch_size: usize) -> Result<f64> {
        let (mut total, mut steps) = (0.0, 0usize);
        for epoch in 0..epochs {
            for batch in self.batch_order(round, epoch, batch_size) {
                total += self.recon_step(net, &batch, lr)?;
                steps += 1;
            }
        }
        Ok(total / steps as f64)
    }
}

/// Mean over the batch of the per-sample L1 distance, with gradients.
pub fn recon_loss(tape: &mut Tape, net: &UNet, p: &crate::autodiff::BoundParams, x: &Tensor, y: &Tensor) -> Result<crate::autodiff::Var> {
    let batch = x.shape()[0] as f64;
    let xv = tape.constant(x.detached());
    let yv = tape.constant(y.detached());
    let (pred, _) = net.forward(tape, p, xv)?;
    let l1 = tape.l1_loss(pred, yv)?;
    tape.scale(l1, 1.0 / batch)
}

/// One Adam step on the reconstruction loss. With `lr = 0` the parameters
/// are left bit-identical.
pub fn recon_step(net: &UNet, params: &mut ParamSet, adam: &mut AdamState, x: &Tensor, y: &Tensor, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = recon_loss(&mut tape, net, &bound, x, y)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    params.accumulate_grads(&bound, &grads)?;
    adam_step(params, adam, lr)?;
    Ok(value)
}

/// Reconstruction loss of `params` on the given samples, without updating.
pub fn mean_recon_loss(net: &UNet, params: &ParamSet, samples: &[KSpaceSample]) -> Result<f64> {
    let refs: Vec<&KSpaceSample> = samples.iter().collect();
    let (x, y) = stack_batch(&refs)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let loss = recon_loss(&mut tape, net, &bound, &x, &y)?;
    Ok(tape.value(loss).item())
}

/// Installs `params_in`, runs `epochs` local epochs and returns the result.
pub fn local_train(
    net: &UNet,
    client: &mut Client,
    params_in: &ParamSet,
    epochs: usize,
    lr: f64,
    round: usize,
    batch_size: usize,
) -> Result<ParamSet> {
    client.deploy(params_in.clone(), false)?;
    client.train_epochs(net, round, epochs, lr, batch_size)?;
    Ok(client.params.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientLoss {
    pub site_id: String,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub lr: f64,
    pub client_losses: Vec<ClientLoss>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub identifier_losses: Vec<ClientLoss>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub encoder_losses: Vec<ClientLoss>,
    pub messages: usize,
    pub bytes: usize,
}

#[derive(Debug)]
pub struct FlRun {
    pub global: ParamSet,
    pub rounds: Vec<RoundLog>,
    pub messages: Vec<MessageRecord>,
    /// Encoded messages, when capture was requested.
    pub captured: Vec<Vec<u8>>,
}

impl FlRun {
    pub fn count(&self, kind: MessageKind) -> usize {
        self.messages.iter().filter(|m| m.kind == kind).count()
    }
}

/// Writes one JSON object per round.
pub fn write_round_log(rounds: &[RoundLog], mut out: impl Write) -> Result<()> {
    for r in rounds {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn save_round_log(rounds: &[RoundLog], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_round_log(rounds, &mut f)?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep the encoded bytes of every message.
    pub capture: bool,
}

/// Validates sites and returns the common image size.
pub(crate) fn check_sites(sites: &[&SiteDataset]) -> Result<usize> {
    let first = sites
        .first()
        .ok_or_else(|| Error::Protocol("at least one site is required".into()))?;
    let mut ids = HashSet::new();
    for s in sites {
        if !ids.insert(s.site_id()) {
            return Err(Error::Protocol(format!("duplicate site `{}`", s.site_id())));
        }
        if s.image_size() != first.image_size() {
            return Err(Error::Protocol("sites disagree on image size".into()));
        }
    }
    Ok(first.image_size())
}

pub(crate) fn audited_channel(sites: &[&SiteDataset], image_size: usize, opts: RunOptions) -> Channel {
    let mut audit = PrivacyAudit::new(image_size);
    for s in sites {
        audit.register(&s.train);
        audit.register(&s.test);
    }
    let channel = Channel::new(audit);
    if opts.capture {
        channel.with_capture()
    } else {
        channel
    }
}

pub(crate) fn broadcast<'a>(
    channel: &mut Channel,
    clients: impl IntoIterator<Item = &'a mut Client>,
    global: &ParamSet,
    round: usize,
    persist: bool,
) -> Result<()> {
    for c in clients {
        let msg = Message::new(MessageKind::Deploy, round, SERVER_ID, c.site_id(), Payload::Params(global.clone()));
        let delivered = channel.transmit(msg)?;
        c.receive(delivered, persist)?;
    }
    Ok(())
}

/// Uploads every client's parameters (in client order) and aggregates them.
pub(crate) fn collect_and_aggregate(channel: &mut Channel, clients: &[&Client], round: usize, cfg: &FLConfig) -> Result<ParamSet> {
    let mut uploads = Vec::with_capacity(clients.len());
    for c in clients {
        let msg = Message::new(MessageKind::Upload, round, c.site_id(), SERVER_ID, Payload::Params(c.params().clone()));
        match channel.transmit(msg)?.payload {
            Payload::Params(p) => uploads.push(p),
            other => return Err(Error::Protocol(format!("upload carried {}", other.name()))),
        }
    }
    let global = if cfg.weighted_aggregation {
        let w: Vec<f64> = clients.iter().map(|c| c.num_samples() as f64).collect();
        aggregate_weighted(&uploads, &w)?
    } else {
        aggregate(&uploads)?
    };
    if let Some(name) = global.names().find(|n| n.starts_with(IDENTIFIER_PREFIX)) {
        return Err(Error::Privacy(format!("identifier entry `{name}` reached the server")));
    }
    Ok(global)
}

pub(crate) fn round_log(round: usize, lr: f64, clients: &[&Client], losses: &[f64], channel: &Channel, since: usize) -> RoundLog {
    let msgs = &channel.log()[since..];
    RoundLog {
        round,
        lr,
        client_losses: clients
            .iter()
            .zip(losses)
            .map(|(c, &loss)| ClientLoss {
                site_id: c.site_id().to_string(),
                loss,
            })
            .collect(),
        identifier_losses: Vec::new(),
        encoder_losses: Vec::new(),
        messages: msgs.len(),
        bytes: msgs.iter().map(|m| m.bytes).sum(),
    }
}

/// Federated training over `sites` (one client each).
pub fn run_flmr(cfg: &FLConfig, sites: &[&SiteDataset]) -> Result<FlRun> {
    run_flmr_with(cfg, sites, RunOptions::default())
}

pub fn run_flmr_with(cfg: &FLConfig, sites: &[&SiteDataset], opts: RunOptions) -> Result<FlRun> {
    cfg.validate()?;
    let size = check_sites(sites)?;
    let net = UNet::new(cfg.unet)?;
    cfg.unet.check_image_size(size)?;
    let mut channel = audited_channel(sites, size, opts);
    let mut clients = sites
        .iter()
        .enumerate()
        .map(|(k, s)| Client::new(k, s.site_id(), s.train.clone(), cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut global = cfg.init_params(&net);
    let mut rounds = Vec::with_capacity(cfg.global_epochs);
    for round in 0..cfg.global_epochs {
        let since = channel.log().len();
        let lr = cfg.lr(round);
        broadcast(&mut channel, clients.iter_mut(), &global, round, cfg.persist_adam)?;
        let losses = clients
            .par_iter_mut()
            .map(|c| c.train_epochs(&net, round, cfg.local_epochs, lr, cfg.batch_size))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Client> = clients.iter().collect();
        global = collect_and_aggregate(&mut channel, &refs, round, cfg)?;
        rounds.push(round_log(round, lr, &refs, &losses, &channel, since));
    }
    let (messages, captured) = channel.into_parts();
    Ok(FlRun {
        global,
        rounds,
        messages,
        captured,
    })
}

/// Plain (non-federated) training: `P·Q` epochs over `samples` with the
/// same schedule, shuffling stream and persistent Adam moments.
pub fn train_centralized(cfg: &FLConfig, label: &str, samples: Vec<KSpaceSample>) -> Result<(ParamSet, Vec<f64>)> {
    cfg.validate()?;
    let net = UNet::new(cfg.unet)?;
    let mut client = Client::new(0, label, samples, cfg.seed)?;
    client.deploy(cfg.init_params(&net), true)?;
    let mut losses = Vec::with_capacity(cfg.global_epochs);
    for round in 0..cfg.global_epochs {
        losses.push(client.train_epochs(&net, round, cfg.local_epochs, cfg.lr(round), cfg.batch_size)?);
    }
    Ok((client.params, losses))
}
