//! Federated training with cross-site latent alignment.
//!
//! Every source client owns a domain identifier that learns to tell its
//! latents from the target site's; the source and target encoders are then
//! updated adversarially against it. The target site never shares images:
//! it computes its own latents, ships them as [`LatentBatch`]es and applies
//! the gradient the source sends back.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamState, BoundParams, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fl::{
    audited_channel, broadcast, check_sites, collect_and_aggregate, round_log, Channel, Client, ClientLoss,
    FLConfig, FlRun, Message, MessageKind, Payload, RunOptions, SERVER_ID,
};
use crate::model::{is_encoder_param, DomainIdentifier, LatentBatch, UNet, ENCODER_PREFIXES};
use crate::seed;
use crate::sites::{stack_batch, KSpaceSample, SiteDataset};

fn check_pair(zs: &[usize], zt: &[usize]) -> Result<()> {
    if zs != zt {
        return Err(Error::shape("latent pair", zs, zt));
    }
    Ok(())
}

fn mean_bce(tape: &mut Tape, p: Var, target: f64) -> Result<Var> {
    let terms = tape.bce_terms(p, target)?;
    tape.mean(terms)
}

/// `−mean log C(z_s) − mean log(1 − C(z_t))`.
pub fn identifier_loss_on(tape: &mut Tape, ident: &DomainIdentifier, c: &BoundParams, zs: Var, zt: Var) -> Result<Var> {
    check_pair(tape.shape(zs), tape.shape(zt))?;
    let ps = ident.forward(tape, c, zs)?;
    let pt = ident.forward(tape, c, zt)?;
    let a = mean_bce(tape, ps, 1.0)?;
    let b = mean_bce(tape, pt, 0.0)?;
    tape.add(a, b)
}

/// `−mean log C(z_s) − mean log C(z_t)`; with `inverted` the source term
/// becomes `−mean log(1 − C(z_s))`.
pub fn encoder_adv_loss_on(
    tape: &mut Tape,
    ident: &DomainIdentifier,
    c: &BoundParams,
    zs: Var,
    zt: Var,
    inverted: bool,
) -> Result<Var> {
    check_pair(tape.shape(zs), tape.shape(zt))?;
    let ps = ident.forward(tape, c, zs)?;
    let pt = ident.forward(tape, c, zt)?;
    let a = mean_bce(tape, ps, if inverted { 0.0 } else { 1.0 })?;
    let b = mean_bce(tape, pt, 1.0)?;
    tape.add(a, b)
}

fn eval_pair_loss(
    cparams: &ParamSet,
    zs: &LatentBatch,
    zt: &LatentBatch,
    build: impl Fn(&mut Tape, &BoundParams, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let c = cparams.bind(&mut tape, false);
    let s = tape.constant(zs.features.detached());
    let t = tape.constant(zt.features.detached());
    let loss = build(&mut tape, &c, s, t)?;
    Ok(tape.value(loss).item())
}

pub fn identifier_loss(ident: &DomainIdentifier, cparams: &ParamSet, zs: &LatentBatch, zt: &LatentBatch) -> Result<f64> {
    eval_pair_loss(cparams, zs, zt, |t, c, s, z| identifier_loss_on(t, ident, c, s, z))
}

pub fn encoder_adv_loss(
    ident: &DomainIdentifier,
    cparams: &ParamSet,
    zs: &LatentBatch,
    zt: &LatentBatch,
    inverted: bool,
) -> Result<f64> {
    eval_pair_loss(cparams, zs, zt, |t, c, s, z| encoder_adv_loss_on(t, ident, c, s, z, inverted))
}

/// Identifier state for one source → target pair. Never leaves the source.
#[derive(Debug, Clone)]
pub struct AlignmentPair {
    pub source_site: String,
    pub target_site: String,
    pub identifier_params: ParamSet,
    pub identifier_adam: AdamState,
}

impl AlignmentPair {
    pub fn new(ident: &DomainIdentifier, source: &str, target: &str, global_seed: u64) -> Self {
        let params = ident.init(&mut seed::rng(
            global_seed,
            &[seed::label("identifier"), seed::label(source), seed::label(target)],
        ));
        Self {
            source_site: source.to_string(),
            target_site: target.to_string(),
            identifier_adam: AdamState::new(&params),
            identifier_params: params,
        }
    }
}

/// Updates the identifier on `L_advC` with both latents held fixed.
pub fn identifier_substep(
    ident: &DomainIdentifier,
    pair: &mut AlignmentPair,
    zs: &LatentBatch,
    zt: &LatentBatch,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let c = pair.identifier_params.bind(&mut tape, true);
    let s = tape.constant(zs.features.detached());
    let t = tape.constant(zt.features.detached());
    let loss = identifier_loss_on(&mut tape, ident, &c, s, t)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    pair.identifier_params.accumulate_grads(&c, &grads)?;
    adam_step(&mut pair.identifier_params, &mut pair.identifier_adam, lr)?;
    Ok(value)
}

/// Result of the adversarial encoder sub-step at a source site.
#[derive(Debug, Clone)]
pub struct EncoderStep {
    pub loss: f64,
    /// `∂(λ·L_advE)/∂z_t`, to be returned to the target site.
    pub target_grad: LatentBatch,
}

/// Updates the source encoder on `λ·L_advE` with the identifier frozen.
#[allow(clippy::too_many_arguments)]
pub fn encoder_substep(
    net: &UNet,
    ident: &DomainIdentifier,
    params: &mut ParamSet,
    encoder_adam: &mut AdamState,
    cparams: &ParamSet,
    x_s: &Tensor,
    zt: &LatentBatch,
    lambda: f64,
    inverted: bool,
    lr: f64,
) -> Result<EncoderStep> {
    let mut tape = Tape::new();
    let bound = params.bind_where(&mut tape, is_encoder_param);
    let x = tape.constant(x_s.detached());
    let (zs, _) = net.encode(&mut tape, &bound, x)?;
    let c = cparams.bind(&mut tape, false);
    let t = tape.variable(zt.features.detached());
    let adv = encoder_adv_loss_on(&mut tape, ident, &c, zs, t, inverted)?;
    let loss = tape.scale(adv, lambda)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let dz = grads
        .get(t)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; zt.features.numel()]);
    let mut enc = params.subset(ENCODER_PREFIXES);
    enc.accumulate_grads(&bound, &grads)?;
    adam_step(&mut enc, encoder_adam, lr)?;
    params.overwrite_from(&enc)?;
    Ok(EncoderStep {
        loss: value,
        target_grad: LatentBatch {
            features: Tensor::new(zt.features.shape().to_vec(), dz)?,
            origin_site: zt.origin_site.clone(),
        },
    })
}

/// The target site's encoder copy and its update counter.
#[derive(Debug, Clone)]
pub struct TargetEncoderHandle {
    pub encoder_params: ParamSet,
    pub version: u64,
}

/// Alignment-side view of the target institution: its encoder and the
/// under-sampled inputs of its training split. References are not kept.
#[derive(Debug)]
struct TargetSite {
    site_id: String,
    inputs: Vec<Tensor>,
    shuffle_seed: u64,
    handle: TargetEncoderHandle,
    adam: Option<AdamState>,
}

impl TargetSite {
    fn new(ds: &SiteDataset, global_seed: u64) -> Result<Self> {
        if ds.train.is_empty() {
            return Err(Error::EmptyDataset(format!("target {} has no alignment inputs", ds.site_id())));
        }
        Ok(Self {
            site_id: ds.site_id().to_string(),
            inputs: ds.train.iter().map(|s| s.input.clone()).collect(),
            shuffle_seed: seed::derive(global_seed, &[seed::label("target"), seed::label(ds.site_id())]),
            handle: TargetEncoderHandle {
                encoder_params: ParamSet::new(),
                version: 0,
            },
            adam: None,
        })
    }

    fn receive(&mut self, msg: Message) -> Result<()> {
        match (msg.kind, msg.payload) {
            (MessageKind::Deploy, Payload::Params(p)) => {
                self.handle.encoder_params = p.subset(ENCODER_PREFIXES);
                self.adam = Some(AdamState::new(&self.handle.encoder_params));
                Ok(())
            }
            (kind, payload) => Err(Error::Protocol(format!(
                "target cannot accept {kind:?} with {} payload",
                payload.name()
            ))),
        }
    }

    /// Inputs for `source`'s `step`-th batch, cycling through a shuffled order.
    fn batch(&self, round: usize, epoch: usize, source: usize, step: usize, len: usize) -> Result<Tensor> {
        let mut order: Vec<usize> = (0..self.inputs.len()).collect();
        order.shuffle(&mut seed::rng(self.shuffle_seed, &[round as u64, epoch as u64, source as u64]));
        let n = self.inputs.len();
        let (h, w) = (self.inputs[0].shape()[0], self.inputs[0].shape()[1]);
        let mut data = Vec::with_capacity(len * h * w);
        for j in 0..len {
            data.extend_from_slice(self.inputs[order[(step * len + j) % n]].data());
        }
        Tensor::new(vec![len, 1, h, w], data)
    }

    fn latent(&self, net: &UNet, snapshot: &ParamSet, x: &Tensor) -> Result<LatentBatch> {
        net.encode_latent(snapshot, x, &self.site_id)
    }

    /// Backpropagates `grad` through the encoder at `snapshot` and applies
    /// the step to the current encoder.
    fn apply_update(&mut self, net: &UNet, snapshot: &ParamSet, x: &Tensor, grad: &LatentBatch, lr: f64) -> Result<()> {
        let mut tape = Tape::new();
        let bound = snapshot.bind(&mut tape, true);
        let xv = tape.constant(x.detached());
        let (z, _) = net.encode(&mut tape, &bound, xv)?;
        check_pair(tape.shape(z), grad.features.shape())?;
        let g = tape.constant(grad.features.detached());
        let prod = tape.mul(z, g)?;
        let loss = tape.sum(prod)?;
        let grads = tape.backward(loss)?;
        let adam = self.adam.as_mut().ok_or_else(|| Error::Protocol("target updated before deploy".into()))?;
        self.handle.encoder_params.accumulate_grads(&bound, &grads)?;
        adam_step(&mut self.handle.encoder_params, adam, lr)?;
        self.handle.version += 1;
        Ok(())
    }
}

/// A federated client plus, for alignment sources, its identifier state.
struct Worker {
    client: Client,
    pair: Option<AlignmentPair>,
    encoder_adam: Option<AdamState>,
    recon_loss: f64,
    ident_loss: f64,
    enc_loss: f64,
    steps: usize,
    adv_steps: usize,
}

struct AdvRequest {
    worker: usize,
    x_t: Tensor,
    z_t: LatentBatch,
    x_s: Tensor,
}

/// Federated training of `clients` with latent alignment towards `target`.
/// Clients whose site is the target itself train without an identifier.
pub fn run_flmrcm(cfg: &FLConfig, clients: &[&SiteDataset], target: &SiteDataset) -> Result<FlRun> {
    run_flmrcm_with(cfg, clients, target, RunOptions::default())
}

pub fn run_flmrcm_with(cfg: &FLConfig, clients: &[&SiteDataset], target: &SiteDataset, opts: RunOptions) -> Result<FlRun> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Protocol("cross-site training needs at least one source".into()));
    }
    let mut all: Vec<&SiteDataset> = clients.to_vec();
    if !clients.iter().any(|c| c.site_id() == target.site_id()) {
        all.push(target);
    }
    let size = check_sites(&all)?;
    let _ = check_sites(clients)?;
    cfg.unet.check_image_size(size)?;
    let net = UNet::new(cfg.unet)?;
    let ident = DomainIdentifier::for_unet(&cfg.unet, cfg.identifier_hidden)?;
    let adversarial = cfg.lambda_adv > 0.0;
    let mut channel = audited_channel(&all, size, opts);
    let mut target_site = TargetSite::new(target, cfg.seed)?;

    let mut workers = clients
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let aligned = adversarial && s.site_id() != target.site_id();
            Ok(Worker {
                client: Client::new(k, s.site_id(), s.train.clone(), cfg.seed)?,
                pair: aligned.then(|| AlignmentPair::new(&ident, s.site_id(), target.site_id(), cfg.seed)),
                encoder_adam: None,
                recon_loss: 0.0,
                ident_loss: 0.0,
                enc_loss: 0.0,
                steps: 0,
                adv_steps: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut global = cfg.init_params(&net);
    let mut rounds = Vec::with_capacity(cfg.global_epochs);
    for round in 0..cfg.global_epochs {
        let since = channel.log().len();
        let lr = cfg.lr(round);
        broadcast(&mut channel, workers.iter_mut().map(|w| &mut w.client), &global, round, cfg.persist_adam)?;
        for w in workers.iter_mut() {
            let keep = cfg.persist_adam && w.encoder_adam.is_some();
            if w.pair.is_some() && !keep {
                w.encoder_adam = Some(AdamState::new(&global.subset(ENCODER_PREFIXES)));
            }
            (w.recon_loss, w.ident_loss, w.enc_loss, w.steps, w.adv_steps) = (0.0, 0.0, 0.0, 0, 0);
        }
        if adversarial {
            let msg = Message::new(MessageKind::Deploy, round, SERVER_ID, &target_site.site_id, Payload::Params(global.clone()));
            target_site.receive(channel.transmit(msg)?)?;
        }

        for epoch in 0..cfg.local_epochs {
            let orders: Vec<Vec<Vec<usize>>> = workers
                .iter()
                .map(|w| w.client.batch_order(round, epoch, cfg.batch_size))
                .collect();
            let steps = orders.iter().map(Vec::len).max().unwrap_or(0);
            for step in 0..steps {
                workers
                    .par_iter_mut()
                    .zip(&orders)
                    .filter(|(_, o)| step < o.len())
                    .try_for_each(|(w, o)| -> Result<()> {
                        w.recon_loss += w.client.recon_step(&net, &o[step], lr)?;
                        w.steps += 1;
                        Ok(())
                    })?;
                if adversarial {
                    adversarial_step(
                        cfg, &net, &ident, &mut channel, &mut target_site, &mut workers, &orders, round, epoch, step, lr,
                    )?;
                }
            }
        }

        let cs: Vec<&Client> = workers.iter().map(|w| &w.client).collect();
        global = collect_and_aggregate(&mut channel, &cs, round, cfg)?;
        let losses: Vec<f64> = workers.iter().map(|w| w.recon_loss / w.steps.max(1) as f64).collect();
        let mut log = round_log(round, lr, &cs, &losses, &channel, since);
        for w in workers.iter().filter(|w| w.pair.is_some()) {
            let n = w.adv_steps.max(1) as f64;
            log.identifier_losses.push(ClientLoss {
                site_id: w.client.site_id().to_string(),
                loss: w.ident_loss / n,
            });
            log.encoder_losses.push(ClientLoss {
                site_id: w.client.site_id().to_string(),
                loss: w.enc_loss / n,
            });
        }
        rounds.push(log);
    }
    let (messages, captured) = channel.into_parts();
    Ok(FlRun {
        global,
        rounds,
        messages,
        captured,
    })
}

#[allow(clippy::too_many_arguments)]
fn adversarial_step(
    cfg: &FLConfig,
    net: &UNet,
    ident: &DomainIdentifier,
    channel: &mut Channel,
    target: &mut TargetSite,
    workers: &mut [Worker],
    orders: &[Vec<Vec<usize>>],
    round: usize,
    epoch: usize,
    step: usize,
    lr: f64,
) -> Result<()> {
    let snapshot = target.handle.encoder_params.clone();
    let mut requests = Vec::new();
    for (k, w) in workers.iter().enumerate() {
        if w.pair.is_none() || step >= orders[k].len() {
            continue;
        }
        let batch = &orders[k][step];
        let site = w.client.site_id();
        channel.transmit(Message::new(MessageKind::LatentRequest, round, site, &target.site_id, Payload::Empty))?;
        let x_t = target.batch(round, epoch, k, step, batch.len())?;
        let z_t = target.latent(net, &snapshot, &x_t)?;
        let reply = channel.transmit(Message::new(MessageKind::LatentReply, round, &target.site_id, site, Payload::Latent(z_t)))?;
        let z_t = match reply.payload {
            Payload::Latent(z) => z,
            other => return Err(Error::Protocol(format!("latent reply carried {}", other.name()))),
        };
        let (x_s, _) = w.client.batch(batch)?;
        requests.push(AdvRequest { worker: k, x_t, z_t, x_s });
    }

    let mut slots: Vec<Option<&mut Worker>> = workers.iter_mut().map(Some).collect();
    let jobs: Vec<(&AdvRequest, &mut Worker)> = requests
        .iter()
        .map(|r| (r, slots[r.worker].take().expect("one request per worker")))
        .collect();
    let updates = jobs
        .into_par_iter()
        .map(|(r, w)| -> Result<LatentBatch> {
            let pair = w.pair.as_mut().expect("aligned worker");
            let z_s = net.encode_latent(w.client.params(), &r.x_s, w.client.site_id())?;
            w.ident_loss += identifier_substep(ident, pair, &z_s, &r.z_t, lr)?;
            let adam = w.encoder_adam.as_mut().expect("reset on deploy");
            let out = encoder_substep(
                net,
                ident,
                w.client.params_mut(),
                adam,
                &pair.identifier_params,
                &r.x_s,
                &r.z_t,
                cfg.lambda_adv,
                cfg.inverted_source_term,
                lr,
            )?;
            w.enc_loss += out.loss;
            w.adv_steps += 1;
            Ok(out.target_grad)
        })
        .collect::<Result<Vec<_>>>()?;

    for (r, grad) in requests.iter().zip(updates) {
        let site = workers[r.worker].client.site_id().to_string();
        let msg = channel.transmit(Message::new(MessageKind::EncoderUpdate, round, &site, &target.site_id, Payload::LatentGrad(grad)))?;
        let grad = match msg.payload {
            Payload::LatentGrad(g) => g,
            other => return Err(Error::Protocol(format!("encoder update carried {}", other.name()))),
        };
        target.apply_update(net, &snapshot, &r.x_t, &grad, lr)?;
    }
    Ok(())
}

/// `‖mean(z_s) − mean(z_t)‖₂` of flattened bottleneck latents.
pub fn latent_distance(net: &UNet, params: &ParamSet, source: &[KSpaceSample], target: &[KSpaceSample]) -> Result<f64> {
    let mean = |samples: &[KSpaceSample]| -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("latent distance needs samples".into()));
        }
        let zs = samples
            .par_iter()
            .map(|s| {
                let (x, _) = stack_batch(&[s])?;
                Ok(net.encode_latent(params, &x, &s.site_id)?.features.into_data())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut acc = vec![0.0; zs[0].len()];
        for z in &zs {
            acc.iter_mut().zip(z).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= zs.len() as f64);
        Ok(acc)
    };
    let (a, b) = (mean(source)?, mean(target)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}
