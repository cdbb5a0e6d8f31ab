//! Reconstruction network and latent domain identifier.
//!
//! The reconstruction network is a residual U-Net, `ŷ = x + f(x)`. For
//! `depth = D` and `base_channels = B`, level `i` has `cᵢ = B·2ⁱ` channels and
//! the parameters are named:
//!
//! | entry | shape |
//! |---|---|
//! | `enc{i}.conv1.{weight,bias}` | `[cᵢ, c_{i−1} (1 for i = 0), 3, 3]`, `[cᵢ]` |
//! | `enc{i}.conv2.{weight,bias}` | `[cᵢ, cᵢ, 3, 3]`, `[cᵢ]` |
//! | `bottleneck.conv{1,2}.{weight,bias}` | `[c_L, c_L, 3, 3]`, `[c_L]` with `c_L = c_{D−1}` |
//! | `dec{i}.up.{weight,bias}` | `[cᵢ, c_{i+1} (c_L for i = D−1), 3, 3]`, `[cᵢ]` |
//! | `dec{i}.conv1.{weight,bias}` | `[cᵢ, 2cᵢ, 3, 3]`, `[cᵢ]` |
//! | `dec{i}.conv2.{weight,bias}` | `[cᵢ, cᵢ, 3, 3]`, `[cᵢ]` |
//! | `out.{weight,bias}` | `[1, c₀, 1, 1]`, `[1]` |
//!
//! Entries appear in that order, encoder levels ascending and decoder levels
//! descending. Each encoder level is conv-ReLU-conv-ReLU followed by 2×2 max
//! pooling; the bottleneck output (after `D` poolings) is the latent that
//! cross-site alignment acts on. Decoder levels upsample ×2 (nearest) with a
//! 3×3 conv, concatenate the matching skip, then conv-ReLU-conv-ReLU.
//!
//! The identifier is `ident.conv1` (3×3, latent → hidden) with leaky ReLU
//! 0.2, `ident.conv2` (3×3, hidden → 1), global average pooling and a
//! clamped sigmoid.

use rand::Rng;

use crate::autodiff::{BoundParams, ParamSet, Tape, Tensor, Var};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const ENCODER_PREFIXES: &[&str] = &["enc", "bottleneck."];
pub const IDENTIFIER_PREFIX: &str = "ident.";
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            depth: 3,
        }
    }
}

impl UNetConfig {
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn latent_channels(&self) -> usize {
        self.level_channels(self.depth - 1)
    }

    pub fn latent_size(&self, image_size: usize) -> usize {
        image_size >> self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 || self.depth < 2 || self.base_channels == 0 {
            return Err(Error::config(format!("invalid U-Net config {self:?}")));
        }
        Ok(())
    }

    pub fn check_image_size(&self, size: usize) -> Result<()> {
        if size == 0 || !size.is_multiple_of(1 << self.depth) {
            return Err(Error::config(format!(
                "image size {size} not divisible by 2^{}",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Bottleneck features of one batch and the site that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub features: Tensor,
    pub origin_site: String,
}

impl LatentBatch {
    /// `dims u32×4`, f64 little-endian data, `origin_site` string.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let shape = self.features.shape();
        if shape.len() != 4 {
            return Err(Error::shape("latent encode", shape, &[0, 0, 0, 0]));
        }
        let mut w = ByteWriter::new();
        shape.iter().for_each(|&d| w.u32(d as u32));
        self.features.data().iter().for_each(|&v| w.f64(v));
        w.string(&self.origin_site);
        Ok(w.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let shape = (0..4).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n == 0 || n.saturating_mul(8) > r.remaining() {
            return Err(r.error(format!("bad latent dims {shape:?}")));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let origin_site = r.string()?;
        r.expect_end()?;
        Ok(Self {
            features: Tensor::new(shape, data)?,
            origin_site,
        })
    }
}

/// Skip connections recorded on a tape by [`UNet::encode`].
#[derive(Debug, Clone)]
pub struct SkipStack {
    input: Var,
    levels: Vec<Var>,
}

/// Skip connections as plain values, for running the halves separately.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipTensors {
    pub input: Tensor,
    pub levels: Vec<Tensor>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent init shape")
}

/// He-uniform conv weights (`±√(6/fan_in)`·`gain`) and zero bias.
fn add_conv(
    p: &mut ParamSet,
    rng: &mut impl Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    gain: f64,
) -> Result<()> {
    let bound = gain * (6.0 / (cin * k * k) as f64).sqrt();
    p.insert(format!("{name}.weight"), uniform(rng, &[cout, cin, k, k], bound))?;
    p.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
}

fn conv(tape: &mut Tape, p: &BoundParams, name: &str, x: Var, pad: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"))?;
    let b = p.var(&format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), 1, pad)
}

fn conv_relu(tape: &mut Tape, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let y = conv(tape, p, name, x, 1)?;
    tape.relu(y)
}

#[derive(Debug, Clone, Copy)]
pub struct UNet {
    cfg: UNetConfig,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Fresh weights. The output projection starts at one tenth of the He
    /// bound so an untrained network stays close to the identity map.
    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let c = |i| self.cfg.level_channels(i);
        let d = self.cfg.depth;
        let mut p = ParamSet::new();
        let mut add = |name: &str, cout, cin, k, gain| {
            add_conv(&mut p, rng, name, cout, cin, k, gain).expect("unique layer names")
        };
        for i in 0..d {
            let cin = if i == 0 { self.cfg.in_channels } else { c(i - 1) };
            add(&format!("enc{i}.conv1"), c(i), cin, 3, 1.0);
            add(&format!("enc{i}.conv2"), c(i), c(i), 3, 1.0);
        }
        let cl = self.cfg.latent_channels();
        add("bottleneck.conv1", cl, cl, 3, 1.0);
        add("bottleneck.conv2", cl, cl, 3, 1.0);
        for i in (0..d).rev() {
            let cin = if i == d - 1 { cl } else { c(i + 1) };
            add(&format!("dec{i}.up"), c(i), cin, 3, 1.0);
            add(&format!("dec{i}.conv1"), c(i), 2 * c(i), 3, 1.0);
            add(&format!("dec{i}.conv2"), c(i), c(i), 3, 1.0);
        }
        add("out", 1, c(0), 1, 0.1);
        p
    }

    fn check_batch(&self, shape: &[usize]) -> Result<usize> {
        match *shape {
            [_, 1, h, w] if h == w => {
                self.cfg.check_image_size(h)?;
                Ok(h)
            }
            ref s => Err(Error::shape("unet input", s, &[0, 1, 0, 0])),
        }
    }

    /// Encoder half: returns the bottleneck latent and the skip stack.
    pub fn encode(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<(Var, SkipStack)> {
        self.check_batch(tape.shape(x))?;
        let mut levels = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for i in 0..self.cfg.depth {
            h = conv_relu(tape, p, &format!("enc{i}.conv1"), h)?;
            h = conv_relu(tape, p, &format!("enc{i}.conv2"), h)?;
            levels.push(h);
            h = tape.maxpool2(h)?;
        }
        h = conv_relu(tape, p, "bottleneck.conv1", h)?;
        h = conv_relu(tape, p, "bottleneck.conv2", h)?;
        Ok((h, SkipStack { input: x, levels }))
    }

    /// Decoder half including the global residual connection.
    pub fn decode(&self, tape: &mut Tape, p: &BoundParams, latent: Var, skips: &SkipStack) -> Result<Var> {
        if skips.levels.len() != self.cfg.depth {
            return Err(Error::config("skip stack depth does not match the network"));
        }
        let mut h = latent;
        for i in (0..self.cfg.depth).rev() {
            h = tape.upsample_nearest2(h)?;
            h = conv_relu(tape, p, &format!("dec{i}.up"), h)?;
            h = tape.concat_channels(h, skips.levels[i])?;
            h = conv_relu(tape, p, &format!("dec{i}.conv1"), h)?;
            h = conv_relu(tape, p, &format!("dec{i}.conv2"), h)?;
        }
        let residual = conv(tape, p, "out", h, 0)?;
        tape.add(skips.input, residual)
    }

    /// Full forward pass; returns `(reconstruction, latent)`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<(Var, Var)> {
        let (z, skips) = self.encode(tape, p, x)?;
        let y = self.decode(tape, p, z, &skips)?;
        Ok((y, z))
    }

    pub fn reconstruct(&self, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(batch.detached());
        let (y, _) = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).detached())
    }

    pub fn encoder_forward(
        &self,
        params: &ParamSet,
        batch: &Tensor,
        origin_site: &str,
    ) -> Result<(LatentBatch, SkipTensors)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(batch.detached());
        let (z, skips) = self.encode(&mut tape, &p, x)?;
        let latent = LatentBatch {
            features: tape.value(z).detached(),
            origin_site: origin_site.to_string(),
        };
        let skips = SkipTensors {
            input: tape.value(skips.input).detached(),
            levels: skips.levels.iter().map(|v| tape.value(*v).detached()).collect(),
        };
        Ok((latent, skips))
    }

    pub fn decoder_forward(
        &self,
        params: &ParamSet,
        latent: &LatentBatch,
        skips: &SkipTensors,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let z = tape.constant(latent.features.detached());
        let stack = SkipStack {
            input: tape.constant(skips.input.detached()),
            levels: skips.levels.iter().map(|t| tape.constant(t.detached())).collect(),
        };
        let y = self.decode(&mut tape, &p, z, &stack)?;
        Ok(tape.value(y).detached())
    }

    /// Latent only, as a plain value.
    pub fn encode_latent(&self, params: &ParamSet, batch: &Tensor, origin_site: &str) -> Result<LatentBatch> {
        Ok(self.encoder_forward(params, batch, origin_site)?.0)
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainIdentifierConfig {
    pub latent_channels: usize,
    pub hidden_channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DomainIdentifier {
    cfg: DomainIdentifierConfig,
}

impl DomainIdentifier {
    pub fn new(cfg: DomainIdentifierConfig) -> Result<Self> {
        if cfg.latent_channels == 0 || cfg.hidden_channels == 0 {
            return Err(Error::config(format!("invalid identifier config {cfg:?}")));
        }
        Ok(Self { cfg })
    }

    pub fn for_unet(unet: &UNetConfig, hidden_channels: usize) -> Result<Self> {
        Self::new(DomainIdentifierConfig {
            latent_channels: unet.latent_channels(),
            hidden_channels,
        })
    }

    pub fn config(&self) -> &DomainIdentifierConfig {
        &self.cfg
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let (l, h) = (self.cfg.latent_channels, self.cfg.hidden_channels);
        add_conv(&mut p, rng, "ident.conv1", h, l, 3, 1.0).expect("unique names");
        add_conv(&mut p, rng, "ident.conv2", 1, h, 3, 1.0).expect("unique names");
        p
    }

    /// Per-sample probability that `latent` came from the source site, `[n, 1]`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, latent: Var) -> Result<Var> {
        match *tape.shape(latent) {
            [_, c, _, _] if c == self.cfg.latent_channels => {}
            ref s => return Err(Error::shape("identifier input", s, &[0, self.cfg.latent_channels, 0, 0])),
        }
        let h = conv(tape, p, "ident.conv1", latent, 1)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = conv(tape, p, "ident.conv2", h, 1)?;
        let pooled = tape.global_avg_pool(h)?;
        tape.sigmoid(pooled)
    }

    pub fn predict(&self, params: &ParamSet, latent: &LatentBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let z = tape.constant(latent.features.detached());
        let out = self.forward(&mut tape, &p, z)?;
        Ok(tape.value(out).detached())
    }
}
