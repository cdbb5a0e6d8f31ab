use std::io::{Read, Write};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FLMP";
const VERSION: u16 = 1;

/// Ordered, uniquely named collection of tensors: the model weights and the
/// unit of federated communication.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

/// Tape handles for a [`ParamSet`], index-aligned with its entries.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl BoundParams {
    /// Binds names to vars already on a tape; all entries count as trainable.
    pub fn from_vars(names: Vec<String>, vars: Vec<Var>) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::shape("bind", &[names.len()], &[vars.len()]));
        }
        let trainable = vec![true; vars.len()];
        Ok(Self { names, vars, trainable })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same names, same order, same shapes. Returns the first offending name.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        for i in 0..self.len().max(other.len()) {
            match (self.entries.get(i), other.entries.get(i)) {
                (Some((na, ta)), Some((nb, tb))) if na == nb && ta.shape() == tb.shape() => {}
                (Some((na, _)), _) => return Err(Error::Incompatible(na.clone())),
                (None, Some((nb, _))) => return Err(Error::Incompatible(nb.clone())),
                (None, None) => unreachable!(),
            }
        }
        Ok(())
    }

    /// Entries whose name starts with any of `prefixes`, in order.
    pub fn subset(&self, prefixes: &[&str]) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
                .map(|(n, t)| (n.clone(), t.detached()))
                .collect(),
        }
    }

    /// Overwrites the values of every entry of `other` present here.
    pub fn overwrite_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in other.iter() {
            let dst = self
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if dst.shape() != t.shape() {
                return Err(Error::Incompatible(name.to_string()));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.entries
            .iter_mut()
            .for_each(|(_, t)| t.set_requires_grad(on));
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.clear_grad());
    }

    /// Records every entry on `tape`. When `trainable` is false the entries
    /// are constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        self.bind_where(tape, |_| trainable)
    }

    /// Like [`bind`](Self::bind) with a per-entry trainability predicate.
    pub fn bind_where(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let trainable: Vec<bool> = self.entries.iter().map(|(n, _)| trainable(n)).collect();
        let vars = self
            .entries
            .iter()
            .zip(&trainable)
            .map(|((_, t), &on)| {
                if on {
                    tape.variable(t.detached())
                } else {
                    tape.constant(t.detached())
                }
            })
            .collect();
        BoundParams {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars,
            trainable,
        }
    }

    /// Adds the gradients of trainable bound entries into each tensor's
    /// gradient buffer. Repeated calls accumulate.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &Gradients) -> Result<()> {
        for ((name, var), trainable) in bound.names.iter().zip(&bound.vars).zip(&bound.trainable) {
            if !trainable {
                continue;
            }
            let t = self
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            match grads.get(*var) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(self.entries.len() as u32);
        for (name, t) in &self.entries {
            w.string(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error(format!("unsupported parameter-set version {version}")));
        }
        let count = r.u32()? as usize;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n.saturating_mul(8) > r.remaining() {
                return Err(r.error(format!("truncated data for `{name}`")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| r.error(e.to_string()))?;
            out.insert(name, t).map_err(|e| r.error(e.to_string()))?;
        }
        r.expect_end()?;
        Ok(out)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}
