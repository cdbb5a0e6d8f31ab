//! Wire format for federated traffic and the audited in-process channel.

use std::collections::HashSet;

use serde::Serialize;

use crate::autodiff::{ParamSet, Tensor};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::LatentBatch;
use crate::sites::KSpaceSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MessageKind {
    Deploy,
    Upload,
    LatentRequest,
    LatentReply,
    EncoderUpdate,
}

impl MessageKind {
    const ALL: [MessageKind; 5] = [
        MessageKind::Deploy,
        MessageKind::Upload,
        MessageKind::LatentRequest,
        MessageKind::LatentReply,
        MessageKind::EncoderUpdate,
    ];

    pub fn tag(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get((tag as usize).checked_sub(1)?).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Empty,
    Params(ParamSet),
    Latent(LatentBatch),
    LatentGrad(LatentBatch),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::Empty => 0,
            Payload::Params(_) => 1,
            Payload::Latent(_) => 2,
            Payload::LatentGrad(_) => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Payload::Empty => "empty",
            Payload::Params(_) => "params",
            Payload::Latent(_) => "latent",
            Payload::LatentGrad(_) => "latent_grad",
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Payload::Empty => vec![],
            Payload::Params(p) => p.iter().map(|(_, t)| t).collect(),
            Payload::Latent(z) | Payload::LatentGrad(z) => vec![&z.features],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub round: u32,
    pub sender: String,
    pub receiver: String,
    pub payload: Payload,
}

impl Message {
    pub fn new(kind: MessageKind, round: usize, sender: &str, receiver: &str, payload: Payload) -> Self {
        Self {
            kind,
            round: round as u32,
            sender: sender.to_string(),
            receiver: receiver.to_string(),
            payload,
        }
    }

    /// `kind u8, round u32, sender, receiver, payload tag u8, payload length
    /// u32, payload bytes`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let body = match &self.payload {
            Payload::Empty => Vec::new(),
            Payload::Params(p) => p.encode(),
            Payload::Latent(z) | Payload::LatentGrad(z) => z.encode()?,
        };
        let mut w = ByteWriter::new();
        w.u8(self.kind.tag());
        w.u32(self.round);
        w.string(&self.sender);
        w.string(&self.receiver);
        w.u8(self.payload.tag());
        w.u32(body.len() as u32);
        w.bytes(&body);
        Ok(w.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let tag = r.u8()?;
        let kind = MessageKind::from_tag(tag).ok_or_else(|| r.error(format!("unknown message kind {tag}")))?;
        let round = r.u32()?;
        let sender = r.string()?;
        let receiver = r.string()?;
        let ptag = r.u8()?;
        let len = r.u32()? as usize;
        let body = r.take(len)?;
        r.expect_end()?;
        let payload = match ptag {
            0 if body.is_empty() => Payload::Empty,
            1 => Payload::Params(ParamSet::decode(body)?),
            2 => Payload::Latent(LatentBatch::decode(body)?),
            3 => Payload::LatentGrad(LatentBatch::decode(body)?),
            _ => return Err(r.error(format!("bad payload tag {ptag} with {len} bytes"))),
        };
        Ok(Self {
            kind,
            round,
            sender,
            receiver,
            payload,
        })
    }
}

/// One line of the channel log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageRecord {
    pub kind: MessageKind,
    pub round: u32,
    pub sender: String,
    pub receiver: String,
    pub payload: &'static str,
    pub bytes: usize,
}

fn fingerprint(values: &[f64]) -> u64 {
    values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Rejects messages that carry image-shaped tensors or any registered
/// dataset image (checked on every `image_size²`-aligned chunk).
#[derive(Debug, Clone)]
pub struct PrivacyAudit {
    image_size: usize,
    fingerprints: HashSet<u64>,
}

impl PrivacyAudit {
    pub fn new(image_size: usize) -> Self {
        Self {
            image_size,
            fingerprints: HashSet::new(),
        }
    }

    pub fn register(&mut self, samples: &[KSpaceSample]) {
        for s in samples {
            self.fingerprints.insert(fingerprint(s.input.data()));
            self.fingerprints.insert(fingerprint(s.reference.data()));
        }
    }

    pub fn registered(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn check(&self, msg: &Message) -> Result<()> {
        let s = self.image_size;
        let area = s * s;
        for t in msg.payload.tensors() {
            let shape = t.shape();
            if shape.len() >= 2 && shape[shape.len() - 2..] == [s, s] {
                return Err(Error::Privacy(format!(
                    "{:?} from {} carries an image-shaped tensor {shape:?}",
                    msg.kind, msg.sender
                )));
            }
            if area > 0 && t.numel() >= area {
                let hit = t
                    .data()
                    .chunks_exact(area)
                    .any(|c| self.fingerprints.contains(&fingerprint(c)));
                if hit {
                    return Err(Error::Privacy(format!(
                        "{:?} from {} embeds a dataset image",
                        msg.kind, msg.sender
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Serializes, audits and delivers messages, keeping an ordered log.
#[derive(Debug)]
pub struct Channel {
    audit: PrivacyAudit,
    log: Vec<MessageRecord>,
    capture: Option<Vec<Vec<u8>>>,
}

impl Channel {
    pub fn new(audit: PrivacyAudit) -> Self {
        Self {
            audit,
            log: Vec::new(),
            capture: None,
        }
    }

    /// Also retains every encoded message, for protocol tests.
    pub fn with_capture(mut self) -> Self {
        self.capture = Some(Vec::new());
        self
    }

    /// Returns the message as decoded on the receiving end.
    pub fn transmit(&mut self, msg: Message) -> Result<Message> {
        self.audit.check(&msg)?;
        let bytes = msg.encode()?;
        let delivered = Message::decode(&bytes)?;
        self.audit.check(&delivered)?;
        self.log.push(MessageRecord {
            kind: delivered.kind,
            round: delivered.round,
            sender: delivered.sender.clone(),
            receiver: delivered.receiver.clone(),
            payload: delivered.payload.name(),
            bytes: bytes.len(),
        });
        if let Some(c) = &mut self.capture {
            c.push(bytes);
        }
        Ok(delivered)
    }

    pub fn log(&self) -> &[MessageRecord] {
        &self.log
    }

    pub fn captured(&self) -> &[Vec<u8>] {
        self.capture.as_deref().unwrap_or(&[])
    }

    pub fn into_parts(self) -> (Vec<MessageRecord>, Vec<Vec<u8>>) {
        (self.log, self.capture.unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        p
    }

    #[test]
    fn messages_round_trip() {
        let msgs = [
            Message::new(MessageKind::Deploy, 3, "server", "A", Payload::Params(params())),
            Message::new(MessageKind::LatentRequest, 0, "B", "D", Payload::Empty),
            Message::new(
                MessageKind::LatentReply,
                9,
                "D",
                "B",
                Payload::Latent(LatentBatch {
                    features: Tensor::zeros(&[1, 2, 2, 2]),
                    origin_site: "D".into(),
                }),
            ),
        ];
        for m in msgs {
            let bytes = m.encode().unwrap();
            assert_eq!(Message::decode(&bytes).unwrap(), m);
            assert!(Message::decode(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn unknown_kind_reports_offset() {
        let mut bytes = Message::new(MessageKind::Upload, 0, "A", "server", Payload::Empty)
            .encode()
            .unwrap();
        bytes[0] = 42;
        match Message::decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn audit_rejects_image_shapes() {
        let audit = PrivacyAudit::new(4);
        let mut p = ParamSet::new();
        p.insert("leak", Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        let m = Message::new(MessageKind::Upload, 0, "A", "server", Payload::Params(p));
        assert!(matches!(audit.check(&m), Err(Error::Privacy(_))));
        let mut channel = Channel::new(audit);
        assert!(channel.transmit(m).is_err());
        assert!(channel.log().is_empty());
    }
}
