use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Party;
use crate::bundle::sha256_hex;
use crate::error::{Error, Result};
use crate::train::Strategy;

/// The only payload kinds the channel can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    AdapterBundle,
    RoundSignal,
}

/// The one-line JSON written after each bundle: `{round, kind, sha256}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSignal {
    pub round: usize,
    pub kind: MessageKind,
    pub sha256: String,
}

impl RoundSignal {
    pub fn for_bundle(round: usize, bundle: &[u8]) -> Self {
        Self {
            round,
            kind: MessageKind::AdapterBundle,
            sha256: sha256_hex(bundle),
        }
    }

    pub fn to_line(&self) -> Vec<u8> {
        let mut line = serde_json::to_vec(self).expect("signal serializes");
        line.push(b'\n');
        line
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// One transcript entry. The payload is kept so the run can be audited.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub sender: Party,
    pub receiver: Party,
    pub kind: MessageKind,
    pub sha256: String,
    pub len: usize,
    pub round: usize,
    #[serde(with = "hex_payload")]
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(sender: Party, receiver: Party, kind: MessageKind, round: usize, payload: Vec<u8>) -> Self {
        Self {
            sender,
            receiver,
            kind,
            sha256: sha256_hex(&payload),
            len: payload.len(),
            round,
            payload,
        }
    }
}

/// Ordered log of everything that crossed between the parties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub strategy: Strategy,
    pub adv_rounds: usize,
    pub backbone_hash: String,
    pub messages: Vec<Message>,
}

impl Transcript {
    pub fn new(strategy: Strategy, adv_rounds: usize, backbone_hash: impl Into<String>) -> Self {
        Self {
            strategy,
            adv_rounds,
            backbone_hash: backbone_hash.into(),
            messages: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.messages.iter().filter(|m| m.kind == kind).count()
    }

    pub fn bundles(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.kind == MessageKind::AdapterBundle)
    }

    /// Appends a bundle and the round signal that announces it.
    pub fn record_bundle(&mut self, sender: Party, receiver: Party, round: usize, bundle: Vec<u8>) {
        let signal = RoundSignal::for_bundle(round, &bundle).to_line();
        self.messages.push(Message::new(
            sender,
            receiver,
            MessageKind::AdapterBundle,
            round,
            bundle,
        ));
        self.messages
            .push(Message::new(sender, receiver, MessageKind::RoundSignal, round, signal));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(e.column(), format!("transcript {}: {e}", path.display())))
    }
}

mod hex_payload {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}
