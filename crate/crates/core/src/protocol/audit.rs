use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use crate::backbone::{ClassifierHead, Party};
use crate::bundle::{decode_bundle, sha256_hex};
use crate::tensor::Tensor;
use crate::train::Strategy;

use super::transcript::{MessageKind, RoundSignal, Transcript};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditCheck {
    pub id: char,
    pub name: &'static str,
    pub passed: bool,
    pub findings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, id: char) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "({}) {:<40} {}",
                c.id,
                c.name,
                if c.passed { "PASS" } else { "FAIL" }
            )?;
            for finding in &c.findings {
                writeln!(f, "    {finding}")?;
            }
        }
        write!(f, "audit {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// `(sender, receiver, round)` of every bundle the strategy's script sends.
pub fn expected_bundles(strategy: Strategy, adv_rounds: usize) -> Vec<(Party, Party, usize)> {
    use Party::{ComplianceOfficer as Co, SolutionDeveloper as Sd};
    match strategy {
        Strategy::Erm => Vec::new(),
        Strategy::Unl | Strategy::Orth => vec![(Co, Sd, 0)],
        Strategy::Adv => (0..adv_rounds).flat_map(|r| [(Sd, Co, r), (Co, Sd, r)]).collect(),
    }
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Every length-`len` window of a payload, for substring probes.
fn windows(payload: &[u8], len: usize) -> HashSet<&[u8]> {
    if len == 0 || payload.len() < len {
        return HashSet::new();
    }
    payload.windows(len).collect()
}

fn check(id: char, name: &'static str, findings: Vec<String>) -> AuditCheck {
    AuditCheck {
        id,
        name,
        passed: findings.is_empty(),
        findings,
    }
}

fn well_formed(t: &Transcript) -> Vec<String> {
    let mut out = Vec::new();
    let mut last_bundle: Option<(usize, &str)> = None;
    for (i, m) in t.messages.iter().enumerate() {
        if m.len != m.payload.len() || m.sha256 != sha256_hex(&m.payload) {
            out.push(format!(
                "message {i}: recorded length or hash does not match the payload"
            ));
        }
        match m.kind {
            MessageKind::AdapterBundle => {
                if let Err(e) = decode_bundle(&m.payload) {
                    out.push(format!("message {i}: not a valid bundle: {e}"));
                }
                last_bundle = Some((m.round, m.sha256.as_str()));
            }
            MessageKind::RoundSignal => match RoundSignal::parse(&m.payload) {
                Err(e) => out.push(format!("message {i}: not a valid round signal: {e}")),
                Ok(sig) => {
                    let announces = (sig.round, sig.sha256.as_str());
                    if sig.kind != MessageKind::AdapterBundle || last_bundle != Some(announces) {
                        out.push(format!("message {i}: signal does not announce the preceding bundle"));
                    }
                    last_bundle = None;
                }
            },
        }
    }
    out
}

fn no_head_bytes(t: &Transcript, heads: &[&ClassifierHead]) -> Vec<String> {
    let mut needles = Vec::new();
    for h in heads {
        needles.push((format!("{} head weight", h.owner().tag()), f32_bytes(h.weight.data())));
        // An all-zero bias would match any zero run in a fresh adapter.
        if h.bias.data().iter().any(|&v| v as f32 != 0.0) {
            needles.push((format!("{} head bias", h.owner().tag()), f32_bytes(h.bias.data())));
        }
    }
    let mut out = Vec::new();
    for (i, m) in t.messages.iter().enumerate() {
        for (what, bytes) in &needles {
            if windows(&m.payload, bytes.len()).contains(bytes.as_slice()) {
                out.push(format!("message {i}: contains the {what}"));
            }
        }
    }
    out
}

fn no_data_rows(t: &Transcript, sd_data: &[&Tensor], co_data: &[&Tensor]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, m) in t.messages.iter().enumerate() {
        for (owner, sets) in [("SD", sd_data), ("CO", co_data)] {
            for (split, x) in sets.iter().enumerate() {
                let win = windows(&m.payload, x.cols() * 4);
                if win.is_empty() {
                    continue;
                }
                let hits = (0..x.rows())
                    .filter(|&r| win.contains(f32_bytes(x.row(r)).as_slice()))
                    .count();
                if hits > 0 {
                    out.push(format!(
                        "message {i}: contains {hits} row(s) of {owner} dataset {split}"
                    ));
                }
            }
        }
    }
    out
}

fn counts_match(t: &Transcript) -> Vec<String> {
    let expected = expected_bundles(t.strategy, t.adv_rounds);
    let actual: Vec<_> = t.bundles().map(|m| (m.sender, m.receiver, m.round)).collect();
    let mut out = Vec::new();
    if actual.len() != expected.len() {
        out.push(format!(
            "{} bundles for {} with {} rounds, script sends {}",
            actual.len(),
            t.strategy.display(),
            t.adv_rounds,
            expected.len()
        ));
    }
    for (i, (a, e)) in actual.iter().zip(&expected).enumerate() {
        if a != e {
            out.push(format!(
                "bundle {i}: {}->{} round {}, script has {}->{} round {}",
                a.0.tag(),
                a.1.tag(),
                a.2,
                e.0.tag(),
                e.1.tag(),
                e.2
            ));
        }
    }
    let signals = t.count(MessageKind::RoundSignal);
    if signals != actual.len() {
        out.push(format!("{signals} round signals for {} bundles", actual.len()));
    }
    for pair in t.messages.chunks(2) {
        let ok = pair.len() == 2
            && pair[0].kind == MessageKind::AdapterBundle
            && pair[1].kind == MessageKind::RoundSignal
            && (pair[0].sender, pair[0].receiver, pair[0].round) == (pair[1].sender, pair[1].receiver, pair[1].round);
        if !ok {
            out.push("messages are not bundle/signal pairs".into());
            break;
        }
    }
    out
}

/// Checks a finished run's transcript:
/// (a) every message is a well-formed bundle or the signal announcing one,
/// (b) no head tensor's `f32` bytes occur in any payload,
/// (c) no dataset row's `f32` bytes occur in any payload,
/// (d) the messages are exactly those of the strategy's script.
pub fn audit_transcript(
    transcript: &Transcript,
    sd_data: &[&Tensor],
    co_data: &[&Tensor],
    heads: &[&ClassifierHead],
) -> AuditReport {
    AuditReport {
        checks: vec![
            check('a', "messages are well-formed bundles", well_formed(transcript)),
            check('b', "no head weights in payloads", no_head_bytes(transcript, heads)),
            check(
                'c',
                "no dataset rows in payloads",
                no_data_rows(transcript, sd_data, co_data),
            ),
            check(
                'd',
                "message counts match the strategy script",
                counts_match(transcript),
            ),
        ],
    }
}
