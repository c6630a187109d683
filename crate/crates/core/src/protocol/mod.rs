//! The two-party exchange.
//!
//! SD and CO each run in their own context and share nothing but bundle
//! bytes. [`run_protocol`] drives both in one process over queues;
//! [`run_distributed`] runs them as two OS processes over a directory.
//! SD records every message in a [`Transcript`], which [`audit_transcript`]
//! checks afterwards.
//!
//! The contexts are typed so the wrong labels cannot be put in them:
//!
//! ```compile_fail
//! use fairlora::data::{LabeledDataset, SensitiveLabel};
//! use fairlora::protocol::SdContext;
//! fn leak(bb: fairlora::backbone::Backbone, g: LabeledDataset<SensitiveLabel>) {
//!     let _ = SdContext::new(bb, g);
//! }
//! ```
//!
//! ```compile_fail
//! use fairlora::data::{LabeledDataset, TaskLabel};
//! use fairlora::protocol::CoContext;
//! fn leak(bb: fairlora::backbone::Backbone, y: LabeledDataset<TaskLabel>) {
//!     let _ = CoContext::new(bb, y);
//! }
//! ```

mod audit;
mod distributed;
mod transcript;
mod transport;

use std::fmt;
use std::path::Path;
use std::time::Duration;

use crate::backbone::{Backbone, ClassifierHead, Party};
use crate::bundle::{decode_bundle, encode_bundle};
use crate::data::{LabeledDataset, SensitiveLabel, TaskLabel};
use crate::error::{Error, Result};
use crate::lora::LoraAdapterStack;
use crate::train::{
    adv_sensitive_phase, adv_task_phase, train_erm, train_orth, train_sensitive_erm, train_unl, AdvSensitiveState,
    AdvTaskState, Strategy, TrainConfig, TrainedArtifacts,
};

pub use audit::{audit_transcript, expected_bundles, AuditCheck, AuditReport};
pub use distributed::{
    party_command, prepare_exchange_dir, read_co_outcome, read_sd_artifacts, run_distributed, run_party,
    DistributedOptions, ExchangeLayout,
};
pub use transcript::{Message, MessageKind, RoundSignal, Transcript};
pub use transport::{bundle_path, signal_path, Channel, FileChannel, MemoryChannel, POLL_INTERVAL};

/// What the solution developer holds: the backbone and `y`-labelled data.
#[derive(Debug, Clone)]
pub struct SdContext {
    backbone: Backbone,
    train: LabeledDataset<TaskLabel>,
}

/// What the compliance officer holds: the backbone and `g`-labelled data.
#[derive(Debug, Clone)]
pub struct CoContext {
    backbone: Backbone,
    train: LabeledDataset<SensitiveLabel>,
}

fn check_width(backbone: &Backbone, features: usize) -> Result<()> {
    if backbone.config().input_dim != features {
        return Err(Error::shape(format!(
            "dataset has {features} features, backbone expects {}",
            backbone.config().input_dim
        )));
    }
    Ok(())
}

impl SdContext {
    pub fn new(backbone: Backbone, train: LabeledDataset<TaskLabel>) -> Result<Self> {
        check_width(&backbone, train.features())?;
        Ok(Self { backbone, train })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn train(&self) -> &LabeledDataset<TaskLabel> {
        &self.train
    }
}

impl CoContext {
    pub fn new(backbone: Backbone, train: LabeledDataset<SensitiveLabel>) -> Result<Self> {
        check_width(&backbone, train.features())?;
        Ok(Self { backbone, train })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn train(&self) -> &LabeledDataset<SensitiveLabel> {
        &self.train
    }
}

/// What CO keeps at the end of a run. None of it is ever sent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoOutcome {
    pub sensitive_stack: Option<LoraAdapterStack>,
    pub sensitive_head: Option<ClassifierHead>,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    /// Final model state at SD.
    pub artifacts: TrainedArtifacts,
    pub co: CoOutcome,
    pub transcript: Transcript,
}

/// A failed run with whatever the transcript held when it stopped.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub transcript: Transcript,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} messages exchanged)", self.error, self.transcript.len())
    }
}

impl std::error::Error for Aborted {}

impl From<Aborted> for Error {
    fn from(a: Aborted) -> Self {
        a.error
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    /// How long a party waits for its counterpart before aborting.
    pub timeout: Duration,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(300),
        }
    }
}

/// SD's end of the channel. Every message in either direction is logged.
struct SdLink<'a> {
    ch: &'a mut dyn Channel,
    transcript: &'a mut Transcript,
    persist: Option<&'a Path>,
}

impl SdLink<'_> {
    fn log(&mut self, sender: Party, round: usize, bytes: Vec<u8>) -> Result<()> {
        let receiver = transport::peer(sender);
        self.transcript.record_bundle(sender, receiver, round, bytes);
        if let Some(path) = self.persist {
            self.transcript.save(path)?;
        }
        Ok(())
    }

    fn send(&mut self, round: usize, stack: &LoraAdapterStack) -> Result<()> {
        let bytes = encode_bundle(stack);
        self.ch.send(round, &bytes)?;
        self.log(Party::SolutionDeveloper, round, bytes)
    }

    fn recv(&mut self, round: usize) -> Result<LoraAdapterStack> {
        let bytes = self.ch.recv(round)?;
        let decoded = decode_bundle(&bytes);
        self.log(Party::ComplianceOfficer, round, bytes)?;
        decoded.map_err(|e| Error::Protocol(format!("malformed bundle from CO in round {round}: {e}")))
    }
}

fn co_recv(ch: &mut dyn Channel, round: usize) -> Result<LoraAdapterStack> {
    decode_bundle(&ch.recv(round)?)
        .map_err(|e| Error::Protocol(format!("malformed bundle from SD in round {round}: {e}")))
}

/// SD's side of a strategy's exchange script.
///
/// Messages are appended to `transcript` as they happen; with `persist` set,
/// the transcript is also rewritten there after every message.
pub fn sd_party(
    strategy: Strategy,
    ctx: &SdContext,
    cfg: &TrainConfig,
    ch: &mut dyn Channel,
    transcript: &mut Transcript,
    persist: Option<&Path>,
) -> Result<TrainedArtifacts> {
    let base = &ctx.backbone;
    let mut link = SdLink {
        ch,
        transcript,
        persist,
    };
    match strategy {
        Strategy::Erm => train_erm(base, &ctx.train, cfg),
        Strategy::Unl => {
            let sen = link.recv(0)?;
            train_unl(base, &sen, &ctx.train, cfg)
        }
        Strategy::Orth => {
            let sen = link.recv(0)?;
            train_orth(base, &sen, &ctx.train, cfg)
        }
        Strategy::Adv => {
            let mut task = AdvTaskState::fresh(base, cfg)?;
            let mut latest = None;
            for round in 0..cfg.adv_rounds {
                link.send(round, &task.stack)?;
                let sen = link.recv(round)?;
                adv_task_phase(base, &sen, &mut task, &ctx.train, cfg, round)?;
                latest = Some(sen);
            }
            Ok(TrainedArtifacts {
                strategy: Strategy::Adv,
                task_stack: task.stack,
                sensitive_stack: latest,
                task_head: task.head,
                sensitive_head: None,
                loss_trace: task.trace,
                sensitive_loss_trace: Vec::new(),
            })
        }
    }
}

/// CO's side of a strategy's exchange script.
pub fn co_party(strategy: Strategy, ctx: &CoContext, cfg: &TrainConfig, ch: &mut dyn Channel) -> Result<CoOutcome> {
    let base = &ctx.backbone;
    match strategy {
        Strategy::Erm => Ok(CoOutcome::default()),
        Strategy::Unl | Strategy::Orth => {
            let (stack, head, trace) = train_sensitive_erm(base, &ctx.train, cfg)?;
            ch.send(0, &encode_bundle(&stack))?;
            Ok(CoOutcome {
                sensitive_stack: Some(stack),
                sensitive_head: Some(head),
                loss_trace: trace,
            })
        }
        Strategy::Adv => {
            let mut sen = AdvSensitiveState::fresh(base, cfg)?;
            for round in 0..cfg.adv_rounds {
                let task = co_recv(ch, round)?;
                adv_sensitive_phase(base, &task, &mut sen, &ctx.train, cfg, round)?;
                ch.send(round, &encode_bundle(&sen.stack))?;
            }
            Ok(CoOutcome {
                sensitive_stack: Some(sen.stack),
                sensitive_head: Some(sen.head),
                loss_trace: sen.trace,
            })
        }
    }
}

fn preflight(sd: &SdContext, co: &CoContext, cfg: &TrainConfig, strategy: Strategy) -> Result<Transcript, Aborted> {
    let sd_hash = sd.backbone.checkpoint_hash();
    let transcript = Transcript::new(strategy, cfg.adv_rounds, sd_hash.clone());
    let co_hash = co.backbone.checkpoint_hash();
    let error = match cfg.validate() {
        Err(e) => e,
        Ok(()) if co_hash != sd_hash => Error::Protocol(format!("backbone hash mismatch: SD {sd_hash}, CO {co_hash}")),
        Ok(()) => return Ok(transcript),
    };
    Err(Aborted { error, transcript })
}

fn is_hang_up(e: &Error) -> bool {
    matches!(e, Error::Protocol(m) if m.contains("hung up"))
}

/// Runs both parties in this process, CO on its own thread.
pub fn run_protocol(
    strategy: Strategy,
    sd: &SdContext,
    co: &CoContext,
    cfg: &TrainConfig,
) -> Result<ProtocolRun, Aborted> {
    run_protocol_with(strategy, sd, co, cfg, &ProtocolOptions::default())
}

pub fn run_protocol_with(
    strategy: Strategy,
    sd: &SdContext,
    co: &CoContext,
    cfg: &TrainConfig,
    opts: &ProtocolOptions,
) -> Result<ProtocolRun, Aborted> {
    let mut transcript = preflight(sd, co, cfg, strategy)?;
    let (mut sd_ch, mut co_ch) = MemoryChannel::pair(opts.timeout);
    let (sd_res, co_res) = std::thread::scope(|s| {
        let co_thread = s.spawn(move || co_party(strategy, co, cfg, &mut co_ch));
        let sd_res = sd_party(strategy, sd, cfg, &mut sd_ch, &mut transcript, None);
        // Dropping SD's end unblocks a CO still waiting for a message.
        drop(sd_ch);
        let co_res = co_thread
            .join()
            .unwrap_or_else(|_| Err(Error::Protocol("CO thread panicked".into())));
        (sd_res, co_res)
    });
    match (sd_res, co_res) {
        (Ok(artifacts), Ok(co)) => Ok(ProtocolRun {
            artifacts,
            co,
            transcript,
        }),
        (Err(error), Ok(_)) | (Ok(_), Err(error)) => Err(Aborted { error, transcript }),
        // One side's failure surfaces at the other as a hang-up; report the cause.
        (Err(sd_err), Err(co_err)) => Err(Aborted {
            error: if is_hang_up(&sd_err) { co_err } else { sd_err },
            transcript,
        }),
    }
}
