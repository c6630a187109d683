use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ClassifierHead, Party};
use crate::data::{read_csv, write_csv, SensitiveLabel, TaskLabel};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraAdapterStack, StackMeta};
use crate::tensor::Tensor;
use crate::train::{Strategy, TrainConfig, TrainedArtifacts};

use super::transcript::Transcript;
use super::transport::FileChannel;
use super::{co_party, preflight, sd_party, Aborted, CoContext, CoOutcome, ProtocolRun, SdContext};

/// File names inside an exchange directory. Each party reads only its own
/// subdirectory plus the shared backbone and config.
#[derive(Debug, Clone)]
pub struct ExchangeLayout {
    pub dir: PathBuf,
}

impl ExchangeLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn backbone(&self) -> PathBuf {
        self.dir.join("backbone.fbkb")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("train_config.json")
    }

    pub fn transcript(&self) -> PathBuf {
        self.dir.join("transcript.json")
    }

    pub fn party_dir(&self, role: Party) -> PathBuf {
        self.dir.join(role.tag().to_lowercase())
    }

    pub fn train_data(&self, role: Party) -> PathBuf {
        self.party_dir(role).join("train.csv")
    }

    pub fn sd_artifacts(&self) -> PathBuf {
        self.party_dir(Party::SolutionDeveloper).join("artifacts.json")
    }

    pub fn co_outcome(&self) -> PathBuf {
        self.party_dir(Party::ComplianceOfficer).join("outcome.json")
    }
}

#[derive(Debug, Clone)]
pub struct DistributedOptions {
    /// The `fairlora` binary; each party is `exe party ...`.
    pub exe: PathBuf,
    pub timeout: Duration,
}

/// Writes the shared backbone and config and each party's training data.
/// The directory must be empty or absent.
pub fn prepare_exchange_dir(sd: &SdContext, co: &CoContext, cfg: &TrainConfig, dir: &Path) -> Result<ExchangeLayout> {
    std::fs::create_dir_all(dir)?;
    if std::fs::read_dir(dir)?.next().is_some() {
        return Err(Error::config(format!(
            "exchange directory {} is not empty",
            dir.display()
        )));
    }
    let layout = ExchangeLayout::new(dir);
    sd.backbone().save_checkpoint(&layout.backbone())?;
    std::fs::write(layout.config(), serde_json::to_vec_pretty(cfg)?)?;
    for role in [Party::SolutionDeveloper, Party::ComplianceOfficer] {
        std::fs::create_dir_all(layout.party_dir(role))?;
    }
    write_csv(sd.train(), &layout.train_data(Party::SolutionDeveloper))?;
    write_csv(co.train(), &layout.train_data(Party::ComplianceOfficer))?;
    Ok(layout)
}

pub fn party_command(
    exe: &Path,
    role: Party,
    strategy: Strategy,
    dir: &Path,
    backbone_hash: &str,
    timeout: Duration,
) -> Command {
    let mut cmd = Command::new(exe);
    cmd.arg("party")
        .args(["--role", &role.tag().to_lowercase()])
        .args(["--strategy", strategy.name()])
        .arg("--dir")
        .arg(dir)
        .args(["--backbone-sha256", backbone_hash])
        .args(["--timeout-ms", &timeout.as_millis().to_string()]);
    cmd
}

/// One party's process body. SD persists the transcript after every message
/// so a run that dies midway still leaves its log behind.
pub fn run_party(role: Party, strategy: Strategy, dir: &Path, backbone_hash: &str, timeout: Duration) -> Result<()> {
    let layout = ExchangeLayout::new(dir);
    let backbone = Backbone::load_checkpoint(&layout.backbone())?;
    let actual = backbone.checkpoint_hash();
    if actual != backbone_hash {
        return Err(Error::Protocol(format!(
            "backbone hash mismatch at {}: expected {backbone_hash}, loaded {actual}",
            role.tag()
        )));
    }
    let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(layout.config())?)?;
    cfg.validate()?;
    let mut ch = FileChannel::new(dir, role, timeout);
    match role {
        Party::SolutionDeveloper => {
            let ctx = SdContext::new(backbone, read_csv::<TaskLabel>(&layout.train_data(role))?)?;
            let mut transcript = Transcript::new(strategy, cfg.adv_rounds, actual);
            let path = layout.transcript();
            transcript.save(&path)?;
            let art = sd_party(strategy, &ctx, &cfg, &mut ch, &mut transcript, Some(&path))?;
            transcript.save(&path)?;
            write_json(&layout.sd_artifacts(), &SdFile::from(&art))
        }
        Party::ComplianceOfficer => {
            let ctx = CoContext::new(backbone, read_csv::<SensitiveLabel>(&layout.train_data(role))?)?;
            let outcome = co_party(strategy, &ctx, &cfg, &mut ch)?;
            write_json(&layout.co_outcome(), &CoFile::from(&outcome))
        }
    }
}

/// Runs SD and CO as two processes exchanging files in `dir`. Produces the
/// same artifacts, bit for bit, as [`super::run_protocol`].
pub fn run_distributed(
    strategy: Strategy,
    sd: &SdContext,
    co: &CoContext,
    cfg: &TrainConfig,
    dir: &Path,
    opts: &DistributedOptions,
) -> Result<ProtocolRun, Aborted> {
    let transcript = preflight(sd, co, cfg, strategy)?;
    let hash = transcript.backbone_hash.clone();
    let layout = match prepare_exchange_dir(sd, co, cfg, dir) {
        Ok(l) => l,
        Err(error) => return Err(Aborted { error, transcript }),
    };
    let spawn = |role| {
        party_command(&opts.exe, role, strategy, dir, &hash, opts.timeout)
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
    };
    let result = (|| -> Result<()> {
        let co_child = spawn(Party::ComplianceOfficer)?;
        let sd_child = spawn(Party::SolutionDeveloper)?;
        let sd_out = sd_child.wait_with_output()?;
        let co_out = co_child.wait_with_output()?;
        for (role, out) in [(Party::SolutionDeveloper, sd_out), (Party::ComplianceOfficer, co_out)] {
            if !out.status.success() {
                return Err(Error::Protocol(format!(
                    "{} process failed ({}): {}",
                    role.tag(),
                    out.status,
                    String::from_utf8_lossy(&out.stderr).trim()
                )));
            }
        }
        Ok(())
    })();
    let logged = Transcript::load(&layout.transcript()).unwrap_or(transcript);
    if let Err(error) = result {
        return Err(Aborted {
            error,
            transcript: logged,
        });
    }
    let outputs =
        read_sd_artifacts(&layout.sd_artifacts()).and_then(|a| Ok((a, read_co_outcome(&layout.co_outcome())?)));
    match outputs {
        Ok((artifacts, co)) => Ok(ProtocolRun {
            artifacts,
            co,
            transcript: logged,
        }),
        Err(error) => Err(Aborted {
            error,
            transcript: logged,
        }),
    }
}

pub fn read_sd_artifacts(path: &Path) -> Result<TrainedArtifacts> {
    let file: SdFile = serde_json::from_slice(&std::fs::read(path)?)?;
    file.into_artifacts()
}

pub fn read_co_outcome(path: &Path) -> Result<CoOutcome> {
    let file: CoFile = serde_json::from_slice(&std::fs::read(path)?)?;
    file.into_outcome()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(value)?)?;
    Ok(())
}

// Exact f64 images of the artifacts: tensors as hex of their little-endian bits.

#[derive(Serialize, Deserialize)]
struct TensorBits {
    rows: usize,
    cols: usize,
    bits: String,
}

impl From<&Tensor> for TensorBits {
    fn from(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
        Self {
            rows: t.rows(),
            cols: t.cols(),
            bits: hex::encode(bytes),
        }
    }
}

impl TensorBits {
    fn into_tensor(self) -> Result<Tensor> {
        let bytes = hex::decode(&self.bits).map_err(|e| Error::format(0, format!("tensor bits: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::format(bytes.len(), "tensor bits are not whole f64 values"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        Tensor::new(self.rows, self.cols, data)
    }
}

#[derive(Serialize, Deserialize)]
struct StackBits {
    rank: usize,
    alpha: f64,
    seed: u64,
    strategy: String,
    adapters: Vec<(String, TensorBits, TensorBits)>,
}

impl From<&LoraAdapterStack> for StackBits {
    fn from(s: &LoraAdapterStack) -> Self {
        let m = s.meta();
        Self {
            rank: m.rank,
            alpha: m.alpha,
            seed: m.seed,
            strategy: m.strategy.clone(),
            adapters: s
                .iter()
                .map(|a| (a.layer_id.clone(), (&a.a).into(), (&a.b).into()))
                .collect(),
        }
    }
}

impl StackBits {
    fn into_stack(self) -> Result<LoraAdapterStack> {
        let mut adapters = Vec::new();
        for (layer_id, a, b) in self.adapters {
            adapters.push(LoraAdapter {
                layer_id,
                a: a.into_tensor()?,
                b: b.into_tensor()?,
                rank: self.rank,
                alpha: self.alpha,
            });
        }
        LoraAdapterStack::from_adapters(
            adapters,
            StackMeta {
                rank: self.rank,
                alpha: self.alpha,
                seed: self.seed,
                strategy: self.strategy,
            },
        )
    }
}

#[derive(Serialize, Deserialize)]
struct HeadBits {
    owner: Party,
    weight: TensorBits,
    bias: TensorBits,
}

impl From<&ClassifierHead> for HeadBits {
    fn from(h: &ClassifierHead) -> Self {
        Self {
            owner: h.owner(),
            weight: (&h.weight).into(),
            bias: (&h.bias).into(),
        }
    }
}

impl HeadBits {
    fn into_head(self) -> Result<ClassifierHead> {
        ClassifierHead::from_parts(self.weight.into_tensor()?, self.bias.into_tensor()?, self.owner)
    }
}

#[derive(Serialize, Deserialize)]
struct SdFile {
    strategy: Strategy,
    task_stack: StackBits,
    sensitive_stack: Option<StackBits>,
    task_head: HeadBits,
    loss_trace: Vec<f64>,
    sensitive_loss_trace: Vec<f64>,
}

impl From<&TrainedArtifacts> for SdFile {
    fn from(a: &TrainedArtifacts) -> Self {
        Self {
            strategy: a.strategy,
            task_stack: (&a.task_stack).into(),
            sensitive_stack: a.sensitive_stack.as_ref().map(Into::into),
            task_head: (&a.task_head).into(),
            loss_trace: a.loss_trace.clone(),
            sensitive_loss_trace: a.sensitive_loss_trace.clone(),
        }
    }
}

impl SdFile {
    fn into_artifacts(self) -> Result<TrainedArtifacts> {
        Ok(TrainedArtifacts {
            strategy: self.strategy,
            task_stack: self.task_stack.into_stack()?,
            sensitive_stack: self.sensitive_stack.map(StackBits::into_stack).transpose()?,
            task_head: self.task_head.into_head()?,
            sensitive_head: None,
            loss_trace: self.loss_trace,
            sensitive_loss_trace: self.sensitive_loss_trace,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CoFile {
    sensitive_stack: Option<StackBits>,
    sensitive_head: Option<HeadBits>,
    loss_trace: Vec<f64>,
}

impl From<&CoOutcome> for CoFile {
    fn from(o: &CoOutcome) -> Self {
        Self {
            sensitive_stack: o.sensitive_stack.as_ref().map(Into::into),
            sensitive_head: o.sensitive_head.as_ref().map(Into::into),
            loss_trace: o.loss_trace.clone(),
        }
    }
}

impl CoFile {
    fn into_outcome(self) -> Result<CoOutcome> {
        Ok(CoOutcome {
            sensitive_stack: self.sensitive_stack.map(StackBits::into_stack).transpose()?,
            sensitive_head: self.sensitive_head.map(HeadBits::into_head).transpose()?,
            loss_trace: self.loss_trace,
        })
    }
}
