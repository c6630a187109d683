use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use crate::backbone::Party;
use crate::bundle::sha256_hex;
use crate::error::{Error, Result};

use super::transcript::{MessageKind, RoundSignal};

/// Raw byte channel between the two parties. Each call moves one bundle.
pub trait Channel {
    fn me(&self) -> Party;
    fn send(&mut self, round: usize, bundle: &[u8]) -> Result<()>;
    fn recv(&mut self, round: usize) -> Result<Vec<u8>>;
}

pub(crate) fn peer(p: Party) -> Party {
    match p {
        Party::SolutionDeveloper => Party::ComplianceOfficer,
        Party::ComplianceOfficer => Party::SolutionDeveloper,
    }
}

/// Threads in one process, connected by a pair of queues.
pub struct MemoryChannel {
    me: Party,
    tx: Sender<(usize, Vec<u8>)>,
    rx: Receiver<(usize, Vec<u8>)>,
    timeout: Duration,
}

impl MemoryChannel {
    /// Returns the SD end and the CO end.
    pub fn pair(timeout: Duration) -> (Self, Self) {
        let (to_co, from_sd) = channel();
        let (to_sd, from_co) = channel();
        (
            Self {
                me: Party::SolutionDeveloper,
                tx: to_co,
                rx: from_co,
                timeout,
            },
            Self {
                me: Party::ComplianceOfficer,
                tx: to_sd,
                rx: from_sd,
                timeout,
            },
        )
    }
}

impl Channel for MemoryChannel {
    fn me(&self) -> Party {
        self.me
    }

    fn send(&mut self, round: usize, bundle: &[u8]) -> Result<()> {
        self.tx
            .send((round, bundle.to_vec()))
            .map_err(|_| Error::Protocol(format!("{} hung up before round {round}", peer(self.me).tag())))
    }

    fn recv(&mut self, round: usize) -> Result<Vec<u8>> {
        let other = peer(self.me).tag();
        match self.rx.recv_timeout(self.timeout) {
            Ok((r, bytes)) if r == round => Ok(bytes),
            Ok((r, _)) => Err(Error::Protocol(format!(
                "expected round {round} from {other}, got round {r}"
            ))),
            Err(RecvTimeoutError::Timeout) => Err(Error::Protocol(format!(
                "timed out after {:?} waiting for {other} in round {round}",
                self.timeout
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Protocol(format!("{other} hung up before round {round}")))
            }
        }
    }
}

/// Two processes sharing a directory. A sender writes the bundle, then a
/// signal file naming its hash; the receiver polls for the signal.
pub struct FileChannel {
    dir: PathBuf,
    me: Party,
    timeout: Duration,
    poll: Duration,
}

pub const POLL_INTERVAL: Duration = Duration::from_millis(50);

/// `r{round}_{from}_to_{to}.flra`
pub fn bundle_path(dir: &Path, round: usize, from: Party, to: Party) -> PathBuf {
    dir.join(format!(
        "r{round}_{}_to_{}.flra",
        from.tag().to_lowercase(),
        to.tag().to_lowercase()
    ))
}

pub fn signal_path(dir: &Path, round: usize, from: Party, to: Party) -> PathBuf {
    bundle_path(dir, round, from, to).with_extension("signal.json")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl FileChannel {
    pub fn new(dir: impl Into<PathBuf>, me: Party, timeout: Duration) -> Self {
        Self {
            dir: dir.into(),
            me,
            timeout,
            poll: POLL_INTERVAL,
        }
    }
}

impl Channel for FileChannel {
    fn me(&self) -> Party {
        self.me
    }

    fn send(&mut self, round: usize, bundle: &[u8]) -> Result<()> {
        let to = peer(self.me);
        write_atomic(&bundle_path(&self.dir, round, self.me, to), bundle)?;
        let signal = RoundSignal::for_bundle(round, bundle);
        write_atomic(&signal_path(&self.dir, round, self.me, to), &signal.to_line())
    }

    fn recv(&mut self, round: usize) -> Result<Vec<u8>> {
        let from = peer(self.me);
        let sig_path = signal_path(&self.dir, round, from, self.me);
        let start = Instant::now();
        while !sig_path.exists() {
            if start.elapsed() >= self.timeout {
                return Err(Error::Protocol(format!(
                    "timed out after {:?} waiting for {} in round {round}",
                    self.timeout,
                    from.tag()
                )));
            }
            std::thread::sleep(self.poll);
        }
        let signal = RoundSignal::parse(&std::fs::read(&sig_path)?)
            .map_err(|e| Error::Protocol(format!("unreadable round signal {}: {e}", sig_path.display())))?;
        if signal.round != round || signal.kind != MessageKind::AdapterBundle {
            return Err(Error::Protocol(format!(
                "signal {} announces round {} {:?}",
                sig_path.display(),
                signal.round,
                signal.kind
            )));
        }
        let bytes = std::fs::read(bundle_path(&self.dir, round, from, self.me))?;
        let actual = sha256_hex(&bytes);
        if actual != signal.sha256 {
            return Err(Error::Protocol(format!(
                "bundle hash {actual} does not match signalled {}",
                signal.sha256
            )));
        }
        Ok(bytes)
    }
}
