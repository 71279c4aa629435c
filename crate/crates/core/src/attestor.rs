//! On-device attestation application: report encoding and validation, and
//! self-attestation over the host's SRAM.
//!
//! [`AttestationContext`] models the isolated execution environment. Its
//! state is private and only changes through [`AttestationContext::app_sa`]
//! and the report/self-attestation operations it is built from.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};

use crate::quantize::QuantizedModel;
use crate::secure_channel::{self, Clock, DeviceId, Key, Nonce, NonceSource, ID_LEN, NONCE_LEN};
use crate::trace::{aggregate_bytes, sample_trace, FirmwareProfile, SramTrace};

/// Plaintext report length: id (4) + gamma (1) + timestamp (8) + nonce (16).
pub const PAYLOAD_LEN: usize = ID_LEN + 1 + 8 + NONCE_LEN;
pub const DEFAULT_EPSILON_MS: u64 = 5000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AttestError {
    #[error("no report key shared with peer {}", hex::encode(.0))]
    MissingPeerKey(DeviceId),
    #[error("SRAM trace of {got} bytes is shorter than the {need} bytes the model consumes")]
    SramLength { need: usize, got: usize },
    #[error("invalid context configuration: {0}")]
    Config(String),
}

/// Binary verdict: 0 safe, 1 unsafe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Safe,
    Unsafe,
}

impl Verdict {
    pub fn bit(self) -> u8 {
        match self {
            Verdict::Safe => 0,
            Verdict::Unsafe => 1,
        }
    }

    pub fn from_bit(b: u8) -> Option<Verdict> {
        match b {
            0 => Some(Verdict::Safe),
            1 => Some(Verdict::Unsafe),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPayload {
    pub id: DeviceId,
    pub gamma: Verdict,
    /// Generation time, milliseconds.
    pub t: u64,
    pub nonce: Nonce,
}

impl ReportPayload {
    pub fn to_bytes(&self) -> [u8; PAYLOAD_LEN] {
        let mut b = [0u8; PAYLOAD_LEN];
        b[..4].copy_from_slice(&self.id);
        b[4] = self.gamma.bit();
        b[5..13].copy_from_slice(&self.t.to_be_bytes());
        b[13..].copy_from_slice(&self.nonce);
        b
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != PAYLOAD_LEN {
            return None;
        }
        Some(ReportPayload {
            id: b[..4].try_into().ok()?,
            gamma: Verdict::from_bit(b[4])?,
            t: u64::from_be_bytes(b[5..13].try_into().ok()?),
            nonce: b[13..].try_into().ok()?,
        })
    }
}

/// Encrypted report: IV-prefixed AES-CBC of a [`ReportPayload`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationReport {
    pub ciphertext: Vec<u8>,
}

impl AttestationReport {
    pub fn to_hex(&self) -> String {
        hex::encode(&self.ciphertext)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum AppSaKind {
    AbortNoSenderId,
    AbortTrivialInput,
    AbortInconsistentId,
    AbortExpiredReport,
    SenderUnsafe,
    Completed,
}

impl AppSaKind {
    pub fn is_abort(self) -> bool {
        self != AppSaKind::Completed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppSaOutcome {
    pub kind: AppSaKind,
    pub report: Option<AttestationReport>,
    /// Validation outcome of the sender's report, when one was checked.
    pub delta_s: Option<Verdict>,
}

impl AppSaOutcome {
    fn abort(kind: AppSaKind) -> Self {
        AppSaOutcome {
            kind,
            report: None,
            delta_s: if kind == AppSaKind::SenderUnsafe { Some(Verdict::Unsafe) } else { None },
        }
    }

    /// Numbered exit point of the attestation state machine.
    pub fn algorithm_line(&self) -> u32 {
        match self.kind {
            AppSaKind::AbortNoSenderId => 5,
            AppSaKind::AbortTrivialInput => 7,
            AppSaKind::AbortInconsistentId => 13,
            AppSaKind::AbortExpiredReport => 15,
            AppSaKind::SenderUnsafe => 17,
            AppSaKind::Completed if self.report.is_none() => 20,
            AppSaKind::Completed => 29,
        }
    }
}

/// Instrumented call counts, for checking that aborts happen before any
/// expensive work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounters {
    pub inference: u64,
    pub encryption: u64,
    pub decryption: u64,
}

/// Access to the host device's current SRAM contents.
pub trait SramSource: Send {
    fn read(&mut self) -> SramTrace;
}

#[derive(Debug)]
struct SimState {
    profile: FirmwareProfile,
    device_seed: u64,
    time_step: u64,
}

/// Simulated SRAM that advances one time step per read. Clones share state,
/// so a harness can keep a handle to swap the running firmware.
#[derive(Debug, Clone)]
pub struct SimulatedSram {
    state: Arc<Mutex<SimState>>,
}

impl SimulatedSram {
    pub fn new(profile: FirmwareProfile, device_seed: u64, start_step: u64) -> Self {
        SimulatedSram {
            state: Arc::new(Mutex::new(SimState {
                profile,
                device_seed,
                time_step: start_step,
            })),
        }
    }

    pub fn swap_firmware(&self, profile: FirmwareProfile) {
        self.state.lock().expect("sram lock").profile = profile;
    }

    pub fn time_step(&self) -> u64 {
        self.state.lock().expect("sram lock").time_step
    }

    /// Identifier and mutation flag of the firmware currently running.
    pub fn running(&self) -> (String, bool) {
        let s = self.state.lock().expect("sram lock");
        (s.profile.firmware_id.clone(), s.profile.is_mutated())
    }
}

impl SramSource for SimulatedSram {
    fn read(&mut self) -> SramTrace {
        let mut s = self.state.lock().expect("sram lock");
        let t = sample_trace(&s.profile, s.device_seed, s.time_step);
        s.time_step += 1;
        t
    }
}

pub struct ContextConfig {
    pub self_id: DeviceId,
    pub qmodel: Arc<QuantizedModel>,
    pub t_opt: f64,
    pub peer_keys: BTreeMap<DeviceId, Key>,
    pub epsilon_ms: u64,
    pub clock: Clock,
    pub nonces: NonceSource,
    pub block: usize,
    pub sram: Box<dyn SramSource>,
}

pub struct AttestationContext {
    self_id: DeviceId,
    qmodel: Arc<QuantizedModel>,
    t_opt: f64,
    peer_keys: BTreeMap<DeviceId, Key>,
    epsilon_ms: u64,
    clock: Clock,
    nonces: NonceSource,
    block: usize,
    sram: Box<dyn SramSource>,
    issued: HashSet<Nonce>,
    counters: CallCounters,
}

impl std::fmt::Debug for AttestationContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttestationContext")
            .field("self_id", &hex::encode(self.self_id))
            .field("epsilon_ms", &self.epsilon_ms)
            .field("counters", &self.counters)
            .finish_non_exhaustive()
    }
}

enum Validation {
    Valid(Verdict),
    Abort(AppSaKind),
}

impl AttestationContext {
    pub fn new(cfg: ContextConfig) -> Result<Self, AttestError> {
        if cfg.epsilon_ms == 0 {
            return Err(AttestError::Config("expiry window must be positive".into()));
        }
        if cfg.block == 0 {
            return Err(AttestError::Config("block width must be positive".into()));
        }
        if cfg.t_opt.is_nan() || cfg.t_opt < 0.0 {
            return Err(AttestError::Config(format!("threshold {}", cfg.t_opt)));
        }
        Ok(AttestationContext {
            self_id: cfg.self_id,
            qmodel: cfg.qmodel,
            t_opt: cfg.t_opt,
            peer_keys: cfg.peer_keys,
            epsilon_ms: cfg.epsilon_ms,
            clock: cfg.clock,
            nonces: cfg.nonces,
            block: cfg.block,
            sram: cfg.sram,
            issued: HashSet::new(),
            counters: CallCounters::default(),
        })
    }

    pub fn self_id(&self) -> DeviceId {
        self.self_id
    }

    pub fn counters(&self) -> CallCounters {
        self.counters
    }

    pub fn epsilon_ms(&self) -> u64 {
        self.epsilon_ms
    }

    fn key_for(&self, peer: DeviceId) -> Result<Key, AttestError> {
        self.peer_keys.get(&peer).copied().ok_or(AttestError::MissingPeerKey(peer))
    }

    fn fresh_nonce(&mut self) -> Nonce {
        loop {
            let n = self.nonces.nonce();
            if self.issued.insert(n) {
                return n;
            }
        }
    }

    /// Evaluate the host's current SRAM: returns the verdict and the
    /// reconstruction error.
    pub fn self_attest(&mut self) -> Result<(Verdict, f64), AttestError> {
        let trace = self.sram.read();
        let used = self.qmodel.input_dim * self.block;
        if trace.bytes.len() < used {
            return Err(AttestError::SramLength {
                need: used,
                got: trace.bytes.len(),
            });
        }
        let s = aggregate_bytes(&trace.bytes, self.block, used).map_err(|e| AttestError::Config(e.to_string()))?;
        self.counters.inference += 1;
        let s_hat = self.qmodel.q_reconstruct(&s).map_err(|e| AttestError::Config(e.to_string()))?;
        let mse = s_hat.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64;
        let gamma = if mse < self.t_opt { Verdict::Safe } else { Verdict::Unsafe };
        Ok((gamma, mse))
    }

    /// Encrypt a fresh report carrying `gamma` for `peer`.
    pub fn encode_report(&mut self, peer: DeviceId, gamma: Verdict) -> Result<AttestationReport, AttestError> {
        let key = self.key_for(peer)?;
        let payload = ReportPayload {
            id: self.self_id,
            gamma,
            t: self.clock.now(),
            nonce: self.fresh_nonce(),
        };
        self.counters.encryption += 1;
        Ok(AttestationReport {
            ciphertext: secure_channel::enc(&payload.to_bytes(), &key, &mut self.nonces),
        })
    }

    /// Decrypt a report from `id_s` and run the identity, expiry and verdict
    /// checks in that order. The inner result is the sender's verdict, or
    /// the abort it triggers.
    pub fn decode_validate_report(&mut self, id_s: DeviceId, r_s: &[u8]) -> Result<Result<Verdict, AppSaKind>, AttestError> {
        Ok(match self.validate(id_s, r_s)? {
            Validation::Valid(v) => Ok(v),
            Validation::Abort(k) => Err(k),
        })
    }

    fn validate(&mut self, id_s: DeviceId, r_s: &[u8]) -> Result<Validation, AttestError> {
        let key = self.key_for(id_s)?;
        self.counters.decryption += 1;
        let payload = match secure_channel::dec(r_s, &key).ok().and_then(|p| ReportPayload::from_bytes(&p)) {
            Some(p) => p,
            None => return Ok(Validation::Abort(AppSaKind::AbortInconsistentId)),
        };
        if payload.id != id_s {
            return Ok(Validation::Abort(AppSaKind::AbortInconsistentId));
        }
        if self.clock.now().saturating_sub(payload.t) > self.epsilon_ms {
            return Ok(Validation::Abort(AppSaKind::AbortExpiredReport));
        }
        if payload.gamma == Verdict::Unsafe {
            return Ok(Validation::Abort(AppSaKind::SenderUnsafe));
        }
        Ok(Validation::Valid(payload.gamma))
    }

    /// The attestation application. `id_s` names the peer whose key is
    /// used, `r_s` is the peer's report to validate and `a_self` requests a
    /// fresh report of this device's own state.
    pub fn app_sa(&mut self, id_s: Option<DeviceId>, r_s: Option<&[u8]>, a_self: bool) -> Result<AppSaOutcome, AttestError> {
        let Some(id_s) = id_s else {
            return Ok(AppSaOutcome::abort(AppSaKind::AbortNoSenderId));
        };
        if r_s.is_none() && !a_self {
            return Ok(AppSaOutcome::abort(AppSaKind::AbortTrivialInput));
        }
        // Fail on a missing key before doing any work.
        self.key_for(id_s)?;
        let delta_s = match r_s {
            None => None,
            Some(r) => match self.validate(id_s, r)? {
                Validation::Valid(v) => Some(v),
                Validation::Abort(k) => return Ok(AppSaOutcome::abort(k)),
            },
        };
        if !a_self {
            return Ok(AppSaOutcome {
                kind: AppSaKind::Completed,
                report: None,
                delta_s,
            });
        }
        let (gamma, _) = self.self_attest()?;
        let report = self.encode_report(id_s, gamma)?;
        Ok(AppSaOutcome {
            kind: AppSaKind::Completed,
            report: Some(report),
            delta_s,
        })
    }
}
