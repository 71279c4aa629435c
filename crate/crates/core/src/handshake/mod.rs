//! Four-message mutual authentication and attestation handshake.
//!
//! Wire triple: `(sender_id, m, tag)` with `m = Enc(plaintext, K)` and
//! `tag = HMAC(sender_id || m, K)`. Plaintexts (big-endian, fixed widths):
//!
//! ```text
//! m1  initiator -> responder  ID_i(4) | N1(16) | R_i(48)
//! m2  responder -> initiator  ID_j(4) | N1(16) | N2(16) | R_j(48)
//! m3  initiator -> responder  ID_i(4) | N2(16) | N3(16)
//! m4  responder -> initiator  ID_j(4) | N3(16) | N4(16)
//! ```
//!
//! Each side remembers the last nonce it generated and requires its echo in
//! the next inbound message. Any failed check ends the session silently.

pub mod network;
pub mod script;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::attestor::{
    AppSaKind, AttestationContext, ContextConfig, SimulatedSram, SramSource, Verdict, PAYLOAD_LEN,
};
use crate::quantize::QuantizedModel;
use crate::secure_channel::{self, Clock, DeviceId, Key, KeyStore, Nonce, NonceSource, Tag, ID_LEN, NONCE_LEN, TAG_LEN};

/// Ciphertext length of an attestation report.
pub const REPORT_LEN: usize = 16 + (PAYLOAD_LEN / 16 + 1) * 16;
pub const M1_LEN: usize = ID_LEN + NONCE_LEN + REPORT_LEN;
pub const M2_LEN: usize = ID_LEN + 2 * NONCE_LEN + REPORT_LEN;
pub const M3_LEN: usize = ID_LEN + 2 * NONCE_LEN;
pub const M4_LEN: usize = M3_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HandshakeMessage {
    pub sender_id: DeviceId,
    pub m: Vec<u8>,
    pub tag: Tag,
}

impl HandshakeMessage {
    /// Seal `plaintext` from `sender` under channel key `key`.
    pub fn seal(sender: DeviceId, plaintext: &[u8], key: &Key, rng: &mut NonceSource) -> Self {
        let m = secure_channel::enc(plaintext, key, rng);
        let tag = secure_channel::hmac(&tagged(&sender, &m), key);
        HandshakeMessage { sender_id: sender, m, tag }
    }

    /// `sender_id || m || tag`.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity(ID_LEN + self.m.len() + TAG_LEN);
        w.extend_from_slice(&self.sender_id);
        w.extend_from_slice(&self.m);
        w.extend_from_slice(&self.tag);
        w
    }

    pub fn from_wire(w: &[u8]) -> Option<Self> {
        if w.len() < ID_LEN + TAG_LEN {
            return None;
        }
        let (id, rest) = w.split_at(ID_LEN);
        let (m, tag) = rest.split_at(rest.len() - TAG_LEN);
        Some(HandshakeMessage {
            sender_id: id.try_into().ok()?,
            m: m.to_vec(),
            tag: tag.try_into().ok()?,
        })
    }

    pub fn wire_len(&self) -> usize {
        ID_LEN + self.m.len() + TAG_LEN
    }
}

fn tagged(sender: &DeviceId, m: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(ID_LEN + m.len());
    v.extend_from_slice(sender);
    v.extend_from_slice(m);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Initiator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    Setup,
    BadHmac,
    BadNonceEcho,
    BadLayout,
    ReportExpired,
    ReportInconsistentId,
    PeerUnsafe,
    ReplayedNonce,
}

impl FailReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailReason::Setup => "setup",
            FailReason::BadHmac => "bad_hmac",
            FailReason::BadNonceEcho => "bad_nonce_echo",
            FailReason::BadLayout => "bad_layout",
            FailReason::ReportExpired => "report_expired",
            FailReason::ReportInconsistentId => "report_inconsistent_id",
            FailReason::PeerUnsafe => "peer_unsafe",
            FailReason::ReplayedNonce => "replayed_nonce",
        }
    }
}

impl fmt::Display for FailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Phase {
    Start,
    Sent1,
    Sent2,
    Sent3,
    Sent4,
    Done,
    Failed(FailReason),
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub role: Role,
    pub phase: Phase,
    /// Peer the session is bound to; for a responder, set by the first message.
    pub peer: Option<DeviceId>,
    /// `nonces[k]` is `N(k+1)` once generated or received.
    pub nonces: [Option<Nonce>; 4],
    pub peer_delta: Option<Verdict>,
    pub transcript: Vec<(Direction, HandshakeMessage)>,
}

impl SessionState {
    pub fn new(role: Role) -> Self {
        SessionState {
            role,
            phase: Phase::Start,
            peer: None,
            nonces: [None; 4],
            peer_delta: None,
            transcript: Vec::new(),
        }
    }

    fn fail(&mut self, reason: FailReason) -> Option<HandshakeMessage> {
        self.phase = Phase::Failed(reason);
        None
    }

    fn send(&mut self, msg: HandshakeMessage, phase: Phase) -> Option<HandshakeMessage> {
        self.transcript.push((Direction::Out, msg.clone()));
        self.phase = phase;
        Some(msg)
    }
}

/// Everything needed to stand up a simulated device.
pub struct DeviceConfig {
    pub id: DeviceId,
    pub qmodel: Arc<QuantizedModel>,
    pub t_opt: f64,
    pub epsilon_ms: u64,
    pub block: usize,
    pub clock: Clock,
    pub seed: u64,
    pub sram: SimulatedSram,
}

/// A party: untrusted-world channel state around an isolated attestation
/// context.
pub struct Device {
    pub id: DeviceId,
    ctx: AttestationContext,
    outer_keys: BTreeMap<DeviceId, Key>,
    nonces: NonceSource,
    sram: Option<SimulatedSram>,
    provisioned_firmware: Option<String>,
    /// A compromised host can substitute a previously captured report for
    /// the one its attestation context produces.
    pub report_override: Option<Vec<u8>>,
    /// Responder-side cache of initiator nonces; `None` disables it.
    pub seen_nonces: Option<HashSet<Nonce>>,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device").field("id", &hex::encode(self.id)).finish_non_exhaustive()
    }
}

impl Device {
    pub fn new(cfg: DeviceConfig, keys: &KeyStore) -> Result<Self, crate::attestor::AttestError> {
        let ctx = AttestationContext::new(ContextConfig {
            self_id: cfg.id,
            qmodel: cfg.qmodel,
            t_opt: cfg.t_opt,
            peer_keys: keys.inner_keys_for(cfg.id),
            epsilon_ms: cfg.epsilon_ms,
            clock: cfg.clock,
            nonces: NonceSource::seeded(crate::rng::derive(cfg.seed, crate::rng::tag("tee"))),
            block: cfg.block,
            sram: Box::new(cfg.sram.clone()) as Box<dyn SramSource>,
        })?;
        let provisioned_firmware = Some(cfg.sram.running().0);
        Ok(Device {
            id: cfg.id,
            ctx,
            outer_keys: keys.outer_keys_for(cfg.id),
            nonces: NonceSource::seeded(crate::rng::derive(cfg.seed, crate::rng::tag("channel"))),
            sram: Some(cfg.sram),
            provisioned_firmware,
            report_override: None,
            seen_nonces: None,
        })
    }

    pub fn context(&self) -> &AttestationContext {
        &self.ctx
    }

    pub fn context_mut(&mut self) -> &mut AttestationContext {
        &mut self.ctx
    }

    pub fn sram(&self) -> Option<&SimulatedSram> {
        self.sram.as_ref()
    }

    /// Whether this device is running tampered firmware or lying about its
    /// report.
    pub fn is_compromised(&self) -> bool {
        if self.report_override.is_some() {
            return true;
        }
        match &self.sram {
            Some(s) => {
                let (id, mutated) = s.running();
                mutated || self.provisioned_firmware.as_ref() != Some(&id)
            }
            None => false,
        }
    }

    /// A report on the current SRAM state, encrypted for `peer`.
    pub fn fresh_report(&mut self, peer: DeviceId) -> Result<Vec<u8>, FailReason> {
        let out = self.ctx.app_sa(Some(peer), None, true).map_err(|_| FailReason::Setup)?;
        Ok(out.report.ok_or(FailReason::Setup)?.ciphertext)
    }

    fn own_report(&mut self, peer: DeviceId) -> Result<Vec<u8>, FailReason> {
        let generated = self.fresh_report(peer)?;
        Ok(self.report_override.clone().unwrap_or(generated))
    }

    /// Open an inbound message: check the tag under the key shared with the
    /// claimed sender, decrypt and check length and embedded identity.
    fn open(&self, msg: &HandshakeMessage, expected_peer: Option<DeviceId>, len: usize) -> Result<(Key, Vec<u8>), FailReason> {
        if msg.sender_id == self.id || expected_peer.is_some_and(|p| p != msg.sender_id) {
            return Err(FailReason::BadHmac);
        }
        let key = *self.outer_keys.get(&msg.sender_id).ok_or(FailReason::BadHmac)?;
        if !secure_channel::verify(&tagged(&msg.sender_id, &msg.m), &msg.tag, &key) {
            return Err(FailReason::BadHmac);
        }
        let p = secure_channel::dec(&msg.m, &key).map_err(|_| FailReason::BadLayout)?;
        if p.len() != len || p[..ID_LEN] != msg.sender_id {
            return Err(FailReason::BadLayout);
        }
        Ok((key, p))
    }

    /// Step 1: produce `m1` toward `peer`.
    pub fn initiator_start(&mut self, peer: DeviceId) -> (SessionState, Option<HandshakeMessage>) {
        let mut st = SessionState::new(Role::Initiator);
        st.peer = Some(peer);
        let Some(key) = self.outer_keys.get(&peer).copied() else {
            let out = st.fail(FailReason::Setup);
            return (st, out);
        };
        let n1 = self.nonces.nonce();
        let report = match self.own_report(peer) {
            Ok(r) => r,
            Err(e) => {
                let out = st.fail(e);
                return (st, out);
            }
        };
        st.nonces[0] = Some(n1);
        let plain = [&self.id[..], &n1, &report].concat();
        let msg = HandshakeMessage::seal(self.id, &plain, &key, &mut self.nonces);
        let out = st.send(msg, Phase::Sent1);
        (st, out)
    }

    /// Advance `st` with an inbound message. Returns the reply, if any.
    /// Terminal sessions ignore further input.
    pub fn step(&mut self, st: &mut SessionState, incoming: &HandshakeMessage) -> Option<HandshakeMessage> {
        if st.phase.is_terminal() {
            return None;
        }
        st.transcript.push((Direction::In, incoming.clone()));
        let result = match (st.role, st.phase) {
            (Role::Responder, Phase::Start) => self.on_m1(st, incoming),
            (Role::Initiator, Phase::Sent1) => self.on_m2(st, incoming),
            (Role::Responder, Phase::Sent2) => self.on_m3(st, incoming),
            (Role::Initiator, Phase::Sent3) => self.on_m4(st, incoming),
            _ => Err(FailReason::BadLayout),
        };
        match result {
            Ok(Some((msg, phase))) => st.send(msg, phase),
            Ok(None) => None,
            Err(reason) => st.fail(reason),
        }
    }

    fn validate_peer_report(&mut self, st: &mut SessionState, peer: DeviceId, report: &[u8], a_self: bool) -> Result<Option<Vec<u8>>, FailReason> {
        let out = self.ctx.app_sa(Some(peer), Some(report), a_self).map_err(|_| FailReason::Setup)?;
        match out.kind {
            AppSaKind::Completed => {
                st.peer_delta = out.delta_s;
                Ok(out.report.map(|r| r.ciphertext))
            }
            AppSaKind::SenderUnsafe => {
                st.peer_delta = Some(Verdict::Unsafe);
                Err(FailReason::PeerUnsafe)
            }
            AppSaKind::AbortExpiredReport => Err(FailReason::ReportExpired),
            AppSaKind::AbortInconsistentId => Err(FailReason::ReportInconsistentId),
            AppSaKind::AbortNoSenderId | AppSaKind::AbortTrivialInput => Err(FailReason::Setup),
        }
    }

    fn on_m1(&mut self, st: &mut SessionState, msg: &HandshakeMessage) -> Result<Option<(HandshakeMessage, Phase)>, FailReason> {
        let (key, p) = self.open(msg, None, M1_LEN)?;
        let peer = msg.sender_id;
        st.peer = Some(peer);
        let n1: Nonce = p[ID_LEN..ID_LEN + NONCE_LEN].try_into().expect("length checked");
        if let Some(seen) = &mut self.seen_nonces {
            if !seen.insert(n1) {
                return Err(FailReason::ReplayedNonce);
            }
        }
        st.nonces[0] = Some(n1);
        let r_i = &p[ID_LEN + NONCE_LEN..];
        let own = self.validate_peer_report(st, peer, r_i, true)?;
        let own = match &self.report_override {
            Some(r) => r.clone(),
            None => own.ok_or(FailReason::Setup)?,
        };
        let n2 = self.nonces.nonce();
        st.nonces[1] = Some(n2);
        let plain = [&self.id[..], &n1, &n2, &own].concat();
        Ok(Some((HandshakeMessage::seal(self.id, &plain, &key, &mut self.nonces), Phase::Sent2)))
    }

    fn on_m2(&mut self, st: &mut SessionState, msg: &HandshakeMessage) -> Result<Option<(HandshakeMessage, Phase)>, FailReason> {
        let (key, p) = self.open(msg, st.peer, M2_LEN)?;
        let peer = msg.sender_id;
        if Some(&p[ID_LEN..ID_LEN + NONCE_LEN]) != st.nonces[0].as_ref().map(|n| &n[..]) {
            return Err(FailReason::BadNonceEcho);
        }
        let n2: Nonce = p[ID_LEN + NONCE_LEN..ID_LEN + 2 * NONCE_LEN].try_into().expect("length checked");
        st.nonces[1] = Some(n2);
        self.validate_peer_report(st, peer, &p[ID_LEN + 2 * NONCE_LEN..], false)?;
        let n3 = self.nonces.nonce();
        st.nonces[2] = Some(n3);
        let plain = [&self.id[..], &n2, &n3].concat();
        Ok(Some((HandshakeMessage::seal(self.id, &plain, &key, &mut self.nonces), Phase::Sent3)))
    }

    fn on_m3(&mut self, st: &mut SessionState, msg: &HandshakeMessage) -> Result<Option<(HandshakeMessage, Phase)>, FailReason> {
        let (key, p) = self.open(msg, st.peer, M3_LEN)?;
        if Some(&p[ID_LEN..ID_LEN + NONCE_LEN]) != st.nonces[1].as_ref().map(|n| &n[..]) {
            return Err(FailReason::BadNonceEcho);
        }
        let n3: Nonce = p[ID_LEN + NONCE_LEN..].try_into().expect("length checked");
        st.nonces[2] = Some(n3);
        let n4 = self.nonces.nonce();
        st.nonces[3] = Some(n4);
        let plain = [&self.id[..], &n3, &n4].concat();
        // Nothing further is expected once m4 is out.
        Ok(Some((HandshakeMessage::seal(self.id, &plain, &key, &mut self.nonces), Phase::Done)))
    }

    fn on_m4(&mut self, st: &mut SessionState, msg: &HandshakeMessage) -> Result<Option<(HandshakeMessage, Phase)>, FailReason> {
        let (_, p) = self.open(msg, st.peer, M4_LEN)?;
        if Some(&p[ID_LEN..ID_LEN + NONCE_LEN]) != st.nonces[2].as_ref().map(|n| &n[..]) {
            return Err(FailReason::BadNonceEcho);
        }
        st.nonces[3] = Some(p[ID_LEN + NONCE_LEN..].try_into().expect("length checked"));
        st.phase = Phase::Done;
        Ok(None)
    }
}
