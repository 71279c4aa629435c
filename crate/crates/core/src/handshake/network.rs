//! Deterministic two-party network with an interposed adversary, and the
//! protocol games built on it.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::Arc;

use serde::Serialize;

use super::script::{Action, AdversaryScript};
use super::{Device, DeviceConfig, FailReason, HandshakeMessage, Phase, Role, SessionState, M1_LEN, M2_LEN, M3_LEN};
use crate::attestor::SimulatedSram;
use crate::exec::{self, ExecMode};
use crate::quantize::QuantizedModel;
use crate::rng;
use crate::secure_channel::{Clock, DeviceId, KeyStore, NonceSource, ID_LEN, TAG_LEN};
use crate::trace::FirmwareProfile;

pub const INITIATOR_ID: DeviceId = [0, 0, 0, 1];
pub const RESPONDER_ID: DeviceId = [0, 0, 0, 2];

/// Plaintext length of message `step`.
pub fn plaintext_len(step: u8) -> usize {
    match step {
        1 => M1_LEN,
        2 => M2_LEN,
        _ => M3_LEN,
    }
}

/// Wire length of message `step`.
pub fn wire_len(step: u8) -> usize {
    let p = plaintext_len(step);
    ID_LEN + 16 + (p / 16 + 1) * 16 + TAG_LEN
}

#[derive(Debug, Clone)]
pub struct Network {
    pub clock: Clock,
    /// Clock advance per hop.
    pub hop_ms: u64,
}

/// The network adversary. It sees every wire message and keeps a library
/// of what it overheard but holds no keys.
pub struct Adversary {
    pub script: AdversaryScript,
    library: Vec<Option<HandshakeMessage>>,
    rng: NonceSource,
}

impl Adversary {
    pub fn new(script: AdversaryScript, seed: u64) -> Self {
        Adversary {
            script,
            library: Vec::new(),
            rng: NonceSource::seeded(seed),
        }
    }

    pub fn library(&self) -> &[Option<HandshakeMessage>] {
        &self.library
    }

    fn overhear(&mut self, messages: [Option<HandshakeMessage>; 4]) {
        self.library.extend(messages);
    }

    fn random_bytes(&mut self, n: usize) -> Vec<u8> {
        let mut v = vec![0u8; n];
        self.rng.fill(&mut v);
        v
    }

    fn inject(&mut self, sender: DeviceId, step: u8) -> HandshakeMessage {
        let body = self.random_bytes(wire_len(step) - ID_LEN);
        let mut wire = sender.to_vec();
        wire.extend(body);
        HandshakeMessage::from_wire(&wire).expect("long enough")
    }

    fn impersonate(&mut self, claimed: DeviceId, step: u8) -> HandshakeMessage {
        let key = self.rng.key();
        let mut plain = claimed.to_vec();
        plain.extend(self.random_bytes(plaintext_len(step) - ID_LEN));
        HandshakeMessage::seal(claimed, &plain, &key, &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    Accepted,
    Rejected(FailReason),
    /// Recipient had already terminated.
    Ignored,
    Dropped,
}

impl Delivery {
    pub fn label(self) -> String {
        match self {
            Delivery::Accepted => "accepted".into(),
            Delivery::Rejected(r) => format!("rejected:{r}"),
            Delivery::Ignored => "ignored".into(),
            Delivery::Dropped => "dropped".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptRecord {
    pub session_id: u64,
    pub step: u8,
    pub direction: &'static str,
    pub sender_id: String,
    pub payload_hex: String,
    pub tag_hex: String,
    pub adversary_action: String,
    pub verdict: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SessionVerdict {
    /// Both parties reached `Done`.
    pub completed: bool,
    /// A message the adversary altered, fabricated or replayed (other than
    /// a replayed first message) was accepted.
    pub forged_accepted: bool,
    /// A party accepted a peer running foreign or tampered firmware or
    /// presenting a substituted report.
    pub compromised_accepted: bool,
}

impl SessionVerdict {
    pub fn adversary_wins(&self) -> bool {
        self.forged_accepted || self.compromised_accepted
    }

    pub fn label(&self) -> &'static str {
        match (self.completed, self.adversary_wins()) {
            (_, true) => "win",
            (true, false) => "completed, no-win",
            (false, false) => "failed, no-win",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub session_id: u64,
    pub initiator: SessionState,
    pub responder: SessionState,
    pub transcript: Vec<TranscriptRecord>,
    pub verdict: SessionVerdict,
}

impl SessionOutcome {
    /// Failure reason of whichever side failed first, if any.
    pub fn failure(&self) -> Option<FailReason> {
        [self.responder.phase, self.initiator.phase].into_iter().find_map(|p| match p {
            Phase::Failed(r) => Some(r),
            _ => None,
        })
    }
}

fn record(session_id: u64, step: u8, msg: &HandshakeMessage, action: String, verdict: String) -> TranscriptRecord {
    TranscriptRecord {
        session_id,
        step,
        direction: if step % 2 == 1 { "initiator->responder" } else { "responder->initiator" },
        sender_id: hex::encode(msg.sender_id),
        payload_hex: hex::encode(&msg.m),
        tag_hex: hex::encode(msg.tag),
        adversary_action: action,
        verdict,
    }
}

fn deliver(dev: &mut Device, st: &mut SessionState, msg: &HandshakeMessage) -> (Delivery, Option<HandshakeMessage>) {
    if st.phase.is_terminal() {
        return (Delivery::Ignored, None);
    }
    let reply = dev.step(st, msg);
    match st.phase {
        Phase::Failed(r) => (Delivery::Rejected(r), None),
        _ => (Delivery::Accepted, reply),
    }
}

/// Run one session: the initiator starts toward the responder and every
/// emitted message passes through the adversary before delivery. If the
/// script asks for a library, that many honest sessions are overheard
/// first.
pub fn run_session(
    net: &Network,
    session_id: u64,
    initiator: &mut Device,
    responder: &mut Device,
    adversary: &mut Adversary,
) -> SessionOutcome {
    while adversary.library.len() < 4 * adversary.script.record {
        let honest = exchange(net, session_id, initiator, responder, None);
        let mut seen: [Option<HandshakeMessage>; 4] = Default::default();
        for (slot, r) in seen.iter_mut().zip(honest.outbound) {
            *slot = r;
        }
        adversary.overhear(seen);
    }
    let run = exchange(net, session_id, initiator, responder, Some(adversary));
    let completed = run.initiator.phase == Phase::Done && run.responder.phase == Phase::Done;
    let compromised_accepted = (initiator.is_compromised() && run.responder.peer_delta == Some(crate::attestor::Verdict::Safe))
        || (responder.is_compromised() && run.initiator.peer_delta == Some(crate::attestor::Verdict::Safe));
    SessionOutcome {
        session_id,
        initiator: run.initiator,
        responder: run.responder,
        transcript: run.transcript,
        verdict: SessionVerdict {
            completed,
            forged_accepted: run.forged_accepted,
            compromised_accepted,
        },
    }
}

struct Exchange {
    initiator: SessionState,
    responder: SessionState,
    transcript: Vec<TranscriptRecord>,
    outbound: Vec<Option<HandshakeMessage>>,
    forged_accepted: bool,
}

fn exchange(
    net: &Network,
    session_id: u64,
    initiator: &mut Device,
    responder: &mut Device,
    mut adversary: Option<&mut Adversary>,
) -> Exchange {
    let (mut si, first) = initiator.initiator_start(responder.id);
    let mut sr = SessionState::new(Role::Responder);
    let mut transcript = Vec::new();
    let mut outbound = Vec::new();
    let mut forged_accepted = false;
    let mut in_flight = first;
    for step in 1..=4u8 {
        net.clock.advance(net.hop_ms);
        let honest = in_flight.take();
        outbound.push(honest.clone());
        let sender_id = if step % 2 == 1 { initiator.id } else { responder.id };
        let action = adversary.as_ref().map_or(Action::Passthrough, |a| a.script.action(step));
        let delivered = match (action, adversary.as_deref_mut()) {
            (Action::Passthrough, _) | (_, None) => honest.clone(),
            (Action::Delay { ms }, _) => {
                net.clock.advance(ms);
                honest.clone()
            }
            (Action::Drop, _) => None,
            (Action::Replay { record }, Some(a)) => a.library.get(record).cloned().flatten(),
            (Action::Tamper { byte, mask }, _) => honest.as_ref().map(|h| {
                let mut w = h.to_wire();
                let i = byte % w.len();
                w[i] ^= mask;
                HandshakeMessage::from_wire(&w).expect("same length")
            }),
            (Action::Inject, Some(a)) => Some(a.inject(sender_id, step)),
            (Action::Impersonate { claimed }, Some(a)) => Some(a.impersonate(claimed, step)),
        };
        if let Some(h) = &honest {
            let (label, verdict) = match action {
                Action::Passthrough | Action::Delay { .. } => (None, None),
                Action::Drop => (Some(action.to_string()), Some(Delivery::Dropped)),
                _ => (Some("intercepted".to_string()), Some(Delivery::Dropped)),
            };
            if let (Some(label), Some(verdict)) = (label, verdict) {
                transcript.push(record(session_id, step, h, label, verdict.label()));
            }
        }
        let Some(msg) = delivered else { continue };
        let (delivery, reply) = if step % 2 == 1 {
            deliver(responder, &mut sr, &msg)
        } else {
            deliver(initiator, &mut si, &msg)
        };
        if delivery == Delivery::Accepted && action.substitutes() && !(step == 1 && matches!(action, Action::Replay { .. })) {
            forged_accepted = true;
        }
        transcript.push(record(session_id, step, &msg, action.to_string(), delivery.label()));
        in_flight = reply;
    }
    Exchange {
        initiator: si,
        responder: sr,
        transcript,
        outbound,
        forged_accepted,
    }
}

/// Write transcript records as JSON lines after `#`-prefixed header lines.
pub fn write_transcript<W: Write>(mut w: W, header: &[String], records: &[TranscriptRecord]) -> io::Result<()> {
    for h in header {
        writeln!(w, "# {h}")?;
    }
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Shared setup for the protocol games.
#[derive(Debug, Clone)]
pub struct GameFixture {
    /// Firmware the devices are provisioned with.
    pub profile: FirmwareProfile,
    pub qmodel: Arc<QuantizedModel>,
    pub t_opt: f64,
    pub block: usize,
    pub epsilon_ms: u64,
    /// Devices start at a time step drawn from `0..step_range`.
    pub step_range: u64,
    /// Tampered firmware images swapped in for the unsafe-sender game.
    pub unsafe_profiles: Vec<FirmwareProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Game {
    Honest,
    /// Keyless fabrication at one step per session, cycling through all
    /// four steps.
    Fabrication,
    /// Replay of a fully overheard honest session.
    Replay,
    /// One flipped bit of one wire byte at one step per session.
    Tamper,
    /// A cached report replayed after the expiry window.
    ExpiredReport,
    /// Initiator running tampered firmware.
    UnsafeSender,
}

impl Game {
    pub const ALL: [Game; 6] = [Game::Honest, Game::Fabrication, Game::Replay, Game::Tamper, Game::ExpiredReport, Game::UnsafeSender];

    pub fn as_str(self) -> &'static str {
        match self {
            Game::Honest => "honest",
            Game::Fabrication => "fabrication",
            Game::Replay => "replay",
            Game::Tamper => "tamper",
            Game::ExpiredReport => "expired_report",
            Game::UnsafeSender => "unsafe_sender",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameReport {
    pub game: Game,
    pub sessions: usize,
    pub completed: usize,
    pub wins: usize,
    /// Sessions by first failure reason; `none` for sessions that did not fail.
    pub failures: BTreeMap<String, usize>,
}

impl GameReport {
    pub fn rejection_rate(&self) -> f64 {
        let ok = self.failures.get("none").copied().unwrap_or(0);
        1.0 - ok as f64 / self.sessions.max(1) as f64
    }
}

/// Build a fresh initiator/responder pair for one session.
pub fn device_pair(fx: &GameFixture, seed: u64) -> Result<(Device, Device, Network), crate::attestor::AttestError> {
    let keys = KeyStore::generate(&[INITIATOR_ID, RESPONDER_ID], &mut NonceSource::seeded(rng::derive(seed, rng::tag("keys"))));
    let clock = Clock::simulated(1_000_000);
    let make = |id: DeviceId, label: &str| {
        let s = rng::derive(seed, rng::tag(label));
        let start = if fx.step_range == 0 { 0 } else { rng::derive(s, rng::tag("step")) % fx.step_range };
        Device::new(
            DeviceConfig {
                id,
                qmodel: fx.qmodel.clone(),
                t_opt: fx.t_opt,
                epsilon_ms: fx.epsilon_ms,
                block: fx.block,
                clock: clock.clone(),
                seed: s,
                sram: SimulatedSram::new(fx.profile.clone(), rng::derive(s, rng::tag("device")), start),
            },
            &keys,
        )
    };
    let i = make(INITIATOR_ID, "initiator")?;
    let j = make(RESPONDER_ID, "responder")?;
    Ok((i, j, Network { clock, hop_ms: 10 }))
}

/// Set up and run session `k` of `game`.
pub fn play_session(game: Game, fx: &GameFixture, seed: u64, k: usize) -> Result<SessionOutcome, crate::attestor::AttestError> {
    let s = rng::derive_all(seed, &[rng::tag(game.as_str()), k as u64]);
    let (mut i, mut j, net) = device_pair(fx, s)?;
    let step = (k % 4) as u8 + 1;
    let sender = if step % 2 == 1 { INITIATOR_ID } else { RESPONDER_ID };
    let script = match game {
        Game::Honest | Game::ExpiredReport | Game::UnsafeSender => AdversaryScript::passthrough(),
        Game::Fabrication if (k / 4) % 2 == 0 => AdversaryScript::passthrough().with(step, Action::Impersonate { claimed: sender }),
        Game::Fabrication => AdversaryScript::passthrough().with(step, Action::Inject),
        Game::Replay => AdversaryScript::full_replay(0),
        Game::Tamper => {
            let byte = (rng::derive(s, rng::tag("byte")) % wire_len(step) as u64) as usize;
            AdversaryScript::passthrough().with(step, Action::Tamper { byte, mask: 1 << ((k / 4) % 8) })
        }
    };
    match game {
        Game::ExpiredReport => {
            let cached = i.fresh_report(RESPONDER_ID).map_err(|r| crate::attestor::AttestError::Config(r.to_string()))?;
            net.clock.advance(fx.epsilon_ms + 1 + (k as u64 % 1000));
            i.report_override = Some(cached);
        }
        Game::UnsafeSender => {
            if fx.unsafe_profiles.is_empty() {
                return Err(crate::attestor::AttestError::Config("no unsafe firmware supplied".into()));
            }
            let p = &fx.unsafe_profiles[k % fx.unsafe_profiles.len()];
            i.sram().expect("simulated device").swap_firmware(p.clone());
        }
        _ => {}
    }
    let mut adv = Adversary::new(script, rng::derive(s, rng::tag("adversary")));
    Ok(run_session(&net, k as u64, &mut i, &mut j, &mut adv))
}

/// Run `sessions` independent sessions of `game`.
pub fn play(game: Game, fx: &GameFixture, sessions: usize, seed: u64, mode: ExecMode) -> Result<(GameReport, Vec<SessionOutcome>), crate::attestor::AttestError> {
    let outcomes = exec::map_range(mode, sessions, |k| play_session(game, fx, seed, k)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut failures = BTreeMap::new();
    for o in &outcomes {
        let key = o.failure().map_or("none", FailReason::as_str);
        *failures.entry(key.to_string()).or_insert(0) += 1;
    }
    let report = GameReport {
        game,
        sessions,
        completed: outcomes.iter().filter(|o| o.verdict.completed).count(),
        wins: outcomes.iter().filter(|o| o.verdict.adversary_wins()).count(),
        failures,
    };
    Ok((report, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::{init_model, Arch};
    use crate::matrix::Matrix;
    use crate::quantize::quantize_model;
    use crate::trace::{generate_profile, mutate_profile, LayoutSpec, MutationKind};

    fn fixture(t_opt: f64) -> GameFixture {
        let spec = LayoutSpec {
            data_section_len: 32,
            variable_count: 4,
            stack_len: 32,
            ..LayoutSpec::default()
        };
        let profile = generate_profile(3, &spec).unwrap();
        let m = init_model(Arch::M1, 8, 1).unwrap();
        let q = quantize_model(&m, &Matrix::from_vec(2, 8, vec![0.5; 16])).unwrap();
        GameFixture {
            unsafe_profiles: vec![mutate_profile(&profile, MutationKind::ALL[0], 1.0, 5).unwrap()],
            profile,
            qmodel: Arc::new(q),
            t_opt,
            block: 4,
            epsilon_ms: 5000,
            step_range: 100,
        }
    }

    #[test]
    fn wire_lengths_match_sealed_messages() {
        let fx = fixture(f64::INFINITY);
        let o = play_session(Game::Honest, &fx, 1, 0).unwrap();
        let lens: Vec<usize> = o.initiator.transcript.iter().map(|(_, m)| m.wire_len()).collect();
        assert_eq!(lens, vec![wire_len(1), wire_len(2), wire_len(3), wire_len(4)]);
    }

    #[test]
    fn passthrough_completes_without_win() {
        let fx = fixture(f64::INFINITY);
        let o = play_session(Game::Honest, &fx, 1, 0).unwrap();
        assert!(o.verdict.completed);
        assert_eq!(o.verdict.label(), "completed, no-win");
        assert_eq!(o.transcript.len(), 4);
        assert!(o.transcript.iter().all(|r| r.verdict == "accepted"));
    }

    #[test]
    fn full_replay_fails_at_responder_m3() {
        let fx = fixture(f64::INFINITY);
        let o = play_session(Game::Replay, &fx, 2, 0).unwrap();
        assert!(!o.verdict.adversary_wins());
        assert_eq!(o.responder.phase, Phase::Failed(FailReason::BadNonceEcho));
        assert_eq!(o.initiator.phase, Phase::Failed(FailReason::BadNonceEcho));
        let replayed: Vec<_> = o.transcript.iter().filter(|r| r.adversary_action.starts_with("replay")).map(|r| r.verdict.as_str()).collect();
        assert_eq!(replayed, ["accepted", "rejected:bad_nonce_echo", "rejected:bad_nonce_echo", "ignored"]);
    }

    #[test]
    fn tamper_at_every_step_is_bad_hmac() {
        let fx = fixture(f64::INFINITY);
        let (rep, _) = play(Game::Tamper, &fx, 64, 3, ExecMode::Parallel).unwrap();
        assert_eq!(rep.wins, 0);
        assert_eq!(rep.failures.get("bad_hmac"), Some(&64));
    }

    #[test]
    fn fabrication_never_completes() {
        let fx = fixture(f64::INFINITY);
        let (rep, _) = play(Game::Fabrication, &fx, 32, 4, ExecMode::Sequential).unwrap();
        assert_eq!((rep.wins, rep.completed), (0, 0));
    }

    #[test]
    fn expired_cached_report_is_rejected() {
        let fx = fixture(f64::INFINITY);
        let (rep, _) = play(Game::ExpiredReport, &fx, 8, 5, ExecMode::Sequential).unwrap();
        assert_eq!(rep.failures.get("report_expired"), Some(&8));
        assert_eq!(rep.wins, 0);
    }

    #[test]
    fn accepting_a_swapped_firmware_counts_as_a_win() {
        // An infinite threshold calls everything safe.
        let fx = fixture(f64::INFINITY);
        let (rep, _) = play(Game::UnsafeSender, &fx, 4, 6, ExecMode::Sequential).unwrap();
        assert_eq!(rep.wins, 4);
        let fx = fixture(0.0);
        let (rep, _) = play(Game::UnsafeSender, &fx, 4, 6, ExecMode::Sequential).unwrap();
        assert_eq!(rep.failures.get("peer_unsafe"), Some(&4));
    }

    #[test]
    fn dropped_and_delivered_messages_appear_once() {
        let fx = fixture(f64::INFINITY);
        let (mut i, mut j, net) = device_pair(&fx, 9).unwrap();
        let script: AdversaryScript = "2 drop".parse().unwrap();
        let o = run_session(&net, 0, &mut i, &mut j, &mut Adversary::new(script, 1));
        let verdicts: Vec<_> = o.transcript.iter().map(|r| (r.step, r.verdict.as_str())).collect();
        assert_eq!(verdicts, [(1, "accepted"), (2, "dropped")]);
        assert!(!o.verdict.completed);
    }

    #[test]
    fn delay_past_expiry_rejects_first_report() {
        let fx = fixture(f64::INFINITY);
        let (mut i, mut j, net) = device_pair(&fx, 9).unwrap();
        let script: AdversaryScript = "1 delay 6000".parse().unwrap();
        let o = run_session(&net, 0, &mut i, &mut j, &mut Adversary::new(script, 1));
        assert_eq!(o.responder.phase, Phase::Failed(FailReason::ReportExpired));
    }

    #[test]
    fn transcript_never_shows_plaintext_fields() {
        let fx = fixture(f64::INFINITY);
        let o = play_session(Game::Honest, &fx, 7, 0).unwrap();
        let mut log = Vec::new();
        write_transcript(&mut log, &["seed=7".into()], &o.transcript).unwrap();
        let log = String::from_utf8(log).unwrap();
        for n in o.initiator.nonces.iter().flatten() {
            assert!(!log.contains(&hex::encode(n)));
        }
        assert!(log.starts_with("# seed=7\n"));
        assert_eq!(log.lines().count(), 5);
    }

    #[test]
    fn games_are_schedule_independent() {
        let fx = fixture(f64::INFINITY);
        let (a, oa) = play(Game::Tamper, &fx, 16, 11, ExecMode::Parallel).unwrap();
        let (b, ob) = play(Game::Tamper, &fx, 16, 11, ExecMode::Sequential).unwrap();
        assert_eq!(a, b);
        let ta: Vec<_> = oa.iter().flat_map(|o| o.transcript.clone()).collect();
        let tb: Vec<_> = ob.iter().flat_map(|o| o.transcript.clone()).collect();
        assert_eq!(ta, tb);
    }
}
