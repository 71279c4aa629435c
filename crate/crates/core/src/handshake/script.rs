//! Adversary scripts.
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! record 1              # eavesdrop on one honest session first
//! 1 replay 0            # at step 1 substitute library message 0
//! 2 tamper 40 0x01      # flip bit 0 of wire byte 40 of m2
//! 3 drop
//! 4 delay 6000
//! 2 impersonate 00000002
//! 3 inject
//! ```
//!
//! Steps are 1..=4 and may carry at most one action; unlisted steps pass
//! through. Wire bytes are `sender_id || m || tag` and tamper offsets wrap
//! modulo the wire length. Library index `k` is step `k % 4 + 1` of
//! recorded session `k / 4`.

use std::fmt;
use std::str::FromStr;

use crate::secure_channel::{DeviceId, ID_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Passthrough,
    Drop,
    /// Deliver a recorded message instead of the in-flight one.
    Replay { record: usize },
    /// XOR one wire byte of the in-flight message.
    Tamper { byte: usize, mask: u8 },
    /// Random bytes of the right length under the in-flight sender id.
    Inject,
    /// Correctly laid out message claiming `claimed`, sealed with keys the
    /// adversary made up.
    Impersonate { claimed: DeviceId },
    /// Advance the clock before delivery.
    Delay { ms: u64 },
}

impl Action {
    /// Whether the delivered message differs from what the honest sender
    /// emitted.
    pub fn substitutes(self) -> bool {
        matches!(self, Action::Replay { .. } | Action::Tamper { .. } | Action::Inject | Action::Impersonate { .. })
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Passthrough => f.write_str("passthrough"),
            Action::Drop => f.write_str("drop"),
            Action::Replay { record } => write!(f, "replay {record}"),
            Action::Tamper { byte, mask } => write!(f, "tamper {byte} {mask:#04x}"),
            Action::Inject => f.write_str("inject"),
            Action::Impersonate { claimed } => write!(f, "impersonate {}", hex::encode(claimed)),
            Action::Delay { ms } => write!(f, "delay {ms}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AdversaryScript {
    /// Honest sessions to eavesdrop on before the attacked one.
    pub record: usize,
    actions: [Option<Action>; 4],
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ScriptError {
    pub line: usize,
    pub msg: String,
}

impl AdversaryScript {
    pub fn passthrough() -> Self {
        Self::default()
    }

    pub fn with(mut self, step: u8, action: Action) -> Self {
        assert!((1..=4).contains(&step), "step {step} out of range");
        self.actions[step as usize - 1] = Some(action);
        self
    }

    pub fn recording(mut self, sessions: usize) -> Self {
        self.record = sessions;
        self
    }

    pub fn action(&self, step: u8) -> Action {
        self.actions[step as usize - 1].unwrap_or(Action::Passthrough)
    }

    /// Replays `session` of the library at all four steps.
    pub fn full_replay(session: usize) -> Self {
        (1..=4u8).fold(Self::default().recording(session + 1), |s, k| {
            s.with(k, Action::Replay { record: 4 * session + k as usize - 1 })
        })
    }

    fn validate(&self) -> Result<(), String> {
        for a in self.actions.iter().flatten() {
            if let Action::Replay { record } = a {
                if *record >= 4 * self.record {
                    return Err(format!("replay index {record} outside library of {} messages", 4 * self.record));
                }
            }
        }
        Ok(())
    }
}

impl FromStr for AdversaryScript {
    type Err = ScriptError;

    fn from_str(text: &str) -> Result<Self, ScriptError> {
        let mut script = AdversaryScript::default();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let err = |msg: String| ScriptError { line, msg };
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let words: Vec<&str> = body.split_whitespace().collect();
            if words[0] == "record" {
                let [_, count] = words[..] else {
                    return Err(err("expected `record <sessions>`".into()));
                };
                script.record = count.parse().map_err(|_| err(format!("bad session count `{count}`")))?;
                continue;
            }
            let step: u8 = words[0].parse().map_err(|_| err(format!("bad step `{}`", words[0])))?;
            if !(1..=4).contains(&step) {
                return Err(err(format!("step {step} outside 1..=4")));
            }
            let action = parse_action(&words[1..]).map_err(err)?;
            let slot = &mut script.actions[step as usize - 1];
            if slot.is_some() {
                return Err(err(format!("step {step} already has an action")));
            }
            *slot = Some(action);
        }
        script.validate().map_err(|msg| ScriptError { line: 0, msg })?;
        Ok(script)
    }
}

impl fmt::Display for AdversaryScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.record > 0 {
            writeln!(f, "record {}", self.record)?;
        }
        for (k, a) in self.actions.iter().enumerate() {
            if let Some(a) = a {
                writeln!(f, "{} {a}", k + 1)?;
            }
        }
        Ok(())
    }
}

fn parse_num<T: TryFrom<u64>>(s: &str) -> Result<T, String> {
    let v = match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|_| format!("bad number `{s}`"))?;
    T::try_from(v).map_err(|_| format!("number `{s}` out of range"))
}

fn parse_action(words: &[&str]) -> Result<Action, String> {
    let Some((&name, args)) = words.split_first() else {
        return Err("missing action".into());
    };
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("`{name}` takes {n} argument(s)"))
        }
    };
    match name {
        "pass" | "passthrough" => arity(0).map(|_| Action::Passthrough),
        "drop" => arity(0).map(|_| Action::Drop),
        "inject" => arity(0).map(|_| Action::Inject),
        "replay" => {
            arity(1)?;
            Ok(Action::Replay { record: parse_num(args[0])? })
        }
        "tamper" => {
            arity(2)?;
            let mask: u8 = parse_num(args[1])?;
            if mask == 0 {
                return Err("tamper mask must be non-zero".into());
            }
            Ok(Action::Tamper { byte: parse_num(args[0])?, mask })
        }
        "impersonate" => {
            arity(1)?;
            Ok(Action::Impersonate { claimed: parse_device_id(args[0])? })
        }
        "delay" => {
            arity(1)?;
            Ok(Action::Delay { ms: parse_num(args[0])? })
        }
        other => Err(format!("unknown action `{other}`")),
    }
}

/// Parse a device id written as 8 hex digits.
pub fn parse_device_id(s: &str) -> Result<DeviceId, String> {
    let bytes = hex::decode(s.trim_start_matches("0x")).map_err(|_| format!("bad device id `{s}`"))?;
    bytes.try_into().map_err(|_| format!("device id must be {ID_LEN} bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_action() {
        let s: AdversaryScript = "record 2\n1 replay 4 # old m1\n2 tamper 0x10 0x80\n3 impersonate 0a0b0c0d\n4 delay 6000\n"
            .parse()
            .unwrap();
        assert_eq!(s.record, 2);
        assert_eq!(s.action(1), Action::Replay { record: 4 });
        assert_eq!(s.action(2), Action::Tamper { byte: 16, mask: 0x80 });
        assert_eq!(s.action(3), Action::Impersonate { claimed: [10, 11, 12, 13] });
        assert_eq!(s.action(4), Action::Delay { ms: 6000 });
        let again: AdversaryScript = s.to_string().parse().unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn empty_script_is_passthrough() {
        let s: AdversaryScript = "# nothing\n\n".parse().unwrap();
        assert_eq!(s, AdversaryScript::passthrough());
        assert!((1..=4).all(|k| s.action(k) == Action::Passthrough));
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in ["5 drop", "1 drop\n1 inject", "1 tamper 3 0", "1 replay 0", "2 explode", "x drop", "1 impersonate 0102"] {
            assert!(bad.parse::<AdversaryScript>().is_err(), "{bad}");
        }
    }

    #[test]
    fn full_replay_targets_one_recorded_session() {
        let s = AdversaryScript::full_replay(2);
        assert_eq!(s.record, 3);
        assert_eq!(s.action(1), Action::Replay { record: 8 });
        assert_eq!(s.action(4), Action::Replay { record: 11 });
    }
}
