//! Generative firmware profiles.
//!
//! A [`FirmwareProfile`] describes how a firmware image lays out and
//! updates its SRAM data section, and what its call stack looks like at
//! runtime. Profiles are pure data; [`super::sample_trace`] turns a profile
//! plus a device seed and a time step into concrete SRAM bytes.
//!
//! The generator encodes three observations about real firmware:
//! different firmware leave distinct data-section patterns, twin devices
//! running the same firmware leave near-identical data sections, and twin
//! devices still differ in their stack contents because SRAM powers up in
//! a device-specific state.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TraceError;
use crate::rng;

pub const PROFILE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableKind {
    Constant,
    Counter,
    RandomWalk,
    Flag,
}

/// How a dynamic variable changes between time steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRule {
    /// Counter increment per time step (low byte, wrapping).
    pub counter_step: u8,
    /// Deterministic drift added to a random walk every step.
    pub walk_drift: i8,
    /// Flag toggle half-period in time steps.
    pub flag_period: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub offset: usize,
    pub width: usize,
    pub kind: VariableKind,
    #[serde(with = "rng::seed_hex")]
    pub init_seed: u64,
    /// Initial byte values (`width` bytes). For flags, the "set" marker.
    pub init: Vec<u8>,
    pub update: UpdateRule,
}

impl Variable {
    pub fn end(&self) -> usize {
        self.offset + self.width
    }

    pub fn is_dynamic(&self) -> bool {
        self.kind != VariableKind::Constant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackPattern {
    /// Bytes of stack region following the data section.
    pub stack_len: usize,
    pub frame_count: usize,
    pub frame_sizes: Vec<usize>,
    /// Fraction of each frame's bytes the firmware actually writes.
    pub fill_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    TamperData,
    TamperFunction,
    TamperControlFlow,
    DataInjection,
}

impl MutationKind {
    pub const ALL: [MutationKind; 4] = [
        MutationKind::TamperData,
        MutationKind::TamperFunction,
        MutationKind::TamperControlFlow,
        MutationKind::DataInjection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MutationKind::TamperData => "tamper_data",
            MutationKind::TamperFunction => "tamper_function",
            MutationKind::TamperControlFlow => "tamper_control_flow",
            MutationKind::DataInjection => "data_injection",
        }
    }
}

impl std::str::FromStr for MutationKind {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MutationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TraceError::InvalidArgument(format!("unknown mutation kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mutation {
    pub kind: MutationKind,
    pub severity: f64,
    #[serde(with = "rng::seed_hex")]
    pub seed: u64,
}

/// A byte written into an otherwise unused data-section position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BytePatch {
    pub offset: usize,
    pub value: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmwareProfile {
    pub format_version: u32,
    pub firmware_id: String,
    #[serde(with = "rng::seed_hex")]
    pub firmware_seed: u64,
    pub data_section_len: usize,
    /// Maximum per-device byte deviation applied to random-walk variables.
    pub jitter: u8,
    pub variables: Vec<Variable>,
    pub stack: StackPattern,
    #[serde(default)]
    pub patches: Vec<BytePatch>,
    pub mutation: Option<Mutation>,
}

impl FirmwareProfile {
    /// Total SRAM bytes produced per trace (data section followed by stack).
    pub fn sram_len(&self) -> usize {
        self.data_section_len + self.stack.stack_len
    }

    pub fn is_mutated(&self) -> bool {
        self.mutation.is_some()
    }

    /// Data-section byte positions not covered by any variable or patch.
    pub fn unused_gaps(&self) -> Vec<usize> {
        let mut used = vec![false; self.data_section_len];
        for v in &self.variables {
            used[v.offset..v.end()].iter_mut().for_each(|u| *u = true);
        }
        for p in &self.patches {
            used[p.offset] = true;
        }
        (0..self.data_section_len).filter(|&i| !used[i]).collect()
    }

    /// Versioned structured-text form (TOML). Field order is the struct order.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, TraceError> {
        let p: FirmwareProfile =
            toml::from_str(text).map_err(|e| TraceError::Profile(e.to_string()))?;
        if p.format_version != PROFILE_FORMAT_VERSION {
            return Err(TraceError::Profile(format!(
                "unsupported profile format version {}",
                p.format_version
            )));
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let mut sorted: Vec<&Variable> = self.variables.iter().collect();
        sorted.sort_by_key(|v| v.offset);
        let mut prev_end = 0;
        for v in sorted {
            if v.width == 0 || v.init.len() != v.width {
                return Err(TraceError::Profile(format!(
                    "variable at offset {} has inconsistent width",
                    v.offset
                )));
            }
            if v.offset < prev_end || v.end() > self.data_section_len {
                return Err(TraceError::LayoutOverflow(format!(
                    "variable at offset {} (width {}) overlaps or exceeds data section of {} bytes",
                    v.offset, v.width, self.data_section_len
                )));
            }
            prev_end = v.end();
        }
        if self.patches.iter().any(|p| p.offset >= self.data_section_len) {
            return Err(TraceError::LayoutOverflow("patch outside data section".into()));
        }
        if !(self.stack.fill_fraction > 0.0 && self.stack.fill_fraction <= 1.0) {
            return Err(TraceError::Profile("fill_fraction must lie in (0, 1]".into()));
        }
        if self.stack.frame_sizes.iter().sum::<usize>() > self.stack.stack_len {
            return Err(TraceError::LayoutOverflow("stack frames exceed stack region".into()));
        }
        Ok(())
    }
}

/// Parameters for [`generate_profile`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutSpec {
    pub data_section_len: usize,
    pub variable_count: usize,
    pub min_width: usize,
    pub max_width: usize,
    pub stack_len: usize,
    pub frame_count: usize,
    pub fill_fraction: f64,
    pub jitter: u8,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec {
            data_section_len: 512,
            variable_count: 24,
            min_width: 2,
            max_width: 8,
            stack_len: 256,
            frame_count: 4,
            fill_fraction: 0.5,
            jitter: 2,
        }
    }
}

fn draw_kind<R: Rng>(rng: &mut R) -> VariableKind {
    match rng.gen_range(0..20) {
        0..=7 => VariableKind::Constant,
        8..=11 => VariableKind::Counter,
        12..=16 => VariableKind::RandomWalk,
        _ => VariableKind::Flag,
    }
}

fn init_bytes(kind: VariableKind, width: usize, init_seed: u64) -> Vec<u8> {
    let mut r = rng::chacha(init_seed);
    (0..width)
        .map(|_| {
            let b: u8 = r.gen();
            // A flag's marker must be distinguishable from its cleared state.
            if kind == VariableKind::Flag && b == 0 {
                0x80
            } else {
                b
            }
        })
        .collect()
}

fn new_variable<R: Rng>(rng: &mut R, kind: VariableKind, width: usize, offset: usize) -> Variable {
    let init_seed: u64 = rng.gen();
    Variable {
        offset,
        width,
        kind,
        init_seed,
        init: init_bytes(kind, width, init_seed),
        update: UpdateRule {
            counter_step: 1,
            walk_drift: 0,
            flag_period: 2 + (rng::mix64(init_seed) % 15) as u32,
        },
    }
}

fn draw_width<R: Rng>(rng: &mut R, kind: VariableKind, spec: &LayoutSpec) -> usize {
    let w = rng.gen_range(spec.min_width..=spec.max_width);
    // Counters carry a wrapping low byte plus at least one stable high byte.
    if kind == VariableKind::Counter {
        w.max(2)
    } else {
        w
    }
}

fn draw_frames<R: Rng>(rng: &mut R, stack_len: usize, frame_count: usize) -> Vec<usize> {
    if frame_count == 0 || stack_len == 0 {
        return Vec::new();
    }
    // Frames cover at most 60% of the stack region; the rest keeps its
    // power-up contents.
    let budget = stack_len * 3 / 5;
    let per = (budget / frame_count).max(1);
    (0..frame_count)
        .map(|_| rng.gen_range(per / 2..=per).max(1))
        .collect()
}

/// Build an unmutated profile from a firmware seed and layout parameters.
pub fn generate_profile(firmware_seed: u64, spec: &LayoutSpec) -> Result<FirmwareProfile, TraceError> {
    if spec.min_width == 0 || spec.min_width > spec.max_width {
        return Err(TraceError::InvalidArgument(
            "variable widths must satisfy 1 <= min_width <= max_width".into(),
        ));
    }
    if spec.data_section_len == 0 {
        return Err(TraceError::InvalidArgument("data section must be non-empty".into()));
    }
    if !(spec.fill_fraction > 0.0 && spec.fill_fraction <= 1.0) {
        return Err(TraceError::InvalidArgument("fill_fraction must lie in (0, 1]".into()));
    }
    let mut r = rng::chacha(rng::derive(firmware_seed, rng::tag("layout")));
    let shapes: Vec<(VariableKind, usize)> = (0..spec.variable_count)
        .map(|_| {
            let kind = draw_kind(&mut r);
            (kind, draw_width(&mut r, kind, spec))
        })
        .collect();
    let total: usize = shapes.iter().map(|s| s.1).sum();
    if total > spec.data_section_len {
        return Err(TraceError::LayoutOverflow(format!(
            "{} variables need {} bytes but the data section holds {}",
            spec.variable_count, total, spec.data_section_len
        )));
    }

    // Spread the unused bytes over the n+1 gaps around the variables.
    let free = spec.data_section_len - total;
    let weights: Vec<u32> = (0..=shapes.len()).map(|_| r.gen_range(1..=8)).collect();
    let wsum: u32 = weights.iter().sum();
    let mut gaps: Vec<usize> = weights
        .iter()
        .map(|&w| free * w as usize / wsum as usize)
        .collect();
    let assigned: usize = gaps.iter().sum();
    *gaps.last_mut().unwrap() += free - assigned;

    let mut variables = Vec::with_capacity(shapes.len());
    let mut cursor = 0;
    for (i, &(kind, width)) in shapes.iter().enumerate() {
        cursor += gaps[i];
        variables.push(new_variable(&mut r, kind, width, cursor));
        cursor += width;
    }

    let stack = StackPattern {
        stack_len: spec.stack_len,
        frame_count: spec.frame_count,
        frame_sizes: draw_frames(&mut r, spec.stack_len, spec.frame_count),
        fill_fraction: spec.fill_fraction,
    };
    let profile = FirmwareProfile {
        format_version: PROFILE_FORMAT_VERSION,
        firmware_id: format!("fw-{firmware_seed:016x}"),
        firmware_seed,
        data_section_len: spec.data_section_len,
        jitter: spec.jitter,
        variables,
        stack,
        patches: Vec::new(),
        mutation: None,
    };
    profile.validate()?;
    Ok(profile)
}

/// Shift every byte by 64..=191 (mod 256) so each one provably changes.
fn rewrite_init<R: Rng>(rng: &mut R, v: &mut Variable) {
    for b in v.init.iter_mut() {
        *b = b.wrapping_add(rng.gen_range(64..=191));
        if v.kind == VariableKind::Flag && *b == 0 {
            *b = 0x80;
        }
    }
}

fn choose_count(severity: f64, n: usize) -> usize {
    ((severity * n as f64).ceil() as usize).min(n)
}

/// Derive a mutated (malware) variant of an unmutated profile.
pub fn mutate_profile(
    base: &FirmwareProfile,
    kind: MutationKind,
    severity: f64,
    seed: u64,
) -> Result<FirmwareProfile, TraceError> {
    if base.mutation.is_some() {
        return Err(TraceError::InvalidArgument("base profile is already mutated".into()));
    }
    if !(severity > 0.0 && severity <= 1.0) {
        return Err(TraceError::InvalidArgument(format!(
            "severity {severity} outside (0, 1]"
        )));
    }
    let mut p = base.clone();
    let mut r = rng::chacha(rng::derive_all(seed, &[base.firmware_seed, kind as u64]));
    match kind {
        MutationKind::TamperData => {
            let n = choose_count(severity, p.variables.len());
            let mut idx: Vec<usize> = (0..p.variables.len()).collect();
            idx.shuffle(&mut r);
            for &i in &idx[..n] {
                rewrite_init(&mut r, &mut p.variables[i]);
            }
        }
        MutationKind::TamperFunction => {
            let ops = ((severity * p.variables.len() as f64 / 2.0).ceil() as usize).max(1);
            for _ in 0..ops {
                let insert = p.variables.is_empty() || r.gen_bool(0.5);
                if insert {
                    insert_variable(&mut p, &mut r);
                } else {
                    let k = r.gen_range(0..p.variables.len());
                    let removed = p.variables.remove(k);
                    for v in &mut p.variables[k..] {
                        v.offset -= removed.width;
                    }
                }
            }
        }
        MutationKind::TamperControlFlow => {
            let st = &mut p.stack;
            st.frame_sizes.shuffle(&mut r);
            if !st.frame_sizes.is_empty() {
                let i = r.gen_range(0..st.frame_sizes.len());
                st.frame_sizes[i] = (st.frame_sizes[i] / 2).max(1);
            }
            st.frame_count = (st.frame_count + 1).min(st.frame_sizes.len().max(1));
            let dynamic: Vec<usize> = (0..p.variables.len())
                .filter(|&i| p.variables[i].is_dynamic())
                .collect();
            let n = choose_count(severity, dynamic.len());
            let mut picked = dynamic.clone();
            picked.shuffle(&mut r);
            for &i in &picked[..n] {
                let var = &mut p.variables[i];
                let u = &mut var.update;
                match var.kind {
                    VariableKind::Counter => u.counter_step = r.gen_range(2..=7),
                    VariableKind::RandomWalk => u.walk_drift = if r.gen_bool(0.5) { 2 } else { -2 },
                    VariableKind::Flag => u.flag_period += r.gen_range(1..=7),
                    VariableKind::Constant => unreachable!(),
                }
            }
        }
        MutationKind::DataInjection => {
            let mut gaps = p.unused_gaps();
            if gaps.is_empty() {
                return Err(TraceError::InvalidArgument(
                    "data_injection needs unused data-section bytes but the layout has none".into(),
                ));
            }
            let n = choose_count(severity, gaps.len());
            gaps.shuffle(&mut r);
            let mut chosen = gaps[..n].to_vec();
            chosen.sort_unstable();
            p.patches.extend(chosen.into_iter().map(|offset| BytePatch {
                offset,
                value: r.gen_range(1..=255),
            }));
        }
    }
    p.firmware_id = format!("{}~{}@{}", base.firmware_id, kind.as_str(), severity);
    p.mutation = Some(Mutation { kind, severity, seed });
    p.validate()?;
    Ok(p)
}

fn insert_variable<R: Rng>(p: &mut FirmwareProfile, r: &mut R) {
    let k = r.gen_range(0..=p.variables.len());
    let offset = if k < p.variables.len() {
        p.variables[k].offset
    } else {
        p.variables.last().map_or(0, Variable::end)
    };
    let kind = draw_kind(r);
    let width = r.gen_range(2..=8);
    if offset + width > p.data_section_len {
        return;
    }
    for v in &mut p.variables[k..] {
        v.offset += width;
    }
    let len = p.data_section_len;
    p.variables.retain(|v| v.end() <= len);
    let k = k.min(p.variables.len());
    let v = new_variable(r, kind, width, offset);
    p.variables.insert(k, v);
}
