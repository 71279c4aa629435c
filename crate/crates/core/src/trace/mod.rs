//! Simulated SRAM traces, block aggregation and dataset assembly.

mod csv_io;
mod dataset;
mod profile;

pub use csv_io::{
    export_aggregated, export_traces, import_aggregated, import_traces, read_aggregated,
    read_traces, write_aggregated, write_traces,
};
pub use dataset::{build_dataset, inject_noise, Dataset, DatasetMeta, SplitRatios};
pub use profile::{
    generate_profile, mutate_profile, BytePatch, FirmwareProfile, LayoutSpec, Mutation,
    MutationKind, StackPattern, UpdateRule, Variable, VariableKind, PROFILE_FORMAT_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Default aggregation block width in bytes.
pub const DEFAULT_BLOCK: usize = 4;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("layout overflow: {0}")]
    LayoutOverflow(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("profile: {0}")]
    Profile(String),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Safe,
    Unsafe,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Safe => "safe",
            Label::Unsafe => "unsafe",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "safe" => Some(Label::Safe),
            "unsafe" => Some(Label::Unsafe),
            _ => None,
        }
    }

    pub fn is_unsafe(self) -> bool {
        self == Label::Unsafe
    }
}

/// Raw SRAM snapshot of one device at one simulated sample index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SramTrace {
    pub device_id: String,
    pub firmware_id: String,
    pub time_step: u64,
    pub bytes: Vec<u8>,
    pub label: Label,
}

/// Normalized block means of the used SRAM prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedTrace {
    pub features: Vec<f64>,
    pub device_id: String,
    pub firmware_id: String,
    pub time_step: u64,
    pub label: Label,
}

pub fn device_id(device_seed: u64) -> String {
    format!("dev-{device_seed:016x}")
}

/// Value of a variable's bytes at `time_step`, before device jitter.
fn variable_bytes(p: &FirmwareProfile, v: &Variable, time_step: u64, out: &mut [u8]) {
    out.copy_from_slice(&v.init);
    match v.kind {
        VariableKind::Constant => {}
        VariableKind::Counter => {
            let step = v.update.counter_step as u64;
            out[0] = (v.init[0] as u64).wrapping_add(step.wrapping_mul(time_step)) as u8;
        }
        VariableKind::RandomWalk => {
            let seed = rng::derive(p.firmware_seed, v.init_seed);
            let mut level: i64 = 0;
            for k in 0..time_step {
                level += if rng::derive(seed, k) & 1 == 1 { 1 } else { -1 };
                level += v.update.walk_drift as i64;
            }
            for (o, &b) in out.iter_mut().zip(&v.init) {
                *o = (b as i64 + level).clamp(0, 255) as u8;
            }
        }
        VariableKind::Flag => {
            let on = (time_step / v.update.flag_period.max(1) as u64) % 2 == 0;
            if !on {
                out.iter_mut().for_each(|b| *b = 0);
            }
        }
    }
}

/// Render one SRAM snapshot. Total: a pure function of its arguments.
///
/// Layout is `[data section | stack region]`. The data section depends only
/// on the profile and `time_step`, apart from a bounded per-device jitter on
/// random-walk variables. The stack region starts from device-specific
/// power-up noise and is partly overwritten by firmware-determined frames.
pub fn sample_trace(profile: &FirmwareProfile, device_seed: u64, time_step: u64) -> SramTrace {
    let mut bytes = vec![0u8; profile.sram_len()];
    let data = &mut bytes[..profile.data_section_len];
    for v in &profile.variables {
        let slot = &mut data[v.offset..v.end()];
        variable_bytes(profile, v, time_step, slot);
        if v.kind == VariableKind::RandomWalk && profile.jitter > 0 {
            let j = profile.jitter as i64;
            let h = rng::derive_all(device_seed, &[v.init_seed, time_step]);
            let delta = (h % (2 * j as u64 + 1)) as i64 - j;
            for b in slot.iter_mut() {
                *b = (*b as i64 + delta).clamp(0, 255) as u8;
            }
        }
    }
    for patch in &profile.patches {
        data[patch.offset] = patch.value;
    }

    let stack = &mut bytes[profile.data_section_len..];
    let mut noise = rng::chacha(rng::derive(device_seed, rng::tag("sram-powerup")));
    rand::RngCore::fill_bytes(&mut noise, stack);
    let st = &profile.stack;
    if !st.frame_sizes.is_empty() && st.frame_count > 0 {
        let depth = 1 + (time_step % st.frame_count as u64) as usize;
        let threshold = (st.fill_fraction * u32::MAX as f64) as u64;
        // Frames grow downward from the top of the stack region.
        let mut top = stack.len();
        for (fi, &size) in st.frame_sizes.iter().take(depth).enumerate() {
            let start = top.saturating_sub(size);
            for pos in start..top {
                let h = rng::derive_all(profile.firmware_seed, &[rng::tag("frame"), fi as u64, pos as u64]);
                if (h >> 32) <= threshold {
                    stack[pos] = h as u8;
                }
            }
            top = start;
        }
    }

    SramTrace {
        device_id: device_id(device_seed),
        firmware_id: profile.firmware_id.clone(),
        time_step,
        bytes,
        label: if profile.is_mutated() { Label::Unsafe } else { Label::Safe },
    }
}

/// Block-average the first `used_len` bytes in `block`-byte groups, scaled
/// to `[0, 1]`: feature `i` is the mean of bytes `i*block .. (i+1)*block`
/// (half-open) divided by 255.
pub fn aggregate(trace: &SramTrace, block: usize, used_len: usize) -> Result<AggregatedTrace, TraceError> {
    Ok(AggregatedTrace {
        features: aggregate_bytes(&trace.bytes, block, used_len)?,
        device_id: trace.device_id.clone(),
        firmware_id: trace.firmware_id.clone(),
        time_step: trace.time_step,
        label: trace.label,
    })
}

pub fn aggregate_bytes(bytes: &[u8], block: usize, used_len: usize) -> Result<Vec<f64>, TraceError> {
    if block == 0 {
        return Err(TraceError::InvalidArgument("block width must be positive".into()));
    }
    if used_len == 0 || used_len % block != 0 {
        return Err(TraceError::InvalidArgument(format!(
            "used length {used_len} is not a positive multiple of block width {block}"
        )));
    }
    if used_len > bytes.len() {
        return Err(TraceError::InvalidArgument(format!(
            "used length {used_len} exceeds trace length {}",
            bytes.len()
        )));
    }
    let denom = 255.0 * block as f64;
    Ok(bytes[..used_len]
        .chunks_exact(block)
        .map(|c| c.iter().map(|&b| b as u32).sum::<u32>() as f64 / denom)
        .collect())
}
