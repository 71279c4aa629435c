//! Setup-phase pipeline for one firmware: collect twin traces, train the
//! denoising autoencoder, quantize it and calibrate the threshold.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autoenc::{self, Arch, AutoencoderModel, TrainConfig};
use crate::exec::{self, ExecMode};
use crate::quantize::{quantize_model, QuantizedModel};
use crate::rng;
use crate::threshold::{calibrate, CalibrationResult};
use crate::trace::{aggregate, build_dataset, sample_trace, AggregatedTrace, Dataset, FirmwareProfile, SplitRatios};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
    #[error(transparent)]
    Autoenc(#[from] crate::autoenc::AutoencError),
    #[error(transparent)]
    Quantize(#[from] crate::quantize::QuantizeError),
    #[error(transparent)]
    Threshold(#[from] crate::threshold::ThresholdError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Aggregation block width `s`.
    pub block: usize,
    /// Bytes fed to aggregation; `None` uses the whole data section.
    pub used_len: Option<usize>,
    pub noise_factor: f64,
    /// Safe twin traces collected per firmware.
    pub safe_traces: usize,
    pub arch: Arch,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            block: crate::trace::DEFAULT_BLOCK,
            used_len: None,
            noise_factor: 0.05,
            safe_traces: 1600,
            arch: Arch::M1,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn used_len(&self, profile: &FirmwareProfile) -> usize {
        self.used_len.unwrap_or(profile.data_section_len)
    }
}

/// Everything the setup phase produces for one firmware.
#[derive(Debug, Clone)]
pub struct TrainedFirmware {
    pub profile: FirmwareProfile,
    pub dataset: Dataset,
    pub model: AutoencoderModel,
    pub qmodel: QuantizedModel,
    /// Threshold calibrated on the quantized model's validation errors.
    pub calibration: CalibrationResult,
}

/// Aggregated traces of `profile` on one device over `steps`.
pub fn collect(
    profile: &FirmwareProfile,
    device_seed: u64,
    steps: Range<u64>,
    block: usize,
    used_len: usize,
    mode: ExecMode,
) -> Result<Vec<AggregatedTrace>, PipelineError> {
    let start = steps.start;
    let n = steps.end.saturating_sub(start) as usize;
    exec::map_range(mode, n, |i| aggregate(&sample_trace(profile, device_seed, start + i as u64), block, used_len))
        .into_iter()
        .map(|r| r.map_err(PipelineError::from))
        .collect()
}

/// Split and noise `safe` aggregates exactly as [`train_on`] does.
pub fn prepare_dataset(safe: &[AggregatedTrace], unsafe_: &[AggregatedTrace], cfg: &PipelineConfig, seed: u64) -> Result<Dataset, PipelineError> {
    Ok(build_dataset(safe, unsafe_, SplitRatios::default(), cfg.noise_factor, rng::derive(seed, rng::tag("split")))?)
}

/// Initialize and train the float autoencoder on a prepared dataset.
pub fn fit_float(dataset: &Dataset, cfg: &PipelineConfig, seed: u64) -> Result<AutoencoderModel, PipelineError> {
    let init = autoenc::init_model(cfg.arch, dataset.train.cols(), rng::derive(seed, rng::tag("init")))?;
    let train_cfg = TrainConfig {
        seed: rng::derive(seed, rng::tag("train")),
        ..cfg.train.clone()
    };
    Ok(autoenc::train(&init, dataset, &train_cfg)?)
}

/// Quantize with the clean training split as calibration data.
pub fn quantize_on(model: &AutoencoderModel, dataset: &Dataset) -> Result<QuantizedModel, PipelineError> {
    Ok(quantize_model(model, &dataset.train)?)
}

/// Calibrate the threshold on the quantized model's validation errors.
pub fn calibrate_on(qmodel: &QuantizedModel, dataset: &Dataset) -> Result<CalibrationResult, PipelineError> {
    Ok(calibrate(&qmodel.errors(&dataset.val)?)?)
}

/// Train, quantize and calibrate on `safe` aggregates. `unsafe_` only fills
/// the dataset's unsafe test matrix.
pub fn train_on(
    profile: &FirmwareProfile,
    safe: &[AggregatedTrace],
    unsafe_: &[AggregatedTrace],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<TrainedFirmware, PipelineError> {
    let dataset = prepare_dataset(safe, unsafe_, cfg, seed)?;
    let model = fit_float(&dataset, cfg, seed)?;
    let qmodel = quantize_on(&model, &dataset)?;
    let calibration = calibrate_on(&qmodel, &dataset)?;
    Ok(TrainedFirmware {
        profile: profile.clone(),
        dataset,
        model,
        qmodel,
        calibration,
    })
}

/// Collect `cfg.safe_traces` twin traces from time step 0 and run [`train_on`].
pub fn train_firmware(
    profile: &FirmwareProfile,
    twin_seed: u64,
    cfg: &PipelineConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<TrainedFirmware, PipelineError> {
    let used = cfg.used_len(profile);
    let safe = collect(profile, twin_seed, 0..cfg.safe_traces as u64, cfg.block, used, mode)?;
    train_on(profile, &safe, &[], cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_profile, LayoutSpec};

    #[test]
    fn small_pipeline_runs_and_is_deterministic() {
        let spec = LayoutSpec {
            data_section_len: 64,
            variable_count: 8,
            ..LayoutSpec::default()
        };
        let p = generate_profile(5, &spec).unwrap();
        let cfg = PipelineConfig {
            safe_traces: 120,
            train: TrainConfig { epochs: 5, ..TrainConfig::default() },
            ..PipelineConfig::default()
        };
        let a = train_firmware(&p, 1, &cfg, 9, ExecMode::Parallel).unwrap();
        let b = train_firmware(&p, 1, &cfg, 9, ExecMode::Sequential).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.qmodel, b.qmodel);
        assert_eq!(a.calibration, b.calibration);
        assert_eq!(a.dataset.train.rows(), 60);
    }
}
