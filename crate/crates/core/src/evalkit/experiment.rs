//! Cross-firmware evaluation campaign.
//!
//! For each firmware `f` a model is trained on `f`'s safe traces. Its test
//! set holds `f`'s safe test split as negatives, and as positives every
//! mutated trace of `f` plus every trace, safe or mutated, of every other
//! firmware. The optional twin leg repeats the scoring on traces captured
//! from a second device that never contributed training data.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{histogram, score, EvalError, MetricsReport};
use crate::container::{self, Metadata};
use crate::exec::{self, ExecMode};
use crate::matrix::Matrix;
use crate::pipeline::{self, PipelineConfig, PipelineError, TrainedFirmware};
use crate::quantize::{size_report, SizeReport};
use crate::rng;
use crate::threshold::CalibrationResult;
use crate::trace::{generate_profile, mutate_profile, AggregatedTrace, FirmwareProfile, Label, LayoutSpec, MutationKind};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
    #[error(transparent)]
    Autoenc(#[from] crate::autoenc::AutoencError),
    #[error(transparent)]
    Quantize(#[from] crate::quantize::QuantizeError),
    #[error(transparent)]
    Container(#[from] crate::container::ContainerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(with = "rng::seed_hex")]
    pub seed: u64,
    pub firmware_count: usize,
    pub layout: LayoutSpec,
    pub mutation_kinds: Vec<MutationKind>,
    pub severities: Vec<f64>,
    /// Traces captured per mutated firmware image.
    pub traces_per_mutation: usize,
    pub pipeline: PipelineConfig,
    pub twin_transfer: bool,
    /// Safe traces captured from the second device per firmware.
    pub twin_traces: usize,
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            firmware_count: 8,
            layout: LayoutSpec::default(),
            mutation_kinds: MutationKind::ALL.to_vec(),
            severities: vec![0.25, 0.5, 1.0],
            traces_per_mutation: 100,
            pipeline: PipelineConfig::default(),
            twin_transfer: true,
            twin_traces: 400,
            histogram_bins: 50,
        }
    }
}

impl ExperimentConfig {
    /// Check every field, naming the offending path.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |path: &str, msg: String| Err(ExperimentError::Config(format!("{path}: {msg}")));
        if self.firmware_count == 0 {
            return bad("firmware_count", "must be at least 1".into());
        }
        for (i, s) in self.severities.iter().enumerate() {
            if !(*s > 0.0 && *s <= 1.0) {
                return bad(&format!("severities[{i}]"), format!("{s} outside (0, 1]"));
            }
        }
        if !self.mutation_kinds.is_empty() && !self.severities.is_empty() && self.traces_per_mutation == 0 {
            return bad("traces_per_mutation", "must be positive".into());
        }
        if self.pipeline.block == 0 {
            return bad("pipeline.block", "must be positive".into());
        }
        if self.pipeline.safe_traces < 8 {
            return bad("pipeline.safe_traces", format!("{} < 8", self.pipeline.safe_traces));
        }
        if !(self.pipeline.noise_factor >= 0.0) {
            return bad("pipeline.noise_factor", "must be non-negative".into());
        }
        if let Some(u) = self.pipeline.used_len {
            if u < 2 * self.pipeline.block || u > self.layout.data_section_len {
                return bad("pipeline.used_len", format!("{u} outside [{}, {}]", 2 * self.pipeline.block, self.layout.data_section_len));
            }
        }
        if self.layout.data_section_len / self.pipeline.block < 2 {
            return bad("layout.data_section_len", "fewer than two aggregation blocks".into());
        }
        self.pipeline.train.validate().map_err(|e| ExperimentError::Config(format!("pipeline.train: {e}")))?;
        if self.twin_transfer && self.twin_traces == 0 {
            return bad("twin_traces", "must be positive when twin_transfer is on".into());
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins", "must be positive".into());
        }
        Ok(())
    }

    fn mutations(&self) -> Vec<(MutationKind, f64)> {
        self.mutation_kinds.iter().flat_map(|&k| self.severities.iter().map(move |&s| (k, s))).collect()
    }
}

/// Hex SHA-256 of the TOML rendering of a configuration.
pub fn config_digest<T: Serialize>(cfg: &T) -> String {
    let text = toml::to_string(cfg).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Stamped into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_digest: String,
    pub seed: u64,
}

impl Provenance {
    pub fn lines(&self) -> Vec<String> {
        vec![format!("config_digest={}", self.config_digest), format!("seed={:#018x}", self.seed)]
    }

    pub fn metadata(&self) -> Metadata {
        self.lines().iter().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceRole {
    /// The twin device that supplies training data.
    Training,
    /// A second device of the same model that only supplies test data.
    Deployed,
}

impl DeviceRole {
    fn tag(self) -> u64 {
        match self {
            DeviceRole::Training => rng::tag("device-a"),
            DeviceRole::Deployed => rng::tag("device-b"),
        }
    }
}

pub fn firmware_profile(cfg: &ExperimentConfig, k: usize) -> Result<FirmwareProfile, ExperimentError> {
    Ok(generate_profile(rng::derive_all(cfg.seed, &[rng::tag("firmware"), k as u64]), &cfg.layout)?)
}

/// Seed of firmware `k`'s training stages.
pub fn train_seed(cfg: &ExperimentConfig, k: usize) -> u64 {
    rng::derive_all(cfg.seed, &[rng::tag("train"), k as u64])
}

pub fn device_seed(cfg: &ExperimentConfig, k: usize, role: DeviceRole) -> u64 {
    rng::derive_all(cfg.seed, &[role.tag(), k as u64])
}

/// Mutated images of firmware `k`, in `mutation_kinds` x `severities` order.
pub fn mutants(cfg: &ExperimentConfig, k: usize, base: &FirmwareProfile) -> Result<Vec<FirmwareProfile>, ExperimentError> {
    cfg.mutations()
        .into_iter()
        .enumerate()
        .map(|(j, (kind, sev))| Ok(mutate_profile(base, kind, sev, rng::derive_all(cfg.seed, &[rng::tag("mutation"), k as u64, j as u64]))?))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FirmwareTraces {
    pub profile: FirmwareProfile,
    pub mutants: Vec<FirmwareProfile>,
    pub safe: Vec<AggregatedTrace>,
    pub mutated: Vec<AggregatedTrace>,
    /// Index into `mutants` for each row of `mutated`.
    pub mutant_of: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub firmware: Vec<FirmwareTraces>,
}

/// Capture firmware `k` and its mutants on one device. Safe traces come
/// from time steps `0..safe_count`; each mutant contributes
/// `traces_per_mutation` traces from a window inside that range.
pub fn collect_firmware(cfg: &ExperimentConfig, k: usize, role: DeviceRole, safe_count: usize, mode: ExecMode) -> Result<FirmwareTraces, ExperimentError> {
    let profile = firmware_profile(cfg, k)?;
    let muts = mutants(cfg, k, &profile)?;
    let dev = device_seed(cfg, k, role);
    let (block, used) = (cfg.pipeline.block, cfg.pipeline.used_len(&profile));
    let safe = pipeline::collect(&profile, dev, 0..safe_count as u64, block, used, mode)?;
    let tpm = cfg.traces_per_mutation;
    let span = safe_count.saturating_sub(tpm).max(1);
    let mut mutated = Vec::with_capacity(muts.len() * tpm);
    let mut mutant_of = Vec::with_capacity(muts.len() * tpm);
    for (j, m) in muts.iter().enumerate() {
        let start = ((j * tpm) % span) as u64;
        mutated.extend(pipeline::collect(m, dev, start..start + tpm as u64, block, used, mode)?);
        mutant_of.extend(std::iter::repeat(j).take(tpm));
    }
    Ok(FirmwareTraces {
        profile,
        mutants: muts,
        safe,
        mutated,
        mutant_of,
    })
}

/// [`collect_firmware`] for the whole suite.
pub fn collect_suite(cfg: &ExperimentConfig, role: DeviceRole, safe_count: usize, mode: ExecMode) -> Result<Suite, ExperimentError> {
    let firmware = exec::map_range(mode, cfg.firmware_count, |k| collect_firmware(cfg, k, role, safe_count, ExecMode::Sequential))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let l = firmware[0].safe[0].features.len();
    if firmware.iter().any(|f| f.safe.iter().chain(&f.mutated).any(|t| t.features.len() != l)) {
        return Err(ExperimentError::Config("layout: firmware images aggregate to different lengths".into()));
    }
    Ok(Suite { firmware })
}

fn matrix(rows: &[AggregatedTrace]) -> Matrix {
    let l = rows.first().map_or(0, |r| r.features.len());
    Matrix::from_rows(l, rows.iter().map(|r| r.features.as_slice()))
}

/// Reconstruction errors of one leg's positives, own mutants first.
fn positive_errors(tf: &TrainedFirmware, suite: &Suite, k: usize, float: bool) -> Result<Vec<f64>, ExperimentError> {
    let errs = |rows: &[AggregatedTrace]| -> Result<Vec<f64>, ExperimentError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let m = matrix(rows);
        Ok(if float { tf.model.errors(&m)? } else { tf.qmodel.errors(&m)? })
    };
    let mut out = errs(&suite.firmware[k].mutated)?;
    for (o, f) in suite.firmware.iter().enumerate() {
        if o != k {
            out.extend(errs(&f.safe)?);
            out.extend(errs(&f.mutated)?);
        }
    }
    Ok(out)
}

fn labelled(neg: &[f64], pos: &[f64]) -> (Vec<f64>, Vec<Label>) {
    let errors = neg.iter().chain(pos).copied().collect();
    let labels = std::iter::repeat(Label::Safe).take(neg.len()).chain(std::iter::repeat(Label::Unsafe).take(pos.len())).collect();
    (errors, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MutantDetection {
    pub kind: MutationKind,
    pub severity: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwinResult {
    pub metrics: MetricsReport,
    pub n_negatives: usize,
    pub n_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirmwareResult {
    pub firmware_id: String,
    pub calibration: CalibrationResult,
    /// Quantized model decisions, as deployed.
    pub metrics: MetricsReport,
    pub float_metrics: MetricsReport,
    pub n_negatives: usize,
    pub n_own_mutated: usize,
    pub n_other: usize,
    /// Share of validation rows on which float and quantized decisions agree.
    pub val_agreement: f64,
    /// Largest absolute float-vs-quantized output difference on validation.
    pub max_output_deviation: f64,
    pub size: SizeReport,
    pub mutants: Vec<MutantDetection>,
    pub twin: Option<TwinResult>,
    #[serde(skip)]
    pub histogram: Vec<(f64, usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AverageMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub f1: f64,
    pub f1_safe: f64,
    pub roc_auc: f64,
}

impl AverageMetrics {
    fn of<'a>(ms: impl Iterator<Item = &'a MetricsReport>) -> Option<Self> {
        let ms: Vec<_> = ms.collect();
        if ms.is_empty() {
            return None;
        }
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / ms.len() as f64;
        Some(AverageMetrics {
            accuracy: mean(&|m| m.accuracy),
            precision: mean(&|m| m.precision),
            tpr: mean(&|m| m.tpr),
            tnr: mean(&|m| m.tnr),
            f1: mean(&|m| m.f1),
            f1_safe: mean(&|m| m.f1_safe),
            roc_auc: mean(&|m| m.roc_auc.unwrap_or(f64::NAN)),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub firmware: Vec<FirmwareResult>,
    pub average: AverageMetrics,
    pub float_average: AverageMetrics,
    pub twin_average: Option<AverageMetrics>,
    #[serde(skip)]
    pub models: Vec<TrainedFirmware>,
}

fn run_leg(
    cfg: &ExperimentConfig,
    suite: &Suite,
    twin: Option<&Suite>,
    k: usize,
) -> Result<(FirmwareResult, TrainedFirmware), ExperimentError> {
    let own = &suite.firmware[k];
    let tf = pipeline::train_on(&own.profile, &own.safe, &[], &cfg.pipeline, train_seed(cfg, k))?;
    let t = tf.calibration.t_opt;

    let neg_q = tf.qmodel.errors(&tf.dataset.test_safe)?;
    let pos_q = positive_errors(&tf, suite, k, false)?;
    let (e, l) = labelled(&neg_q, &pos_q);
    let metrics = score(&e, &l, t)?;

    let neg_f = tf.model.errors(&tf.dataset.test_safe)?;
    let pos_f = positive_errors(&tf, suite, k, true)?;
    let (ef, lf) = labelled(&neg_f, &pos_f);
    let float_metrics = score(&ef, &lf, t)?;

    let val = &tf.dataset.val;
    let mut agree = 0;
    let mut max_dev: f64 = 0.0;
    for row in val.iter_rows() {
        let f = tf.model.reconstruct(row)?;
        let q = tf.qmodel.q_reconstruct(row)?;
        let mse = |r: &[f64]| r.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / row.len() as f64;
        if (mse(&f) >= t) == (mse(&q) >= t) {
            agree += 1;
        }
        max_dev = f.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(max_dev, f64::max);
    }

    let mutants = own
        .mutants
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let rows: Vec<f64> = own.mutant_of.iter().zip(&pos_q).filter(|(&o, _)| o == j).map(|(_, &e)| e).collect();
            let mutation = m.mutation.as_ref().expect("mutant carries its mutation");
            MutantDetection {
                kind: mutation.kind,
                severity: mutation.severity,
                tpr: rows.iter().filter(|&&e| e >= t).count() as f64 / rows.len().max(1) as f64,
            }
        })
        .collect();

    let twin = match twin {
        Some(ts) => {
            let neg = tf.qmodel.errors(&matrix(&ts.firmware[k].safe))?;
            let pos = positive_errors(&tf, ts, k, false)?;
            let (e, l) = labelled(&neg, &pos);
            Some(TwinResult {
                metrics: score(&e, &l, t)?,
                n_negatives: neg.len(),
                n_positives: pos.len(),
            })
        }
        None => None,
    };

    let hi = e.iter().copied().fold(0.0, f64::max);
    let bins = cfg.histogram_bins;
    let hs = histogram(&neg_q, 0.0, hi, bins);
    let hu = histogram(&pos_q, 0.0, hi, bins);
    let hist = (0..bins).map(|b| (hi * b as f64 / bins as f64, hs[b], hu[b])).collect();

    let n_other = suite.firmware.iter().enumerate().filter(|(o, _)| *o != k).map(|(_, f)| f.safe.len() + f.mutated.len()).sum();
    let result = FirmwareResult {
        firmware_id: own.profile.firmware_id.clone(),
        calibration: tf.calibration,
        metrics,
        float_metrics,
        n_negatives: neg_q.len(),
        n_own_mutated: own.mutated.len(),
        n_other,
        val_agreement: agree as f64 / val.rows().max(1) as f64,
        max_output_deviation: max_dev,
        size: size_report(&tf.model, &tf.qmodel)?,
        mutants,
        twin,
        histogram: hist,
    };
    Ok((result, tf))
}

/// Run the full campaign. Artifacts go under `out` when given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    provenance: &Provenance,
    out: Option<&Path>,
    mode: ExecMode,
) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let suite = collect_suite(cfg, DeviceRole::Training, cfg.pipeline.safe_traces, mode)?;
    let twin = if cfg.twin_transfer {
        Some(collect_suite(cfg, DeviceRole::Deployed, cfg.twin_traces, mode)?)
    } else {
        None
    };
    let legs = exec::map_range(mode, cfg.firmware_count, |k| run_leg(cfg, &suite, twin.as_ref(), k))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let (firmware, models): (Vec<_>, Vec<_>) = legs.into_iter().unzip();
    let report = ExperimentReport {
        provenance: provenance.clone(),
        average: AverageMetrics::of(firmware.iter().map(|f| &f.metrics)).expect("at least one firmware"),
        float_average: AverageMetrics::of(firmware.iter().map(|f| &f.float_metrics)).expect("at least one firmware"),
        twin_average: AverageMetrics::of(firmware.iter().filter_map(|f| f.twin.as_ref().map(|t| &t.metrics))),
        firmware,
        models,
    };
    if let Some(dir) = out {
        write_artifacts(&report, dir)?;
    }
    Ok(report)
}

const TABLE_HEADER: [&str; 16] = [
    "firmware", "gamma", "tnr_target", "t_opt", "accuracy", "precision", "tpr", "tnr", "fpr", "fnr", "f1_unsafe", "f1_safe", "roc_auc", "twin_tnr",
    "twin_tpr", "val_agreement",
];

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn table_row(f: &FirmwareResult) -> Vec<String> {
    let m = &f.metrics;
    let twin = |g: fn(&MetricsReport) -> f64| f.twin.as_ref().map_or(String::new(), |t| num(g(&t.metrics)));
    vec![
        f.firmware_id.clone(),
        num(f.calibration.gamma),
        num(f.calibration.tnr_target),
        format!("{:e}", f.calibration.t_opt),
        num(m.accuracy),
        num(m.precision),
        num(m.tpr),
        num(m.tnr),
        num(m.fpr),
        num(m.fnr),
        num(m.f1),
        num(m.f1_safe),
        m.roc_auc.map_or(String::new(), num),
        twin(|m| m.tnr),
        twin(|m| m.tpr),
        num(f.val_agreement),
    ]
}

fn comment_header(w: &mut impl Write, p: &Provenance) -> std::io::Result<()> {
    for l in p.lines() {
        writeln!(w, "# {l}")?;
    }
    Ok(())
}

fn csv_file(path: &Path, p: &Provenance, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), ExperimentError> {
    let mut buf = Vec::new();
    comment_header(&mut buf, p)?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(std::io::Error::from)?;
        for r in rows {
            w.write_record(&r).map_err(std::io::Error::from)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Table, JSON report, calibration records, models and histograms.
pub fn write_artifacts(report: &ExperimentReport, dir: &Path) -> Result<(), ExperimentError> {
    let p = &report.provenance;
    for sub in ["models", "calibration", "histograms"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut rows: Vec<Vec<String>> = report.firmware.iter().map(table_row).collect();
    let a = &report.average;
    let mut avg = vec!["average".to_string(), String::new(), String::new(), String::new()];
    avg.extend([a.accuracy, a.precision, a.tpr, a.tnr].map(num));
    avg.extend([String::new(), String::new()]);
    avg.extend([a.f1, a.f1_safe, a.roc_auc].map(num));
    match &report.twin_average {
        Some(t) => avg.extend([t.tnr, t.tpr].map(num)),
        None => avg.extend([String::new(), String::new()]),
    }
    avg.push(String::new());
    rows.push(avg);
    csv_file(&dir.join("table.csv"), p, &TABLE_HEADER, rows)?;

    let mut json = serde_json::to_vec_pretty(report).map_err(std::io::Error::from)?;
    json.push(b'\n');
    fs::write(dir.join("report.json"), json)?;

    for (f, tf) in report.firmware.iter().zip(&report.models) {
        let id = &f.firmware_id;
        let mut rec = Vec::new();
        comment_header(&mut rec, p)?;
        rec.extend(f.calibration.to_record().as_bytes());
        fs::write(dir.join("calibration").join(format!("{id}.txt")), rec)?;

        let mut meta = p.metadata();
        meta.insert("firmware_id".into(), id.clone());
        container::insert_calibration(&mut meta, &f.calibration);
        container::save(&dir.join("models").join(format!("{id}.float.lam")), &container::write_float(&tf.model, &meta))?;
        container::save(&dir.join("models").join(format!("{id}.int8.lam")), &container::write_quantized(&tf.qmodel, &meta))?;

        let hist = f.histogram.iter().map(|(lo, s, u)| vec![format!("{lo:e}"), s.to_string(), u.to_string()]);
        csv_file(&dir.join("histograms").join(format!("{id}.csv")), p, &["bin_start", "safe", "unsafe"], hist)?;
    }
    Ok(())
}

impl std::fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<20} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "firmware", "target", "acc", "tpr", "tnr", "f1", "f1_safe", "auc")?;
        for r in &self.firmware {
            let m = &r.metrics;
            writeln!(
                f,
                "{:<20} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                r.firmware_id,
                r.calibration.tnr_target,
                m.accuracy,
                m.tpr,
                m.tnr,
                m.f1,
                m.f1_safe,
                m.roc_auc.unwrap_or(f64::NAN)
            )?;
        }
        let a = &self.average;
        writeln!(
            f,
            "{:<20} {:>7} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            "average", "", a.accuracy, a.tpr, a.tnr, a.f1, a.f1_safe, a.roc_auc
        )?;
        if let Some(t) = &self.twin_average {
            writeln!(f, "twin transfer: tnr {:.4} tpr {:.4}", t.tnr, t.tpr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::TrainConfig;

    pub(crate) fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            firmware_count: 3,
            layout: LayoutSpec {
                data_section_len: 64,
                variable_count: 8,
                stack_len: 32,
                ..LayoutSpec::default()
            },
            severities: vec![1.0],
            traces_per_mutation: 10,
            pipeline: PipelineConfig {
                safe_traces: 120,
                train: TrainConfig { epochs: 5, ..TrainConfig::default() },
                ..PipelineConfig::default()
            },
            twin_traces: 40,
            histogram_bins: 8,
            ..ExperimentConfig::default()
        }
    }

    fn prov() -> Provenance {
        Provenance {
            config_digest: config_digest(&small_config()),
            seed: 3,
        }
    }

    #[test]
    fn positives_match_cross_firmware_recount() {
        let cfg = small_config();
        let r = run_experiment(&cfg, &prov(), None, ExecMode::Parallel).unwrap();
        let per_fw = 120 + 4 * 10;
        for f in &r.firmware {
            assert_eq!(f.n_own_mutated, 40);
            assert_eq!(f.n_other, 2 * per_fw);
            assert_eq!(f.metrics.counts.positives(), 40 + 2 * per_fw);
            assert_eq!(f.metrics.counts.negatives(), 30);
            assert_eq!(f.twin.as_ref().unwrap().n_positives, 40 + 2 * (40 + 40));
            assert_eq!(f.mutants.len(), 4);
            let c = f.metrics.counts;
            assert_eq!(c.tp + c.fn_, f.metrics.counts.positives());
            assert_eq!(f.metrics.tpr + f.metrics.fnr, 1.0);
        }
    }

    #[test]
    fn artifacts_are_deterministic_across_modes() {
        let cfg = small_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&cfg, &prov(), Some(a.path()), ExecMode::Parallel).unwrap();
        run_experiment(&cfg, &prov(), Some(b.path()), ExecMode::Sequential).unwrap();
        for rel in ["table.csv", "report.json"] {
            let x = fs::read(a.path().join(rel)).unwrap();
            assert_eq!(x, fs::read(b.path().join(rel)).unwrap(), "{rel}");
            assert!(String::from_utf8(x).unwrap().contains(&prov().config_digest));
        }
        let table = fs::read_to_string(a.path().join("table.csv")).unwrap();
        assert!(table.lines().nth(2).unwrap().starts_with("firmware,gamma,tnr_target,t_opt,accuracy"));
        assert_eq!(fs::read_dir(a.path().join("models")).unwrap().count(), 6);
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = small_config();
        cfg.severities = vec![0.5, 1.5];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("severities[1]"), "{err}");
        let mut cfg = small_config();
        cfg.pipeline.train.batch_size = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("pipeline.train"));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(config_digest(&back), config_digest(&cfg));
    }
}
