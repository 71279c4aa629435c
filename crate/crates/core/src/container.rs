//! `LAM1` model container for float and quantized autoencoders.
//!
//! All integers little-endian. Layout:
//!
//! ```text
//! magic "LAM1" | version u16 | section u8 (0 float, 1 quantized) | arch u8
//! input_dim u32 | dropout f64 | layer_count u16
//! layer_count x descriptor { kind u8, activation u8, dims [u32; 4] }
//! layer_count x parameters
//!     float:     weights f32[], biases f32[]
//!     quantized: weight_scale f32, bias_scale f32, weights i8[], biases i32[]
//! quantized only: boundary_count u16, boundary_count x { scale f32, zero_point i8 }
//! digest [u8; 32]  (float: own parameters, quantized: source float model)
//! metadata_len u32 | metadata UTF-8 `key=value` lines
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::autoenc::{Activation, Arch, AutoencoderModel, Layer, TrainMeta};
use crate::quantize::{model_digest, QLayer, QParams, QuantizedModel};
use crate::threshold::CalibrationResult;

pub const MAGIC: &[u8; 4] = b"LAM1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 4 + 8 + 2;
pub const LAYER_DESCRIPTOR_LEN: usize = 2 + 4 * 4;

const SECTION_FLOAT: u8 = 0;
const SECTION_QUANT: u8 = 1;
const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_POOL: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("not a LAM1 container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("truncated container at byte {0}")]
    Truncated(usize),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("expected a {expected} model")]
    WrongSection { expected: &'static str },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Float(AutoencoderModel),
    Quantized(QuantizedModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub model: ModelFile,
    pub digest: [u8; 32],
    pub metadata: Metadata,
}

impl Container {
    pub fn into_float(self) -> Result<(AutoencoderModel, Metadata), ContainerError> {
        match self.model {
            ModelFile::Float(m) => Ok((m, self.metadata)),
            ModelFile::Quantized(_) => Err(ContainerError::WrongSection { expected: "float" }),
        }
    }

    pub fn into_quantized(self) -> Result<(QuantizedModel, Metadata), ContainerError> {
        match self.model {
            ModelFile::Quantized(q) => Ok((q, self.metadata)),
            ModelFile::Float(_) => Err(ContainerError::WrongSection { expected: "quantized" }),
        }
    }
}

fn act_tag(a: Activation) -> u8 {
    a.tag()
}

fn header(out: &mut Vec<u8>, section: u8, arch: Arch, input_dim: usize, dropout: f64, layers: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(section);
    out.push(arch.tag());
    out.extend_from_slice(&(input_dim as u32).to_le_bytes());
    out.extend_from_slice(&dropout.to_le_bytes());
    out.extend_from_slice(&(layers as u16).to_le_bytes());
}

fn descriptor(out: &mut Vec<u8>, kind: u8, act: u8, dims: [usize; 4]) {
    out.push(kind);
    out.push(act);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn metadata_block(out: &mut Vec<u8>, meta: &Metadata) {
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
}

/// Metadata entries describing a training run.
pub fn train_meta_entries(meta: &TrainMeta) -> Metadata {
    let losses: Vec<String> = meta.epoch_losses.iter().map(|l| format!("{l:?}")).collect();
    [
        ("train.epochs", meta.epochs.to_string()),
        ("train.batch_size", meta.batch_size.to_string()),
        ("train.learning_rate", format!("{:?}", meta.learning_rate)),
        ("train.seed", meta.seed.to_string()),
        ("train.final_train_mse", format!("{:?}", meta.final_train_mse)),
        ("train.epoch_losses", losses.join(",")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn train_meta_from(meta: &Metadata) -> Option<TrainMeta> {
    let get = |k: &str| meta.get(&format!("train.{k}"));
    let losses = get("epoch_losses")?;
    Some(TrainMeta {
        epochs: get("epochs")?.parse().ok()?,
        batch_size: get("batch_size")?.parse().ok()?,
        learning_rate: get("learning_rate")?.parse().ok()?,
        seed: get("seed")?.parse().ok()?,
        final_train_mse: get("final_train_mse")?.parse().ok()?,
        epoch_losses: if losses.is_empty() {
            Vec::new()
        } else {
            losses.split(',').map(|v| v.parse().ok()).collect::<Option<_>>()?
        },
    })
}

/// Store a calibration record under `calibration.*` keys.
pub fn insert_calibration(meta: &mut Metadata, c: &CalibrationResult) {
    for line in c.to_record().lines() {
        if let Some((k, v)) = line.split_once('=') {
            meta.insert(format!("calibration.{k}"), v.to_string());
        }
    }
}

pub fn calibration_from(meta: &Metadata) -> Option<CalibrationResult> {
    let text: String = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("calibration.").map(|k| format!("{k}={v}\n")))
        .collect();
    CalibrationResult::from_record(&text).ok()
}

/// Serialize a float model. Training metadata, if present, is added to
/// `extra` in the metadata block.
pub fn write_float(model: &AutoencoderModel, extra: &Metadata) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, SECTION_FLOAT, model.arch, model.input_dim, model.dropout_rate, model.layers.len());
    for l in &model.layers {
        match l {
            Layer::Dense { input, output, activation, .. } => {
                descriptor(&mut out, KIND_DENSE, act_tag(*activation), [*input, *output, 0, 0])
            }
            Layer::Conv1d { channels_in, channels_out, kernel, length, activation, .. } => descriptor(
                &mut out,
                KIND_CONV,
                act_tag(*activation),
                [*channels_in, *channels_out, *kernel, *length],
            ),
            Layer::MaxPool1d { channels, length, width } => {
                descriptor(&mut out, KIND_POOL, act_tag(Activation::Linear), [*channels, *length, *width, 0])
            }
        }
    }
    for l in &model.layers {
        for p in l.weights().iter().chain(l.biases()) {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&model_digest(model));
    let mut meta = extra.clone();
    if let Some(t) = &model.train_meta {
        meta.extend(train_meta_entries(t));
    }
    metadata_block(&mut out, &meta);
    out
}

pub fn write_quantized(q: &QuantizedModel, extra: &Metadata) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, SECTION_QUANT, q.arch, q.input_dim, 0.0, q.layers.len());
    for l in &q.layers {
        match l {
            QLayer::Dense { input, output, activation, .. } => {
                descriptor(&mut out, KIND_DENSE, act_tag(*activation), [*input, *output, 0, 0])
            }
            QLayer::Conv1d { channels_in, channels_out, kernel, length, activation, .. } => descriptor(
                &mut out,
                KIND_CONV,
                act_tag(*activation),
                [*channels_in, *channels_out, *kernel, *length],
            ),
            QLayer::MaxPool1d { channels, length, width } => {
                descriptor(&mut out, KIND_POOL, act_tag(Activation::Linear), [*channels, *length, *width, 0])
            }
        }
    }
    for l in &q.layers {
        if let Some((ws, bs)) = l.scales() {
            out.extend_from_slice(&ws.to_le_bytes());
            out.extend_from_slice(&bs.to_le_bytes());
        }
        out.extend(l.weights_q().iter().map(|w| *w as u8));
        for b in l.bias_q() {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out.extend_from_slice(&(q.activations.len() as u16).to_le_bytes());
    for a in &q.activations {
        out.extend_from_slice(&a.scale.to_le_bytes());
        out.push(a.zero_point as u8);
    }
    out.extend_from_slice(&q.source_digest);
    metadata_block(&mut out, extra);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.at.checked_add(n).ok_or(ContainerError::Truncated(self.at))?;
        let s = self.buf.get(self.at..end).ok_or(ContainerError::Truncated(self.at))?;
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ContainerError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, ContainerError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, ContainerError> {
        let raw = self.take(n.checked_mul(4).ok_or(ContainerError::Truncated(self.at))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>, ContainerError> {
        let raw = self.take(n.checked_mul(4).ok_or(ContainerError::Truncated(self.at))?)?;
        Ok(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

struct Descriptor {
    kind: u8,
    activation: Activation,
    dims: [usize; 4],
}

impl Descriptor {
    fn param_counts(&self) -> (usize, usize) {
        let [a, b, c, _] = self.dims;
        match self.kind {
            KIND_DENSE => (a * b, b),
            KIND_CONV => (a * b * c, b),
            _ => (0, 0),
        }
    }
}

fn parse_metadata(text: &str) -> Result<Metadata, ContainerError> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| ContainerError::Corrupt(format!("metadata line {l:?}")))
        })
        .collect()
}

pub fn read(bytes: &[u8]) -> Result<Container, ContainerError> {
    let mut c = Cursor { buf: bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let section = c.u8()?;
    let arch = Arch::from_tag(c.u8()?).ok_or_else(|| ContainerError::Corrupt("arch tag".into()))?;
    let input_dim = c.u32()? as usize;
    let dropout = c.f64()?;
    let n_layers = c.u16()? as usize;
    let mut descs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = c.u8()?;
        if kind > KIND_POOL {
            return Err(ContainerError::Corrupt(format!("layer kind {kind}")));
        }
        let activation = Activation::from_tag(c.u8()?).ok_or_else(|| ContainerError::Corrupt("activation tag".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = c.u32()? as usize;
        }
        if kind == KIND_POOL && dims[2] == 0 {
            return Err(ContainerError::Corrupt("pool width 0".into()));
        }
        descs.push(Descriptor { kind, activation, dims });
    }

    let model = match section {
        SECTION_FLOAT => {
            let mut layers = Vec::with_capacity(n_layers);
            for d in &descs {
                let (nw, nb) = d.param_counts();
                let weights = c.f32s(nw)?;
                let biases = c.f32s(nb)?;
                let [a, b, k, n] = d.dims;
                layers.push(match d.kind {
                    KIND_DENSE => Layer::Dense { input: a, output: b, weights, biases, activation: d.activation },
                    KIND_CONV => Layer::Conv1d {
                        channels_in: a,
                        channels_out: b,
                        kernel: k,
                        length: n,
                        weights,
                        biases,
                        activation: d.activation,
                    },
                    _ => Layer::MaxPool1d { channels: a, length: b, width: k },
                });
            }
            let m = AutoencoderModel::from_layers(arch, input_dim, layers, dropout)
                .map_err(|e| ContainerError::Corrupt(e.to_string()))?;
            ModelFile::Float(m)
        }
        SECTION_QUANT => {
            let mut layers = Vec::with_capacity(n_layers);
            for d in &descs {
                let (nw, nb) = d.param_counts();
                let [a, b, k, n] = d.dims;
                if d.kind == KIND_POOL {
                    layers.push(QLayer::MaxPool1d { channels: a, length: b, width: k });
                    continue;
                }
                let weight_scale = c.f32()?;
                let bias_scale = c.f32()?;
                let weights_q = c.take(nw)?.iter().map(|v| *v as i8).collect();
                let bias_q = c.i32s(nb)?;
                layers.push(if d.kind == KIND_DENSE {
                    QLayer::Dense { input: a, output: b, weights_q, weight_scale, bias_q, bias_scale, activation: d.activation }
                } else {
                    QLayer::Conv1d {
                        channels_in: a,
                        channels_out: b,
                        kernel: k,
                        length: n,
                        weights_q,
                        weight_scale,
                        bias_q,
                        bias_scale,
                        activation: d.activation,
                    }
                });
            }
            let nb = c.u16()? as usize;
            if nb != n_layers + 1 {
                return Err(ContainerError::Corrupt(format!("{nb} activation boundaries for {n_layers} layers")));
            }
            let mut activations = Vec::with_capacity(nb);
            for _ in 0..nb {
                let scale = c.f32()?;
                let zero_point = c.u8()? as i8;
                activations.push(QParams { scale, zero_point });
            }
            ModelFile::Quantized(QuantizedModel {
                arch,
                input_dim,
                layers,
                activations,
                source_digest: [0; 32],
            })
        }
        s => return Err(ContainerError::Corrupt(format!("section tag {s}"))),
    };

    let digest: [u8; 32] = c.array()?;
    let meta_len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(meta_len)?).map_err(|_| ContainerError::Corrupt("metadata not UTF-8".into()))?;
    let metadata = parse_metadata(text)?;
    if c.at != bytes.len() {
        return Err(ContainerError::Corrupt(format!("{} trailing bytes", bytes.len() - c.at)));
    }

    let model = match model {
        ModelFile::Float(mut m) => {
            if model_digest(&m) != digest {
                return Err(ContainerError::Corrupt("parameter digest mismatch".into()));
            }
            m.train_meta = train_meta_from(&metadata);
            ModelFile::Float(m)
        }
        ModelFile::Quantized(mut q) => {
            q.source_digest = digest;
            ModelFile::Quantized(q)
        }
    };
    Ok(Container { model, digest, metadata })
}

pub fn save(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Container, ContainerError> {
    read(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::{init_model, TrainConfig};
    use crate::matrix::Matrix;
    use crate::quantize::{quantize_model, size_report};

    fn trained(arch: Arch) -> AutoencoderModel {
        let x = Matrix::from_vec(32, 16, (0..512).map(|i| (i % 7) as f64 / 7.0).collect());
        let m = init_model(arch, 16, 2).unwrap();
        crate::autoenc::fit(&m, &x, &x, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap()
    }

    #[test]
    fn float_round_trip_is_exact() {
        for arch in [Arch::M1, Arch::M2, Arch::M3] {
            let m = trained(arch);
            let mut extra = Metadata::new();
            extra.insert("seed".into(), "7".into());
            let bytes = write_float(&m, &extra);
            assert_eq!(&bytes[..4], b"LAM1");
            let c = read(&bytes).unwrap();
            assert_eq!(c.metadata["seed"], "7");
            let (back, _) = c.into_float().unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn quantized_round_trip_and_size_report() {
        for arch in [Arch::M1, Arch::M3] {
            let m = trained(arch);
            let x = Matrix::from_vec(8, 16, (0..128).map(|i| (i % 5) as f64 / 5.0).collect());
            let q = quantize_model(&m, &x).unwrap();
            let mut meta = Metadata::new();
            let cal = crate::threshold::calibrate(&(1..=40).map(|i| i as f64 * 1e-3).collect::<Vec<_>>()).unwrap();
            insert_calibration(&mut meta, &cal);
            let bytes = write_quantized(&q, &meta);
            let (back, meta_back) = read(&bytes).unwrap().into_quantized().unwrap();
            assert_eq!(back, q);
            assert_eq!(calibration_from(&meta_back), Some(cal));
            assert_eq!(size_report(&m, &back).unwrap(), size_report(&m, &q).unwrap());
            assert!(read(&bytes).unwrap().into_float().is_err());
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = init_model(Arch::M1, 8, 1).unwrap();
        let bytes = write_float(&m, &Metadata::new());
        assert!(matches!(read(b"NOPE"), Err(ContainerError::BadMagic)));
        assert!(matches!(read(&bytes[..bytes.len() - 3]), Err(ContainerError::Truncated(_))));
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 2 * LAYER_DESCRIPTOR_LEN] ^= 0x40;
        assert!(matches!(read(&flipped), Err(ContainerError::Corrupt(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(read(&v), Err(ContainerError::Version(9))));
    }
}
