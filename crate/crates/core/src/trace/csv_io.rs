//! CSV formats for raw and aggregated traces.
//!
//! Raw: `device_id,firmware_id,time_step,label,b0,...,b{L-1}` with bytes as
//! decimal 0-255. Aggregated: `label,f0,...,f{l-1}`. Lines starting with `#`
//! before the header are comments and carry provenance (config digest, seed).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AggregatedTrace, Label, SramTrace, TraceError};

fn write_comments<W: Write>(w: &mut W, comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> TraceError {
    let row = e.position().map_or(0, |p| p.line() as usize);
    TraceError::Row {
        row,
        msg: e.to_string(),
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(r)
}

pub fn write_traces<W: Write>(w: W, traces: &[SramTrace], comments: &[String]) -> Result<(), TraceError> {
    let mut w = BufWriter::new(w);
    write_comments(&mut w, comments)?;
    let len = traces.first().map_or(0, |t| t.bytes.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["device_id".to_string(), "firmware_id".into(), "time_step".into(), "label".into()];
    header.extend((0..len).map(|i| format!("b{i}")));
    out.write_record(&header).map_err(csv_err)?;
    for t in traces {
        if t.bytes.len() != len {
            return Err(TraceError::InvalidArgument("traces have inconsistent lengths".into()));
        }
        let mut rec = vec![t.device_id.clone(), t.firmware_id.clone(), t.time_step.to_string(), t.label.as_str().into()];
        rec.extend(t.bytes.iter().map(|b| b.to_string()));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_traces<R: Read>(r: R) -> Result<Vec<SramTrace>, TraceError> {
    let mut rd = reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.len() < 5
        || header.iter().take(4).ne(["device_id", "firmware_id", "time_step", "label"])
    {
        return Err(TraceError::Row {
            row: 1,
            msg: "expected header device_id,firmware_id,time_step,label,b0,...".into(),
        });
    }
    let width = header.len() - 4;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| TraceError::Row { row, msg };
        if rec.len() != header.len() {
            return Err(bad(format!("expected {} byte columns, found {}", width, rec.len().saturating_sub(4))));
        }
        let time_step = rec[2]
            .trim()
            .parse::<u64>()
            .map_err(|_| bad(format!("bad time_step `{}`", &rec[2])))?;
        let label = Label::parse(rec[3].trim()).ok_or_else(|| bad(format!("bad label `{}`", &rec[3])))?;
        let bytes = rec
            .iter()
            .skip(4)
            .map(|v| {
                let n: i64 = v.trim().parse().map_err(|_| bad(format!("bad byte value `{v}`")))?;
                u8::try_from(n).map_err(|_| bad(format!("byte value {n} outside 0-255")))
            })
            .collect::<Result<Vec<u8>, _>>()?;
        out.push(SramTrace {
            device_id: rec[0].to_string(),
            firmware_id: rec[1].to_string(),
            time_step,
            bytes,
            label,
        });
    }
    Ok(out)
}

pub fn export_traces(path: &Path, traces: &[SramTrace], comments: &[String]) -> Result<(), TraceError> {
    write_traces(File::create(path)?, traces, comments)
}

pub fn import_traces(path: &Path) -> Result<Vec<SramTrace>, TraceError> {
    read_traces(BufReader::new(File::open(path)?))
}

pub fn write_aggregated<W: Write>(w: W, rows: &[AggregatedTrace], comments: &[String]) -> Result<(), TraceError> {
    let mut w = BufWriter::new(w);
    write_comments(&mut w, comments)?;
    let l = rows.first().map_or(0, |t| t.features.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["label".to_string()];
    header.extend((0..l).map(|i| format!("f{i}")));
    out.write_record(&header).map_err(csv_err)?;
    for t in rows {
        if t.features.len() != l {
            return Err(TraceError::InvalidArgument("aggregates have inconsistent lengths".into()));
        }
        let mut rec = vec![t.label.as_str().to_string()];
        rec.extend(t.features.iter().map(|f| f.to_string()));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_aggregated<R: Read>(r: R) -> Result<Vec<AggregatedTrace>, TraceError> {
    let mut rd = reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("label") {
        return Err(TraceError::Row {
            row: 1,
            msg: "expected header label,f0,...".into(),
        });
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |msg: String| TraceError::Row { row, msg };
        if rec.len() != header.len() {
            return Err(bad("inconsistent feature count".into()));
        }
        let label = Label::parse(rec[0].trim()).ok_or_else(|| bad(format!("bad label `{}`", &rec[0])))?;
        let features = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad(format!("bad feature `{v}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(AggregatedTrace {
            features,
            device_id: String::new(),
            firmware_id: String::new(),
            time_step: out.len() as u64,
            label,
        });
    }
    Ok(out)
}

pub fn export_aggregated(path: &Path, rows: &[AggregatedTrace], comments: &[String]) -> Result<(), TraceError> {
    write_aggregated(File::create(path)?, rows, comments)
}

pub fn import_aggregated(path: &Path) -> Result<Vec<AggregatedTrace>, TraceError> {
    read_aggregated(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_profile, sample_trace, LayoutSpec};

    #[test]
    fn two_row_file() {
        let text = "device_id,firmware_id,time_step,label,b0,b1\nd,f,0,safe,1,2\nd,f,1,unsafe,3,255\n";
        let t = read_traces(text.as_bytes()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].bytes, vec![3, 255]);
        assert_eq!(t[1].label, Label::Unsafe);
    }

    #[test]
    fn out_of_range_byte_names_row() {
        let text = "# provenance\ndevice_id,firmware_id,time_step,label,b0,b1\nd,f,0,safe,1,2\nd,f,1,safe,256,0\n";
        match read_traces(text.as_bytes()) {
            Err(TraceError::Row { row, msg }) => {
                assert_eq!(row, 4);
                assert!(msg.contains("256"), "{msg}");
            }
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_length_is_rejected() {
        let text = "device_id,firmware_id,time_step,label,b0,b1\nd,f,0,safe,1\n";
        assert!(matches!(read_traces(text.as_bytes()), Err(TraceError::Row { row: 2, .. })));
    }

    #[test]
    fn export_import_round_trip() {
        let p = generate_profile(1, &LayoutSpec::default()).unwrap();
        let traces: Vec<_> = (0..3).map(|t| sample_trace(&p, 5, t)).collect();
        let mut buf = Vec::new();
        write_traces(&mut buf, &traces, &["seed=1".into()]).unwrap();
        assert_eq!(read_traces(buf.as_slice()).unwrap(), traces);
    }
}
