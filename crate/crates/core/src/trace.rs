//! Per-step attention observations and their line-delimited persistence.
//!
//! A trace file is one JSON header line (config echo) followed by one JSON
//! record per line, so arbitrarily long generation traces can be written
//! and re-read as a stream. Label files are plain comma-separated lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One per-step, per-layer observation of attention on the image span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Generated-position index, 1-based.
    pub step: usize,
    pub layer: usize,
    /// Head-mean attention mass on the image span, in [0, 1].
    pub mass: f64,
    /// Head-mean attention per image-token index, when recorded.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub profile: Option<Vec<f64>>,
    pub run_id: String,
}

/// First line of a trace file: enough config echo to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub alpha: f64,
    pub beta: f64,
    /// Intervened layer range as `"lo:hi"`; `"0:0"` when disabled.
    pub layers: String,
    pub seed: u64,
    pub n_image: usize,
    pub n_prompt: usize,
}

impl TraceHeader {
    pub fn disabled(seed: u64, n_image: usize, n_prompt: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            layers: "0:0".into(),
            seed,
            n_image,
            n_prompt,
        }
    }
}

pub fn write_trace_to(
    mut out: impl Write,
    header: &TraceHeader,
    records: &[TraceRecord],
) -> Result<()> {
    let header_line = serde_json::to_string(header)
        .map_err(|e| Error::CorruptFile(format!("header serialization failed: {e}")))?;
    writeln!(out, "{header_line}")?;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::CorruptFile(format!("record serialization failed: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn write_trace(
    path: impl AsRef<Path>,
    header: &TraceHeader,
    records: &[TraceRecord],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_trace_to(&mut out, header, records)?;
    out.flush()?;
    Ok(())
}

/// Streaming record reader; the header is consumed on construction.
pub struct TraceReader<R> {
    lines: Lines<R>,
    line_no: usize,
}

impl TraceReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<(TraceHeader, Self)> {
        Self::from_buf_read(BufReader::new(File::open(path)?))
    }
}

impl<R: BufRead> TraceReader<R> {
    pub fn from_buf_read(reader: R) -> Result<(TraceHeader, Self)> {
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or(Error::EmptyTrace)?
            .map_err(Error::Io)?;
        let header: TraceHeader = serde_json::from_str(&header_line).map_err(|e| {
            Error::MalformedTrace {
                line: 1,
                msg: format!("unparseable header: {e}"),
            }
        })?;
        Ok((header, Self { lines, line_no: 1 }))
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(Error::Io(e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: TraceRecord = match serde_json::from_str(&line) {
                Ok(record) => record,
                Err(e) => {
                    return Some(Err(Error::MalformedTrace {
                        line: self.line_no,
                        msg: e.to_string(),
                    }))
                }
            };
            if !(0.0..=1.0).contains(&record.mass) {
                return Some(Err(Error::MalformedTrace {
                    line: self.line_no,
                    msg: format!("mass {} outside [0, 1]", record.mass),
                }));
            }
            return Some(Ok(record));
        }
    }
}

/// Load a whole trace, checking that steps strictly increase within each
/// layer stream.
pub fn read_trace(path: impl AsRef<Path>) -> Result<(TraceHeader, Vec<TraceRecord>)> {
    let (header, reader) = TraceReader::open(path)?;
    let records: Vec<TraceRecord> = reader.collect::<Result<_>>()?;
    validate_step_order(&records)?;
    Ok((header, records))
}

/// Steps must strictly increase within each (run, layer) stream.
pub fn validate_step_order(records: &[TraceRecord]) -> Result<()> {
    use std::collections::HashMap;
    let mut last: HashMap<(&str, usize), usize> = HashMap::new();
    for record in records {
        let key = (record.run_id.as_str(), record.layer);
        if let Some(prev) = last.get(&key) {
            if record.step <= *prev {
                return Err(Error::MalformedTrace {
                    line: 0,
                    msg: format!(
                        "step {} after {} in layer {} of run {}",
                        record.step, prev, record.layer, record.run_id
                    ),
                });
            }
        }
        last.insert(key, record.step);
    }
    Ok(())
}

/// Externally produced ground-truth class for a generated word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenClass {
    Correct,
    Hallucinated,
}

/// One class-labeled word occurrence at a generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledToken {
    pub step: usize,
    pub word: String,
    pub class: TokenClass,
    /// True when the tokenizer split the word across several tokens.
    pub multi_token: bool,
}

/// Parse `step,word,class,multi_token` lines. Blank lines and `#` comments
/// are skipped.
pub fn parse_labels(reader: impl BufRead) -> Result<Vec<LabeledToken>> {
    let mut labels = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::MalformedLabel {
                line: line_no,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let step: usize = fields[0].parse().map_err(|_| Error::MalformedLabel {
            line: line_no,
            msg: format!("bad step {:?}", fields[0]),
        })?;
        let class = match fields[2] {
            "correct" => TokenClass::Correct,
            "hallucinated" => TokenClass::Hallucinated,
            other => {
                return Err(Error::MalformedLabel {
                    line: line_no,
                    msg: format!("unknown class {other:?}"),
                })
            }
        };
        let multi_token = match fields[3] {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                return Err(Error::MalformedLabel {
                    line: line_no,
                    msg: format!("bad multi_token flag {other:?}"),
                })
            }
        };
        labels.push(LabeledToken {
            step,
            word: fields[1].to_string(),
            class,
            multi_token,
        });
    }
    Ok(labels)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabeledToken>> {
    parse_labels(BufReader::new(File::open(path)?))
}
