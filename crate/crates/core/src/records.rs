//! Newline-delimited sample and embedding records.
//!
//! One record per line, space-separated `key=value` fields:
//!
//! ```text
//! id=3 view=aerial slots=1,5,9 shape=4x4x16 data=<base64 of little-endian f64>
//! ```
//!
//! Embedding records omit `slots`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::view::View;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: usize,
    pub view: View,
    pub slots: Option<Vec<usize>>,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn to_line(&self) -> String {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        let mut line = format!("id={} view={}", self.id, self.view);
        if let Some(slots) = &self.slots {
            let s: Vec<String> = slots.iter().map(|d| d.to_string()).collect();
            line.push_str(&format!(" slots={}", s.join(",")));
        }
        line.push_str(&format!(" shape={} data={}", dims.join("x"), STANDARD.encode(bytes)));
        line
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Record> {
        let err = |m: String| Error::Parse {
            line: lineno,
            message: m,
        };
        let (mut id, mut view, mut slots, mut shape, mut data) = (None, None, None, None, None);
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| err(format!("field {field:?} is not key=value")))?;
            match k {
                "id" => id = Some(v.parse::<usize>().map_err(|_| err(format!("bad id {v:?}")))?),
                "view" => view = Some(v.parse::<View>().map_err(|e| err(e.to_string()))?),
                "slots" => {
                    let parsed = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',')
                            .map(|s| s.parse::<usize>().map_err(|_| err(format!("bad slot {s:?}"))))
                            .collect::<Result<Vec<_>>>()?
                    };
                    slots = Some(parsed);
                }
                "shape" => {
                    shape = Some(
                        v.split('x')
                            .map(|s| s.parse::<usize>().map_err(|_| err(format!("bad extent {s:?}"))))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "data" => {
                    let bytes = STANDARD
                        .decode(v)
                        .map_err(|e| err(format!("bad base64 payload: {e}")))?;
                    if bytes.len() % 8 != 0 {
                        return Err(err("payload is not a whole number of f64 values".into()));
                    }
                    data = Some(
                        bytes
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect::<Vec<_>>(),
                    );
                }
                other => return Err(err(format!("unknown field {other:?}"))),
            }
        }
        let rec = Record {
            id: id.ok_or_else(|| err("missing id".into()))?,
            view: view.ok_or_else(|| err("missing view".into()))?,
            slots,
            shape: shape.ok_or_else(|| err("missing shape".into()))?,
            data: data.ok_or_else(|| err("missing data".into()))?,
        };
        if rec.shape.iter().product::<usize>() != rec.data.len() {
            return Err(err(format!(
                "shape {:?} does not match {} values",
                rec.shape,
                rec.data.len()
            )));
        }
        Ok(rec)
    }
}

pub fn write_records(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Parses every nonblank line.
pub fn read_records(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Record::parse_line(l, i + 1))
        .collect()
}

impl From<&Sample> for Record {
    fn from(s: &Sample) -> Self {
        Record {
            id: s.id,
            view: s.view,
            slots: Some(s.signal_slots.clone()),
            shape: s.x.shape().to_vec(),
            data: s.x.data().to_vec(),
        }
    }
}

impl TryFrom<Record> for Sample {
    type Error = Error;

    fn try_from(r: Record) -> Result<Sample> {
        let slots = r
            .slots
            .ok_or_else(|| Error::Format(format!("sample record for id {} has no slots", r.id)))?;
        Ok(Sample {
            x: Tensor::new(r.shape, r.data)?,
            id: r.id,
            view: r.view,
            signal_slots: slots,
        })
    }
}

pub fn export_samples(samples: &[Sample]) -> String {
    let recs: Vec<Record> = samples.iter().map(Record::from).collect();
    write_records(&recs)
}

pub fn import_samples(text: &str) -> Result<Vec<Sample>> {
    read_records(text)?.into_iter().map(Sample::try_from).collect()
}
