use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of certifying one sample. `predicted == None` means abstention,
/// in which case `radius` is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct CertificationRecord {
    pub sample_id: u64,
    pub label: usize,
    pub predicted: Option<usize>,
    pub pa_lower: f64,
    pub radius: f64,
    pub ms: f64,
    pub correct: bool,
}

impl CertificationRecord {
    pub fn abstained(&self) -> bool {
        self.predicted.is_none()
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    sample_id: u64,
    label: usize,
    /// -1 when abstaining.
    predicted: i64,
    abstain: bool,
    #[serde(rename = "pA_lower")]
    pa_lower: f64,
    radius: f64,
    ms: f64,
}

pub fn write_records_csv<W: Write>(out: W, records: &[CertificationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(Row {
            sample_id: r.sample_id,
            label: r.label,
            predicted: r.predicted.map_or(-1, |c| c as i64),
            abstain: r.abstained(),
            pa_lower: r.pa_lower,
            radius: r.radius,
            ms: r.ms,
        })
        .map_err(csv_error)?;
    }
    if records.is_empty() {
        w.write_record(["sample_id", "label", "predicted", "abstain", "pA_lower", "radius", "ms"])
            .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Format(format!("writing records: {e}")))
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<CertificationRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.deserialize::<Row>() {
        let row = row.map_err(csv_error)?;
        let predicted = match (row.abstain, row.predicted) {
            (true, -1) => None,
            (false, c) if c >= 0 => Some(c as usize),
            _ => {
                return Err(Error::Format(format!(
                    "sample {}: predicted {} inconsistent with abstain={}",
                    row.sample_id, row.predicted, row.abstain
                )))
            }
        };
        out.push(CertificationRecord {
            sample_id: row.sample_id,
            label: row.label,
            predicted,
            pa_lower: row.pa_lower,
            radius: row.radius,
            ms: row.ms,
            correct: predicted == Some(row.label),
        });
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("records csv: {e}"))
}
