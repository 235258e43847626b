//! Line-delimited cohort files.
//!
//! Line 1 is a header `{"cohort_version":1,"generator_version":…,"config":{…}}`;
//! every following line is one `PatientRecord` as a JSON document.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::record::PatientRecord;
use crate::synth::{Cohort, CohortConfig};
use crate::{Error, Result};

pub const COHORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortHeader {
    pub cohort_version: u32,
    #[serde(default)]
    pub generator_version: String,
    #[serde(default)]
    pub config: Option<CohortConfig>,
}

pub fn write_cohort_to(cohort: &Cohort, mut out: impl Write) -> Result<()> {
    let header = CohortHeader {
        cohort_version: COHORT_VERSION,
        generator_version: cohort.generator_version.clone(),
        config: cohort.config,
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for r in &cohort.records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_cohort_to(cohort, BufWriter::new(file))
}

/// Streaming reader: holds one line in memory at a time.
pub struct CohortReader<R> {
    lines: std::io::Lines<BufReader<R>>,
    header: CohortHeader,
    line_no: usize,
}

impl<R: Read> CohortReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let first = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing cohort header".into(),
        })??;
        let value: serde_json::Value = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        match value.get("cohort_version").and_then(|v| v.as_u64()) {
            Some(v) if v == COHORT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v.to_string(),
                    expected: COHORT_VERSION.to_string(),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "header lacks cohort_version".into(),
                })
            }
        }
        let header = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        Ok(CohortReader {
            lines,
            header,
            line_no: 1,
        })
    }

    pub fn header(&self) -> &CohortHeader {
        &self.header
    }
}

impl<R: Read> Iterator for CohortReader<R> {
    type Item = Result<PatientRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = self.line_no;
            return Some(
                serde_json::from_str::<PatientRecord>(&line)
                    .map_err(|e| Error::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })
                    .and_then(|r| {
                        r.validate().map_err(|e| Error::Parse {
                            line: line_no,
                            message: e.to_string(),
                        })?;
                        Ok(r)
                    }),
            );
        }
    }
}

pub fn read_cohort_from(reader: impl Read) -> Result<Cohort> {
    let mut rdr = CohortReader::new(reader)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for r in rdr.by_ref() {
        let r = r?;
        if !seen.insert(r.patient_id.clone()) {
            return Err(Error::Parse {
                line: records.len() + 2,
                message: format!("duplicate patient_id {}", r.patient_id),
            });
        }
        records.push(r);
    }
    let header = rdr.header().clone();
    Ok(Cohort {
        config: header.config,
        generator_version: header.generator_version,
        records,
    })
}

pub fn read_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    read_cohort_from(File::open(path)?)
}

pub fn open_cohort(path: impl AsRef<Path>) -> Result<CohortReader<File>> {
    CohortReader::new(File::open(path)?)
}
