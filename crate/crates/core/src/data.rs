//! Joint longitudinal / terminal-event data: subjects, their visits, and
//! long-format CSV ingestion.
//!
//! Two CSV files describe a dataset. The subjects file has header
//! `id,time,event,a,z1,z2,...` (one row per subject, `time` is the follow-up
//! time `T = min(C, D)`, `event` the indicator `D < C`, `a` the treatment arm).
//! The visits file has header `id,t,y` (one row per longitudinal measurement).

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file} line {line}: {message}")]
    Parse {
        file: &'static str,
        line: u64,
        message: String,
    },
    #[error("visits line {line}: unknown subject id `{id}`")]
    UnknownSubject { line: u64, id: String },
    #[error("subject `{id}`: visit at t = {time} is not before follow-up time {followup}")]
    VisitAfterFollowup { id: String, time: f64, followup: f64 },
    #[error("subject `{id}`: duplicate visit time {time}")]
    DuplicateVisit { id: String, time: f64 },
    #[error("subject `{id}`: treatment must be 0 or 1, got {value}")]
    NonBinaryTreatment { id: String, value: f64 },
    #[error("subject `{id}`: {message}")]
    InvalidSubject { id: String, message: String },
    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),
    #[error("dataset has no subjects")]
    Empty,
    #[error("dataset has no observed terminal events")]
    NoEvents,
    #[error("covariate dimension mismatch: subject `{id}` has {got}, expected {expected}")]
    CovariateDimension {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("tau = {tau} must be positive and cover every visit time (max visit {max_visit})")]
    InvalidTau { tau: f64, max_visit: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One trial participant. `covariates[0]` is the treatment indicator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subject {
    pub id: String,
    pub covariates: Vec<f64>,
    pub followup_time: f64,
    pub event: bool,
}

impl Subject {
    #[inline]
    pub fn treatment(&self) -> f64 {
        self.covariates[0]
    }

    /// Baseline covariates other than treatment.
    #[inline]
    pub fn extra_covariates(&self) -> &[f64] {
        &self.covariates[1..]
    }
}

/// A longitudinal measurement. The owning subject is implied by position in
/// [`TrialData::visits`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Visit {
    pub time: f64,
    pub value: f64,
}

/// Validated, immutable dataset. `visits[k]` belongs to `subjects[k]` and is
/// sorted by strictly increasing time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    subjects: Vec<Subject>,
    visits: Vec<Vec<Visit>>,
    tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub n: usize,
    pub event_fraction: f64,
    pub censoring_fraction: f64,
    pub mean_visits: f64,
    pub covariate_dim: usize,
}

impl TrialData {
    /// Validates and assembles a dataset. Visits are sorted per subject;
    /// `tau = None` selects the largest visit or follow-up time.
    pub fn new(
        subjects: Vec<Subject>,
        mut visits: Vec<Vec<Visit>>,
        tau: Option<f64>,
    ) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::Empty);
        }
        assert_eq!(subjects.len(), visits.len(), "one visit list per subject");
        let dim = subjects[0].covariates.len();
        let mut seen = HashMap::with_capacity(subjects.len());
        for s in &subjects {
            if seen.insert(s.id.as_str(), ()).is_some() {
                return Err(DataError::DuplicateSubject(s.id.clone()));
            }
            validate_subject(s, dim)?;
        }
        if !subjects.iter().any(|s| s.event) {
            return Err(DataError::NoEvents);
        }
        let mut max_time = 0.0f64;
        let mut max_visit = 0.0f64;
        for (s, vs) in subjects.iter().zip(visits.iter_mut()) {
            vs.sort_by(|a, b| a.time.total_cmp(&b.time));
            for w in vs.windows(2) {
                if w[0].time == w[1].time {
                    return Err(DataError::DuplicateVisit {
                        id: s.id.clone(),
                        time: w[0].time,
                    });
                }
            }
            for v in vs.iter() {
                if !v.time.is_finite() || v.time < 0.0 || !v.value.is_finite() {
                    return Err(DataError::InvalidSubject {
                        id: s.id.clone(),
                        message: format!("invalid visit (t = {}, y = {})", v.time, v.value),
                    });
                }
                if v.time >= s.followup_time {
                    return Err(DataError::VisitAfterFollowup {
                        id: s.id.clone(),
                        time: v.time,
                        followup: s.followup_time,
                    });
                }
                max_visit = max_visit.max(v.time);
            }
            max_time = max_time.max(s.followup_time);
        }
        let tau = match tau {
            Some(tau) => {
                if !(tau > 0.0) || !tau.is_finite() || tau < max_visit {
                    return Err(DataError::InvalidTau { tau, max_visit });
                }
                tau
            }
            None => {
                let tau = max_time.max(max_visit);
                if !(tau > 0.0) {
                    return Err(DataError::InvalidTau { tau, max_visit });
                }
                tau
            }
        };
        Ok(Self {
            subjects,
            visits,
            tau,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn visits(&self) -> &[Vec<Visit>] {
        &self.visits
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.subjects[0].covariates.len()
    }

    pub fn total_visits(&self) -> usize {
        self.visits.iter().map(Vec::len).sum()
    }

    /// Sorted, deduplicated visit times pooled over all subjects.
    pub fn distinct_visit_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self.visits.iter().flatten().map(|v| v.time).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        times
    }

    /// Returns a copy with every longitudinal value multiplied by `c`.
    pub fn scale_outcome(&self, c: f64) -> Self {
        let visits = self
            .visits
            .iter()
            .map(|vs| {
                vs.iter()
                    .map(|v| Visit {
                        time: v.time,
                        value: v.value * c,
                    })
                    .collect()
            })
            .collect();
        Self {
            subjects: self.subjects.clone(),
            visits,
            tau: self.tau,
        }
    }

    /// Returns a copy with the subjects (and their visits) reordered so that
    /// position `k` holds the subject previously at `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.n());
        Self {
            subjects: order.iter().map(|&k| self.subjects[k].clone()).collect(),
            visits: order.iter().map(|&k| self.visits[k].clone()).collect(),
            tau: self.tau,
        }
    }

    /// Returns a copy with `shift` added to every covariate vector.
    /// Fails if the treatment column would leave {0, 1}.
    pub fn shift_covariates(&self, shift: &[f64]) -> Result<Self, DataError> {
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for (z, c) in s.covariates.iter_mut().zip(shift) {
                    *z += c;
                }
                s
            })
            .collect();
        Self::new(subjects, self.visits.clone(), Some(self.tau))
    }

    pub fn summary(&self) -> DataSummary {
        let n = self.n();
        let events = self.subjects.iter().filter(|s| s.event).count();
        let event_fraction = events as f64 / n as f64;
        DataSummary {
            n,
            event_fraction,
            censoring_fraction: 1.0 - event_fraction,
            mean_visits: self.total_visits() as f64 / n as f64,
            covariate_dim: self.covariate_dim(),
        }
    }

    /// Reads the two long-format CSV streams.
    pub fn from_csv<S: Read, V: Read>(
        subjects_csv: S,
        visits_csv: V,
        tau: Option<f64>,
    ) -> Result<Self, DataError> {
        let subjects = read_subjects(subjects_csv)?;
        let mut index = HashMap::with_capacity(subjects.len());
        for (k, s) in subjects.iter().enumerate() {
            if index.insert(s.id.as_str(), k).is_some() {
                return Err(DataError::DuplicateSubject(s.id.clone()));
            }
        }
        let mut visits = vec![Vec::new(); subjects.len()];
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(visits_csv);
        check_header(reader.headers()?, &["id", "t", "y"], "visits")?;
        for record in reader.records() {
            let record = record?;
            let line = line_of(&record);
            if record.len() != 3 {
                return Err(parse_err("visits", line, "expected 3 fields (id,t,y)"));
            }
            let id = &record[0];
            let k = *index.get(id).ok_or_else(|| DataError::UnknownSubject {
                line,
                id: id.to_string(),
            })?;
            let time = parse_f64(&record[1], "visits", line, "t")?;
            let value = parse_f64(&record[2], "visits", line, "y")?;
            visits[k].push(Visit { time, value });
        }
        Self::new(subjects, visits, tau)
    }

    /// Writes the dataset back out in the ingestion format. Numbers use
    /// Rust's shortest round-trip representation, so re-reading is exact.
    pub fn to_csv<S: Write, V: Write>(
        &self,
        subjects_out: S,
        visits_out: V,
    ) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(subjects_out);
        let mut header = vec!["id".to_string(), "time".into(), "event".into(), "a".into()];
        header.extend((1..self.covariate_dim()).map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for s in &self.subjects {
            let mut row = vec![
                s.id.clone(),
                s.followup_time.to_string(),
                u8::from(s.event).to_string(),
            ];
            row.extend(s.covariates.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(visits_out);
        w.write_record(["id", "t", "y"])?;
        for (s, vs) in self.subjects.iter().zip(&self.visits) {
            for v in vs {
                w.write_record([s.id.clone(), v.time.to_string(), v.value.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn validate_subject(s: &Subject, dim: usize) -> Result<(), DataError> {
    if s.covariates.len() != dim {
        return Err(DataError::CovariateDimension {
            id: s.id.clone(),
            expected: dim,
            got: s.covariates.len(),
        });
    }
    if dim == 0 {
        return Err(DataError::InvalidSubject {
            id: s.id.clone(),
            message: "missing treatment covariate".into(),
        });
    }
    let a = s.covariates[0];
    if a != 0.0 && a != 1.0 {
        return Err(DataError::NonBinaryTreatment {
            id: s.id.clone(),
            value: a,
        });
    }
    if !(s.followup_time >= 0.0) || !s.followup_time.is_finite() {
        return Err(DataError::InvalidSubject {
            id: s.id.clone(),
            message: format!("follow-up time must be nonnegative, got {}", s.followup_time),
        });
    }
    if s.covariates.iter().any(|z| !z.is_finite()) {
        return Err(DataError::InvalidSubject {
            id: s.id.clone(),
            message: "non-finite covariate".into(),
        });
    }
    Ok(())
}

fn read_subjects<R: Read>(input: R) -> Result<Vec<Subject>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    check_header(&headers, &["id", "time", "event", "a"], "subjects")?;
    for (k, h) in headers.iter().enumerate().skip(4) {
        let expected = format!("z{}", k - 3);
        if h != expected {
            return Err(parse_err(
                "subjects",
                1,
                &format!("column {} must be `{expected}`, found `{h}`", k + 1),
            ));
        }
    }
    let width = headers.len();
    let mut subjects = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != width {
            return Err(parse_err(
                "subjects",
                line,
                &format!("expected {width} fields, found {}", record.len()),
            ));
        }
        let followup_time = parse_f64(&record[1], "subjects", line, "time")?;
        let event = match &record[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_err(
                    "subjects",
                    line,
                    &format!("event must be 0 or 1, found `{other}`"),
                ))
            }
        };
        let covariates = (3..width)
            .map(|k| parse_f64(&record[k], "subjects", line, &headers[k]))
            .collect::<Result<Vec<_>, _>>()?;
        subjects.push(Subject {
            id: record[0].to_string(),
            covariates,
            followup_time,
            event,
        });
    }
    Ok(subjects)
}

fn check_header(
    headers: &csv::StringRecord,
    expected: &[&str],
    file: &'static str,
) -> Result<(), DataError> {
    let ok = headers.len() >= expected.len()
        && expected.iter().zip(headers.iter()).all(|(e, h)| *e == h)
        && (file != "visits" || headers.len() == expected.len());
    if ok {
        Ok(())
    } else {
        Err(parse_err(
            file,
            1,
            &format!(
                "header must start with `{}`, found `{}`",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ))
    }
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_f64(field: &str, file: &'static str, line: u64, column: &str) -> Result<f64, DataError> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(
            file,
            line,
            &format!("column `{column}`: cannot parse `{field}` as a finite number"),
        )),
    }
}

fn parse_err(file: &'static str, line: u64, message: &str) -> DataError {
    DataError::Parse {
        file,
        line,
        message: message.to_string(),
    }
}
