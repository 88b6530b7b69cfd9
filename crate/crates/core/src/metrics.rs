//! Run records: metric rows and the byte-level communication ledger, plus
//! their line-delimited JSON encoding.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_VERSION: u32 = 1;

/// Bytes per transmitted element (64-bit floats).
pub const BYTES_PER_ELEMENT: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Subject {
    Client(usize),
    Server(ServerTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerTag {
    Server,
}

impl Subject {
    pub const SERVER: Subject = Subject::Server(ServerTag::Server);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub seed: u64,
    pub round: usize,
    pub subject: Subject,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    PeerToPeer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    DreamBroadcast,
    PseudoGradient,
    SoftLabels,
    DreamSet,
    ModelParameters,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub payload: Payload,
    pub elements: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub records: Vec<CommRecord>,
}

impl CommLedger {
    pub fn record(&mut self, round: usize, client: usize, direction: Direction, payload: Payload, elements: usize) {
        let elements = elements as u64;
        self.records.push(CommRecord {
            round,
            client,
            direction,
            payload,
            elements,
            bytes: elements * BYTES_PER_ELEMENT,
        });
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn bytes_by(&self, direction: Direction, payload: Payload) -> u64 {
        self.records
            .iter()
            .filter(|r| r.direction == direction && r.payload == payload)
            .map(|r| r.bytes)
            .sum()
    }

    /// Distinct rounds that carried any traffic.
    pub fn rounds(&self) -> usize {
        let mut rs: Vec<usize> = self.records.iter().map(|r| r.round).collect();
        rs.sort_unstable();
        rs.dedup();
        rs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub version: u32,
    pub method: String,
    pub seed: u64,
    /// Architecture name and parameter count per client, then the server.
    pub architectures: Vec<(String, usize)>,
    pub clients: usize,
    pub std_convention: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub header: RunHeader,
    pub rows: Vec<MetricRow>,
    pub ledger: CommLedger,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(RunHeader),
    Metric(MetricRow),
    Comm(CommRecord),
}

/// Headline metric names written at the end of every run.
pub const FINAL_CLIENT_ACCURACY: &str = "final_mean_client_accuracy";
pub const FINAL_SERVER_ACCURACY: &str = "final_server_accuracy";

impl MetricsRecord {
    pub fn new(method: &str, seed: u64, architectures: Vec<(String, usize)>, clients: usize) -> Self {
        MetricsRecord {
            header: RunHeader {
                version: METRICS_VERSION,
                method: method.to_string(),
                seed,
                architectures,
                clients,
                std_convention: "population".into(),
            },
            rows: Vec::new(),
            ledger: CommLedger::default(),
        }
    }

    pub fn push(&mut self, round: usize, subject: Subject, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            method: self.header.method.clone(),
            seed: self.header.seed,
            round,
            subject,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Latest value of a metric for a subject.
    pub fn last(&self, subject: Subject, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.subject == subject && r.metric == metric)
            .map(|r| r.value)
    }

    /// Values of a metric for a subject in round order.
    pub fn series(&self, subject: Subject, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.subject == subject && r.metric == metric)
            .map(|r| (r.round, r.value))
            .collect()
    }

    pub fn final_client_accuracy(&self) -> Option<f64> {
        self.last(Subject::SERVER, FINAL_CLIENT_ACCURACY)
    }

    pub fn final_server_accuracy(&self) -> Option<f64> {
        self.last(Subject::SERVER, FINAL_SERVER_ACCURACY)
    }

    /// One header line, then metric rows, then ledger records.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |l: &Line| -> Result<()> {
            serde_json::to_writer(&mut w, l).map_err(|e| Error::invalid(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&Line::Header(self.header.clone()))?;
        for r in &self.rows {
            line(&Line::Metric(r.clone()))?;
        }
        for c in &self.ledger.records {
            line(&Line::Comm(c.clone()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, origin: &str) -> Result<Self> {
        let mut header = None;
        let mut rows = Vec::new();
        let mut ledger = CommLedger::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                detail: e.to_string(),
            })?;
            match parsed {
                Line::Header(h) => {
                    if header.is_some() {
                        return Err(Error::Parse {
                            path: origin.to_string(),
                            line: i + 1,
                            detail: "second header".into(),
                        });
                    }
                    if h.version != METRICS_VERSION {
                        return Err(Error::Parse {
                            path: origin.to_string(),
                            line: i + 1,
                            detail: format!("unsupported metrics version {}", h.version),
                        });
                    }
                    header = Some(h);
                }
                Line::Metric(m) => rows.push(m),
                Line::Comm(c) => ledger.records.push(c),
            }
        }
        let header = header.ok_or_else(|| Error::Parse {
            path: origin.to_string(),
            line: 0,
            detail: "missing header".into(),
        })?;
        Ok(MetricsRecord { header, rows, ledger })
    }
}

/// Communication summary for one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CommRow {
    pub method: String,
    pub architectures: String,
    pub max_param_count: usize,
    pub rounds: usize,
    pub clients: usize,
    /// Bytes per round per client, keyed by `direction/payload`.
    pub per_round_per_client: BTreeMap<String, f64>,
    pub bytes_per_round_per_client: f64,
    pub total_bytes: u64,
}

/// Per-round, per-client byte accounting for a finished run.
pub fn comm_report(record: &MetricsRecord) -> CommRow {
    let ledger = &record.ledger;
    let rounds = ledger.rounds();
    let clients = record.header.clients.max(1);
    let denom = (rounds.max(1) * clients) as f64;
    let mut per = BTreeMap::new();
    for r in &ledger.records {
        let key = format!(
            "{}/{}",
            serde_json::to_value(r.direction).expect("enum").as_str().expect("str"),
            serde_json::to_value(r.payload).expect("enum").as_str().expect("str")
        );
        *per.entry(key).or_insert(0u64) += r.bytes;
    }
    let total = ledger.total_bytes();
    CommRow {
        method: record.header.method.clone(),
        architectures: record
            .header
            .architectures
            .iter()
            .map(|(n, _)| n.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        max_param_count: record.header.architectures.iter().map(|a| a.1).max().unwrap_or(0),
        rounds,
        clients,
        per_round_per_client: per.into_iter().map(|(k, v)| (k, v as f64 / denom)).collect(),
        bytes_per_round_per_client: if rounds == 0 { 0.0 } else { total as f64 / denom },
        total_bytes: total,
    }
}
